"""Rotation-equivariant decoding of prompt-conditioned patch tokens.

Pipeline: feature-wise modulation of projected patch tokens by each prompt
embedding, a positional-encoding-free transformer over the token set, convex
aggregation across prompts, reassembly into a planar feature map, lifting
onto the rotation group, group convolutions interleaved with per-slice
upsampling, rotation mean-pooling, and a sigmoid to the final score map.

Quarter-turn equivariance holds stage by stage: modulation acts per token,
the transformer and aggregation commute with token permutations, and the
group-convolution head commutes with the combined slice-rotate-and-shift
action.  The lift replicates the planar map across rotation slots; composed
with the first group convolution this is exactly a learnable lifting
correlation, and it is what makes the end-to-end claim hold (stacking
pre-rotated copies instead provably breaks it).
"""

from __future__ import annotations

import functools
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .encoder import PatchTokens
from .grid import GridError, Tensor, ops
from .prompts import TextTokens

DEFAULT_ROTATIONS = 8
DEFAULT_DIM = 64
DEFAULT_DEPTH = 3
DEFAULT_HEADS = 4


@dataclass
class GroupFeatureMap:
    """Feature field on the roto-translation group: [n, C, h, w]."""

    values: Tensor

    def __post_init__(self):
        if self.values.ndim != 4:
            raise GridError(f"group feature map must be rank 4, got {self.values.shape}")

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass
class Heatmap:
    """Per-pixel symmetry scores in [0, 1]."""

    scores: Tensor  # [H, W]

    def __post_init__(self):
        if self.scores.ndim != 2:
            raise GridError(f"heatmap must be rank 2, got {self.scores.shape}")
        lo, hi = float(self.scores.data.min()), float(self.scores.data.max())
        if lo < 0.0 or hi > 1.0:
            raise GridError(f"heatmap values outside [0, 1]: [{lo}, {hi}]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape


def validate_rotation_count(n: int) -> int:
    n = int(n)
    if n == 6:
        warnings.warn(
            "6 rotation slots: quarter-turn equivariance is not guaranteed because 4 does not divide 6",
            stacklevel=3,
        )
        return n
    if n < 4 or n % 4 != 0:
        raise GridError(f"rotation slot count must be a positive multiple of 4 (or 6), got {n}")
    return n


def default_channel_pipeline(dim: int) -> list[int]:
    """Head channels from the decoder width down to one score channel."""
    return [dim, max(dim // 2, 1), max(dim // 4, 1), 1]


@dataclass
class DecoderParams:
    img_w: Tensor  # [D_enc, d]
    img_b: Tensor  # [d]
    gamma_w: Tensor  # [D_txt, d]
    gamma_b: Tensor  # [d], starts at ones so modulation opens as identity
    beta_w: Tensor  # [D_txt, d]
    beta_b: Tensor  # [d]
    layers: list
    agg_logits: Tensor  # [num_prompts]
    filters: list  # psi_i: [C_{i+1}, C_i, n, 3, 3]
    head_bias: Tensor  # [1], added after the last group conv only
    n: int
    inject_positional: bool = False  # test hook: deliberately breaks equivariance

    @staticmethod
    def create(
        rng: np.random.Generator,
        enc_dim: int,
        text_dim: int,
        num_prompts: int,
        dim: int = DEFAULT_DIM,
        depth: int = DEFAULT_DEPTH,
        n_heads: int = DEFAULT_HEADS,
        n: int = DEFAULT_ROTATIONS,
        channels: list[int] | None = None,
        inject_positional: bool = False,
    ) -> "DecoderParams":
        n = validate_rotation_count(n)
        channels = list(channels) if channels is not None else default_channel_pipeline(dim)
        if channels[0] != dim or channels[-1] != 1:
            raise GridError(f"channel pipeline must run {dim} -> ... -> 1, got {channels}")
        filters = [
            nn.gaussian_param(
                rng,
                (channels[i + 1], channels[i], n, 3, 3),
                std=1.0 / (channels[i] * n * 9) ** 0.5,
            )
            for i in range(len(channels) - 1)
        ]
        return DecoderParams(
            img_w=nn.gaussian_param(rng, (enc_dim, dim)),
            img_b=nn.zeros_param(dim),
            gamma_w=nn.gaussian_param(rng, (text_dim, dim)),
            gamma_b=nn.ones_param(dim),
            beta_w=nn.gaussian_param(rng, (text_dim, dim)),
            beta_b=nn.zeros_param(dim),
            layers=[nn.AttentionLayerParams.create(rng, dim, n_heads) for _ in range(depth)],
            agg_logits=nn.zeros_param(num_prompts),
            filters=filters,
            head_bias=Tensor(np.full(1, -2.0, dtype=np.float32), requires_grad=True),
            n=n,
            inject_positional=inject_positional,
        )

    @property
    def dim(self) -> int:
        return self.img_w.shape[1]

    @property
    def channels(self) -> list[int]:
        return [self.filters[0].shape[1]] + [f.shape[0] for f in self.filters]

    def named_tensors(self, prefix: str = "decoder") -> dict[str, Tensor]:
        out = {
            f"{prefix}.img_w": self.img_w,
            f"{prefix}.img_b": self.img_b,
            f"{prefix}.gamma_w": self.gamma_w,
            f"{prefix}.gamma_b": self.gamma_b,
            f"{prefix}.beta_w": self.beta_w,
            f"{prefix}.beta_b": self.beta_b,
            f"{prefix}.agg_logits": self.agg_logits,
        }
        out.update(nn.layers_named_tensors(self.layers, prefix))
        for i, psi in enumerate(self.filters):
            out[f"{prefix}.filter{i}"] = psi
        out[f"{prefix}.head_bias"] = self.head_bias
        return out

    def replace_tensors(self, lookup, prefix: str = "decoder") -> "DecoderParams":
        return DecoderParams(
            img_w=lookup[f"{prefix}.img_w"],
            img_b=lookup[f"{prefix}.img_b"],
            gamma_w=lookup[f"{prefix}.gamma_w"],
            gamma_b=lookup[f"{prefix}.gamma_b"],
            beta_w=lookup[f"{prefix}.beta_w"],
            beta_b=lookup[f"{prefix}.beta_b"],
            layers=nn.layers_replace_tensors(self.layers, lookup, prefix),
            agg_logits=lookup[f"{prefix}.agg_logits"],
            filters=[lookup[f"{prefix}.filter{i}"] for i in range(len(self.filters))],
            head_bias=lookup[f"{prefix}.head_bias"],
            n=self.n,
            inject_positional=self.inject_positional,
        )


# ---------------------------------------------------------------------------
# modulation, mixing, aggregation
# ---------------------------------------------------------------------------


def film(z_t: Tensor, tokens: PatchTokens, params: DecoderParams) -> Tensor:
    """Modulate every projected patch feature by one prompt embedding.

    Each patch is mapped to gamma(z_t) * z_p + beta(z_t), identically and
    independently per patch; gamma and beta are linear in z_t.
    """
    m = tokens.grid_size
    proj = ops.linear(ops.reshape(tokens.tokens, (m * m, tokens.dim)), params.img_w, params.img_b)
    row = ops.reshape(z_t, (1, z_t.size))
    gamma = ops.linear(row, params.gamma_w, params.gamma_b)
    beta = ops.linear(row, params.beta_w, params.beta_b)
    out = ops.add(ops.mul(proj, ops.expand(gamma, proj.shape)), ops.expand(beta, proj.shape))
    return ops.reshape(out, (m, m, params.dim))


def film_all(text: Tensor, tokens: PatchTokens, params: DecoderParams) -> Tensor:
    """film() for every prompt at once; returns [T, M*M, d]."""
    m = tokens.grid_size
    proj = ops.linear(ops.reshape(tokens.tokens, (m * m, tokens.dim)), params.img_w, params.img_b)
    gammas = ops.linear(text, params.gamma_w, params.gamma_b)  # [T, d]
    betas = ops.linear(text, params.beta_w, params.beta_b)
    t_count = text.shape[0]
    shape = (t_count, m * m, params.dim)
    proj_b = ops.expand(ops.reshape(proj, (1, m * m, params.dim)), shape)
    gam_b = ops.expand(ops.reshape(gammas, (t_count, 1, params.dim)), shape)
    bet_b = ops.expand(ops.reshape(betas, (t_count, 1, params.dim)), shape)
    return ops.add(ops.mul(proj_b, gam_b), bet_b)


def transformer_block(x: Tensor, params: DecoderParams) -> Tensor:
    """Token mixing without positional encoding (required for equivariance).

    The `inject_positional` hook adds a fixed sinusoidal table before mixing;
    it exists solely so the certification suite can prove it would notice.
    """
    if params.inject_positional:
        table = nn.sinusoidal_table(x.shape[-2], x.shape[-1])
        x = ops.add_const_arr(x, np.broadcast_to(table, x.shape))
    return nn.transformer_stack(x, params.layers)


def aggregate(per_prompt, logits: Tensor) -> Tensor:
    """Convex combination of per-prompt token sets with softmaxed weights."""
    if isinstance(per_prompt, (list, tuple)):
        if not per_prompt:
            raise GridError("aggregate: empty prompt list")
        per_prompt = ops.stack(list(per_prompt), axis=0)
    if per_prompt.shape[0] != logits.shape[0]:
        raise GridError(
            f"aggregate: {per_prompt.shape[0]} token sets vs {logits.shape[0]} weights"
        )
    w = ops.softmax(logits, axis=-1)
    w_b = ops.expand(ops.reshape(w, (logits.shape[0], 1, 1)), per_prompt.shape)
    return ops.sum_(ops.mul(per_prompt, w_b), axis=0)


def aggregation_weights(params: DecoderParams) -> np.ndarray:
    return ops.softmax(params.agg_logits, axis=-1).data


# ---------------------------------------------------------------------------
# grid reassembly and the group head
# ---------------------------------------------------------------------------


def to_grid(tokens: Tensor) -> Tensor:
    """Place row-major tokens back on the plane: out[:, i, j] = token(i, j)."""
    count, dim = tokens.shape
    m = int(round(count**0.5))
    if m * m != count:
        raise GridError(f"token count {count} is not a perfect square")
    return ops.reshape(ops.transpose(tokens, (1, 0)), (dim, m, m))


def grid_to_tokens(grid: Tensor) -> Tensor:
    """Inverse of to_grid (test helper)."""
    dim, m, _ = grid.shape
    return ops.transpose(ops.reshape(grid, (dim, m * m)), (1, 0))


@functools.lru_cache(maxsize=64)
def _token_rot_index(m: int, d: int, k: int) -> np.ndarray:
    plane = ops._rot90_index(m, m, k)
    return (plane.reshape(m, m, 1) * d + np.arange(d, dtype=np.intp)).reshape(-1)


def token_rotate(tokens: PatchTokens, k: int) -> PatchTokens:
    """Quarter-turn permutation of the token grid (the input-side action)."""
    k = int(k) % 4
    m, d = tokens.grid_size, tokens.dim
    rotated = ops.take_flat(tokens.tokens, _token_rot_index(m, d, k), tokens.tokens.shape)
    return PatchTokens(tokens=rotated, patch_size=tokens.patch_size, image_size=tokens.image_size)


def lift(feature_map: Tensor, n: int) -> GroupFeatureMap:
    """Lift a planar map onto n rotation slots by replication.

    Replication makes a quarter turn of the plane act on the lifted field by
    the group's own slice-rotate-and-shift action, which the group
    convolutions commute with; the orientation structure is then carried by
    the rotated filter banks rather than by pre-rotated input copies.
    """
    n = validate_rotation_count(n)
    d, m, m2 = feature_map.shape
    stacked = ops.expand(ops.reshape(feature_map, (1, d, m, m2)), (n, d, m, m2))
    return GroupFeatureMap(values=stacked)


@functools.lru_cache(maxsize=128)
def _offset_roll_index(c_out: int, c_in: int, n: int, k2: int, t: int) -> np.ndarray:
    """Indices realizing W_t[co, ci, o] = psi_t[co, ci, (o - t) mod n] over flat k2 tails."""
    base = np.arange(c_out * c_in * n * k2, dtype=np.intp).reshape(c_out, c_in, n, k2)
    rolled = base[:, :, [(o - t) % n for o in range(n)], :]
    return rolled.reshape(-1)


def rotate_filters(psi: Tensor, t: int, n: int) -> Tensor:
    """Spatially rotate each 3x3 slice by t * (360/n) degrees about its center.

    Quarter turns are exact index permutations; residual angles resample
    bilinearly with zero fill, so the family stays exactly compatible with
    rotate90 and quarter-turn equivariance survives filter interpolation.
    """
    angle = t * (360.0 / n)
    quarter = int(angle // 90.0)
    residual = angle - 90.0 * quarter
    out = psi
    if residual != 0.0:
        out = ops.rotate_bilinear(out, residual, pad=0.0)
    return ops.rotate90(out, quarter)


def gconv(value, psi: Tensor):
    """Group convolution over rotation offsets and spatial offsets.

    out[t, co, x, y] = sum over t', ci, (dx, dy) of
        in[t', ci, x+dx, y+dy] * psi[co, ci, (t'-t) mod n, r_{-theta_t}(dx, dy)]
    with zero spatial padding, theta_t = t * 360/n.  Accepts and returns
    GroupFeatureMap (or a raw [n, C, h, w] tensor).
    """
    wrapped = isinstance(value, GroupFeatureMap)
    x = value.values if wrapped else value
    if x.ndim != 4 or psi.ndim != 5:
        raise GridError(f"gconv: expected [n,C,h,w] and [Co,Ci,n,kh,kw], got {x.shape}, {psi.shape}")
    n, c_in, h, w = x.shape
    c_out, c_in_f, n_f, kh, kw = psi.shape
    if c_in_f != c_in or n_f != n:
        raise GridError(f"gconv: filter bank {psi.shape} does not match input {x.shape}")
    if kh != kw or kh % 2 != 1:
        raise GridError(f"gconv: spatial support must be square and odd, got {kh}x{kw}")
    pad = kh // 2
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise GridError(f"gconv: support {kh}x{kw} larger than padded {h}x{w} input")
    k2 = kh * kw

    banks = []
    for t in range(n):
        rotated = rotate_filters(psi, t, n)
        rolled = ops.take_flat(
            ops.reshape(rotated, (c_out, c_in, n, k2)),
            _offset_roll_index(c_out, c_in, n, k2, t),
            (c_out, c_in, n, k2),
        )
        banks.append(rolled)
    weight = ops.reshape(ops.stack(banks, axis=0), (n * c_out, c_in * n * k2))

    padded = ops.pad_last2(x, pad)
    shifts = [
        ops.crop_last2(padded, a, a + h, b, b + w) for a in range(kh) for b in range(kw)
    ]
    patches = ops.stack(shifts, axis=0)  # [k2, n, c_in, h, w]
    patches = ops.transpose(patches, (2, 1, 0, 3, 4))  # [c_in, n, k2, h, w]
    patches = ops.reshape(patches, (c_in * n * k2, h * w))

    out = ops.reshape(ops.matmul(weight, patches), (n, c_out, h, w))
    return GroupFeatureMap(values=out) if wrapped else out


def group_rotate(value, k: int):
    """Quarter-turn action on a group feature map: shift slots, rotate slices."""
    wrapped = isinstance(value, GroupFeatureMap)
    x = value.values if wrapped else value
    n = x.shape[0]
    if n % 4 != 0:
        raise GridError(f"group_rotate needs 4 | n, got n={n}")
    shift = (int(k) % 4) * (n // 4)
    order = [(t - shift) % n for t in range(n)]
    perm = np.concatenate([np.arange(x.size, dtype=np.intp).reshape(n, -1)[o] for o in order])
    shifted = ops.take_flat(x, perm, x.shape)
    return GroupFeatureMap(values=ops.rotate90(shifted, k)) if wrapped else ops.rotate90(shifted, k)


def upsample_head(gmap: GroupFeatureMap, out_h: int, out_w: int, params: DecoderParams) -> Heatmap:
    """Group-conv head: three (gconv, 2x upsample) stages, rotation mean-pool,
    resize to the target size, sigmoid."""
    x = gmap.values
    last = len(params.filters) - 1
    for i, psi in enumerate(params.filters):
        x = gconv(x, psi)
        if i != last:
            x = ops.relu(x)
        else:
            bias = ops.reshape(params.head_bias, (1, x.shape[1], 1, 1))
            x = ops.add(x, ops.expand(bias, x.shape))
        x = ops.bilinear_upsample(x, 2)
    x = ops.mean(x, axis=0)  # pool the rotation axis -> [1, H', W']
    x = ops.reshape(x, (x.shape[-2], x.shape[-1]))
    x = ops.bilinear_resize(x, out_h, out_w)
    return Heatmap(scores=ops.sigmoid(x))


def decode(tokens: PatchTokens, text: TextTokens, params: DecoderParams) -> Heatmap:
    """Full decoding pass from patch tokens and prompt embeddings to a heatmap."""
    if tokens.dim != params.img_w.shape[0]:
        raise GridError(f"token dim {tokens.dim} != projection input {params.img_w.shape[0]}")
    if text.dim != params.gamma_w.shape[0]:
        raise GridError(f"text dim {text.dim} != modulation input {params.gamma_w.shape[0]}")
    if text.num_prompts != params.agg_logits.shape[0]:
        raise GridError(
            f"{text.num_prompts} prompts vs {params.agg_logits.shape[0]} aggregation weights"
        )
    mixed = transformer_block(film_all(text.embeddings, tokens, params), params)
    agg = aggregate(mixed, params.agg_logits)
    plane = to_grid(agg)
    lifted = lift(plane, params.n)
    h, w = tokens.image_size
    return upsample_head(lifted, h, w, params)


def cast_params(params, dtype):
    """Re-type every parameter tensor (used for float64 certification runs)."""
    named = params.named_tensors("p")
    lookup = {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad) for k, v in named.items()}
    return params.replace_tensors(lookup, "p")


# ---------------------------------------------------------------------------
# adjoint registrations for the decoder's forward-path operations
# ---------------------------------------------------------------------------

from .grid import register as _register  # noqa: E402


def _film_forward(z, tok, img_w, img_b, gamma_w, gamma_b, beta_w, beta_b):
    proj = ops.linear(ops.reshape(tok, (tok.shape[0] * tok.shape[1], tok.shape[2])), img_w, img_b)
    row = ops.reshape(z, (1, z.size))
    gamma = ops.linear(row, gamma_w, gamma_b)
    beta = ops.linear(row, beta_w, beta_b)
    return ops.add(ops.mul(proj, ops.expand(gamma, proj.shape)), ops.expand(beta, proj.shape))


def _film_sample(rng):
    return [
        rng.standard_normal(3),
        rng.standard_normal((3, 3, 4)),
        rng.standard_normal((4, 5)),
        rng.standard_normal(5),
        rng.standard_normal((3, 5)),
        rng.standard_normal(5),
        rng.standard_normal((3, 5)),
        rng.standard_normal(5),
    ]


def _attention_forward(x, *tensors):
    layer = nn.AttentionLayerParams(*tensors, n_heads=2)
    return nn.attention_block(x, layer)


def _attention_sample(rng):
    dim, hidden = 4, 16
    def mat(rows, cols):
        return 0.3 * rng.standard_normal((rows, cols))

    def vec(size, base=0.0):
        return base + 0.1 * rng.standard_normal(size)

    return [
        rng.standard_normal((6, dim)),
        vec(dim, 1.0),  # ln1 scale
        vec(dim),  # ln1 shift
        mat(dim, dim), vec(dim),  # q
        mat(dim, dim), vec(dim),  # k
        mat(dim, dim), vec(dim),  # v
        mat(dim, dim), vec(dim),  # out
        vec(dim, 1.0), vec(dim),  # ln2
        mat(dim, hidden), vec(hidden),  # mlp up
        mat(hidden, dim), vec(dim),  # mlp down
    ]


def _aggregate_forward(x, logits):
    return aggregate(x, logits)


def _head_forward(x, psi1, psi2):
    g = gconv(x, psi1)
    g = ops.relu(g)
    g = ops.bilinear_upsample(g, 2)
    g = gconv(g, psi2)
    g = ops.bilinear_upsample(g, 2)
    g = ops.mean(g, axis=0)
    return ops.sigmoid(ops.reshape(g, (g.shape[-2], g.shape[-1])))


_register("film", _film_forward, _film_sample)
_register("attention_block", _attention_forward, _attention_sample)
_register(
    "aggregate",
    _aggregate_forward,
    lambda rng: [rng.standard_normal((3, 6, 4)), rng.standard_normal(3)],
)
_register("to_grid", to_grid, lambda rng: [rng.standard_normal((9, 4))])
_register("lift", lambda x: lift(x, 4).values, lambda rng: [rng.standard_normal((3, 4, 4))])
_register(
    "token_rotate_grid",
    lambda x: ops.take_flat(x, _token_rot_index(4, 3, 1), x.shape),
    lambda rng: [rng.standard_normal((4, 4, 3))],
)
_register(
    "gconv",
    lambda x, psi: gconv(x, psi),
    lambda rng: [0.5 * rng.standard_normal((4, 2, 5, 5)), 0.5 * rng.standard_normal((3, 2, 4, 3, 3))],
)
_register(
    "gconv_eight_slots",
    lambda x, psi: gconv(x, psi),
    lambda rng: [0.5 * rng.standard_normal((8, 2, 4, 4)), 0.5 * rng.standard_normal((2, 2, 8, 3, 3))],
)
_register(
    "upsample_head",
    _head_forward,
    lambda rng: [
        0.5 * rng.standard_normal((4, 3, 4, 4)),
        0.4 * rng.standard_normal((2, 3, 4, 3, 3)),
        0.4 * rng.standard_normal((1, 2, 4, 3, 3)),
    ],
)
