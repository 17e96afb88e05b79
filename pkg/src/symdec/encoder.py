"""Patch-token production.

Two paths produce the token grid consumed by the decoder: a small trainable
patch transformer for self-contained training, and a loader for token tensors
exported by an external backbone.  Both yield the same PatchTokens carrier.
Only the spatial patch grid is used; no class-style summary token exists
anywhere in this pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .grid import GridError, NumericError, Tensor, csym, ops

DEFAULT_DEPTH = 2
DEFAULT_DIM = 32
DEFAULT_HEADS = 4


@dataclass
class PatchTokens:
    """M x M grid of per-patch feature vectors plus its source geometry."""

    tokens: Tensor  # [M, M, D]
    patch_size: int
    image_size: tuple[int, int]

    def __post_init__(self):
        if self.tokens.ndim != 3 or self.tokens.shape[0] != self.tokens.shape[1]:
            raise GridError(f"token grid must be square rank-3, got {self.tokens.shape}")
        h, w = self.image_size
        expected = min(h, w) // self.patch_size
        if self.tokens.shape[0] != expected:
            raise GridError(
                f"grid size {self.tokens.shape[0]} inconsistent with image {h}x{w} "
                f"at patch size {self.patch_size} (expected {expected})"
            )
        if not self.tokens.is_finite():
            raise NumericError("token grid contains non-finite values")

    @property
    def grid_size(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]


@dataclass
class EncoderParams:
    patch_w: Tensor  # [3*P*P, D]
    patch_b: Tensor  # [D]
    pos: Tensor  # [M*M, D]
    layers: list
    patch_size: int
    grid_size: int

    @staticmethod
    def create(
        rng: np.random.Generator,
        patch_size: int,
        grid_size: int,
        dim: int = DEFAULT_DIM,
        depth: int = DEFAULT_DEPTH,
        n_heads: int = DEFAULT_HEADS,
    ) -> "EncoderParams":
        return EncoderParams(
            patch_w=nn.gaussian_param(rng, (3 * patch_size * patch_size, dim)),
            patch_b=nn.zeros_param(dim),
            pos=nn.gaussian_param(rng, (grid_size * grid_size, dim)),
            layers=[nn.AttentionLayerParams.create(rng, dim, n_heads) for _ in range(depth)],
            patch_size=patch_size,
            grid_size=grid_size,
        )

    @property
    def dim(self) -> int:
        return self.patch_w.shape[1]

    def named_tensors(self, prefix: str = "encoder") -> dict[str, Tensor]:
        out = {
            f"{prefix}.patch_w": self.patch_w,
            f"{prefix}.patch_b": self.patch_b,
            f"{prefix}.pos": self.pos,
        }
        out.update(nn.layers_named_tensors(self.layers, prefix))
        return out

    def replace_tensors(self, lookup, prefix: str = "encoder") -> "EncoderParams":
        return EncoderParams(
            patch_w=lookup[f"{prefix}.patch_w"],
            patch_b=lookup[f"{prefix}.patch_b"],
            pos=lookup[f"{prefix}.pos"],
            layers=nn.layers_replace_tensors(self.layers, lookup, prefix),
            patch_size=self.patch_size,
            grid_size=self.grid_size,
        )


def patchify(image: Tensor, patch_size: int) -> Tensor:
    """Split a square image into non-overlapping flattened patches.

    Patch (i, j) covers pixel rows i*P .. (i+1)*P-1 and columns j*P ..
    (j+1)*P-1; trailing rows/columns that do not fill a patch are dropped.
    Output is [M, M, 3*P*P] with each patch flattened channel-major.
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise GridError(f"expected [3, H, W] image, got {image.shape}")
    _, h, w = image.shape
    if h != w:
        raise GridError(f"image must be square at encode time, got {h}x{w}")
    m = h // patch_size
    if m < 1:
        raise GridError(f"image {h}x{w} smaller than one {patch_size}px patch")
    used = m * patch_size
    cropped = ops.crop_last2(image, 0, used, 0, used)
    x = ops.reshape(cropped, (3, m, patch_size, m, patch_size))
    x = ops.transpose(x, (1, 3, 0, 2, 4))  # [M, M, 3, P, P]
    return ops.reshape(x, (m, m, 3 * patch_size * patch_size))


def unpatchify(patches: Tensor, patch_size: int) -> Tensor:
    """Inverse of patchify over the cropped region (test helper)."""
    m = patches.shape[0]
    x = ops.reshape(patches, (m, m, 3, patch_size, patch_size))
    x = ops.transpose(x, (2, 0, 3, 1, 4))
    return ops.reshape(x, (3, m * patch_size, m * patch_size))


def encode(image: Tensor, params: EncoderParams) -> PatchTokens:
    """Patchify, project, add positional embeddings, run the transformer."""
    lo, hi = float(image.data.min()), float(image.data.max())
    if lo < 0.0 or hi > 1.0:
        raise GridError(f"image values must lie in [0, 1], got [{lo}, {hi}]")
    raw = patchify(image, params.patch_size)
    m = raw.shape[0]
    if m != params.grid_size:
        raise GridError(f"image yields {m}x{m} patches, encoder built for {params.grid_size}")
    tokens = ops.linear(ops.reshape(raw, (m * m, raw.shape[2])), params.patch_w, params.patch_b)
    tokens = ops.add(tokens, params.pos)
    tokens = nn.transformer_stack(tokens, params.layers)
    if not tokens.is_finite():
        raise NumericError("encoder produced non-finite tokens")
    return PatchTokens(
        tokens=ops.reshape(tokens, (m, m, params.dim)),
        patch_size=params.patch_size,
        image_size=(image.shape[1], image.shape[2]),
    )


def mean_pool_tokens(image: Tensor, patch_size: int, dim: int) -> PatchTokens:
    """Rotation-robust tokenizer: per-patch channel means, tiled to `dim`.

    Averaging each patch is invariant to quarter-turn rotations of the patch
    content, so a quarter turn of the image permutes these tokens exactly.
    Used by the certifiably equivariant full-image path.
    """
    _, h, w = image.shape
    if h != w or h % patch_size != 0:
        raise GridError("mean-pool tokenizer needs a square image divisible by the patch size")
    raw = patchify(image, patch_size)  # [M, M, 3*P*P]
    m = raw.shape[0]
    per_channel = ops.mean(ops.reshape(raw, (m, m, 3, patch_size * patch_size)), axis=3)
    reps = (dim + 2) // 3
    tiled = ops.stack([per_channel] * reps, axis=2)  # [M, M, reps, 3]
    tokens = ops.crop_last2(ops.reshape(tiled, (m, m, reps * 3, 1)), 0, dim, 0, 1)
    return PatchTokens(
        tokens=ops.reshape(tokens, (m, m, dim)),
        patch_size=patch_size,
        image_size=(h, w),
    )


def load_tokens(path) -> PatchTokens:
    """Read a rank-3 CSYM token grid plus its geometry sidecar."""
    arr = csym.read_tensor(path)
    if arr.ndim != 3:
        raise csym.CsymFormatError(f"{path}: token tensor must be rank 3, got rank {arr.ndim}")
    meta = csym.read_sidecar(path)
    for key in ("patch_size", "image_height", "image_width"):
        if key not in meta:
            raise csym.CsymFormatError(f"{path}: sidecar missing field {key!r}")
    return PatchTokens(
        tokens=Tensor(arr),
        patch_size=int(meta["patch_size"]),
        image_size=(int(meta["image_height"]), int(meta["image_width"])),
    )


def save_tokens(path, tokens: PatchTokens) -> None:
    csym.write_tensor(path, tokens.tokens.data)
    csym.write_sidecar(
        path,
        {
            "patch_size": tokens.patch_size,
            "image_height": tokens.image_size[0],
            "image_width": tokens.image_size[1],
        },
    )
