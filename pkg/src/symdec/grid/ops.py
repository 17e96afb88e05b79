"""Differentiable grid operations.

Primitives carry an explicit vector-Jacobian product; everything else in the
model (attention, group convolution, interpolation, losses) is composed from
them, so the pullback of any composite falls out of the graph.  Binary
elementwise primitives require exactly matching shapes; broadcasting only
happens through the explicit `expand`.

Spatial operations act on the last two axes and accept arbitrary leading axes.
Index maps for rotations, resampling and patch extraction are precomputed as
plain integer/float arrays and cached per geometry.
"""

from __future__ import annotations

import functools
import math

import numpy as np

from .tensor import GridError, Tensor, as_tensor

# ---------------------------------------------------------------------------
# elementwise / structural primitives
# ---------------------------------------------------------------------------


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise GridError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Tensor.result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return Tensor.result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return Tensor.result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    out = a.data / b.data
    return Tensor.result(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def add_const(a: Tensor, c: float) -> Tensor:
    return Tensor.result(a.data + a.dtype.type(c), (a,), lambda g: (g,))


def mul_const(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return Tensor.result(a.data * c, (a,), lambda g: (g * c,))


def add_const_arr(a: Tensor, arr: np.ndarray) -> Tensor:
    """Add a non-differentiated constant field of the same shape."""
    return Tensor.result(a.data + arr.astype(a.dtype), (a,), lambda g: (g,))


def mul_const_arr(a: Tensor, arr: np.ndarray) -> Tensor:
    """Multiply by a non-differentiated constant field of the same shape."""
    carr = np.asarray(arr, dtype=a.dtype)
    return Tensor.result(a.data * carr, (a,), lambda g: (g * carr,))


def expand(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Broadcast `a` to `shape`; the pullback sums over broadcast axes."""
    shape = tuple(int(s) for s in shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as err:
        raise GridError(f"expand: cannot broadcast {a.shape} to {shape}") from err
    lead = len(shape) - a.ndim
    summed_axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(a.shape) if s == 1 and shape[i + lead] != 1
    )

    def vjp(g):
        ga = g.sum(axis=summed_axes, keepdims=False) if summed_axes else g
        return (ga.reshape(a.shape),)

    return Tensor.result(np.ascontiguousarray(out), (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size and -1 not in shape:
        raise GridError(f"reshape: size mismatch {a.shape} -> {shape}")
    return Tensor.result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)
    return Tensor.result(
        np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),)
    )


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise GridError("stack: empty input")
    base = tensors[0].shape
    for t in tensors[1:]:
        _same_shape(tensors[0], t, "stack")
    data = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(p.reshape(base) for p in parts)

    return Tensor.result(data, tuple(tensors), vjp)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g_kept = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_kept, a.shape).copy(),)

    return Tensor.result(data, (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul_const(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise GridError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        return (g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g)

    return Tensor.result(data, (a, b), vjp)


# ---------------------------------------------------------------------------
# pointwise nonlinear primitives
# ---------------------------------------------------------------------------


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)
    return Tensor.result(out, (a,), lambda g: (g / a.data,))


def power(a: Tensor, p: float) -> Tensor:
    out = a.data**p
    return Tensor.result(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor.result(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor.result(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor.result(out, (a,), lambda g: (g * (1.0 - out * out),))


def gelu(a: Tensor) -> Tensor:
    """Smooth GELU (tanh form); kink-free so finite differences stay clean."""
    c = math.sqrt(2.0 / math.pi)
    cube = mul(mul(a, a), a)
    inner = mul_const(add(a, mul_const(cube, 0.044715)), c)
    return mul(mul_const(a, 0.5), add_const(tanh(inner), 1.0))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    mask = (a.data > lo) & (a.data < hi)
    return Tensor.result(out, (a,), lambda g: (g * mask,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Fused softmax; only the output is retained for the pullback."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Tensor.result(out, (a,), vjp)


# ---------------------------------------------------------------------------
# gather / pad / crop
# ---------------------------------------------------------------------------


def take_flat(a: Tensor, idx: np.ndarray, out_shape: tuple[int, ...]) -> Tensor:
    """Gather from the flattened input; pullback scatter-adds."""
    flat_idx = idx.reshape(-1)
    data = a.data.reshape(-1)[flat_idx].reshape(out_shape)
    size = a.size

    def vjp(g):
        acc = np.bincount(flat_idx, weights=g.reshape(-1).astype(np.float64), minlength=size)
        return (acc.reshape(a.shape).astype(a.dtype),)

    return Tensor.result(data, (a,), vjp)


def pad_last2(a: Tensor, pad: int) -> Tensor:
    if pad < 0:
        raise GridError("pad_last2: negative pad")
    width = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    sl = (slice(None),) * (a.ndim - 2) + (slice(pad, a.shape[-2] + pad), slice(pad, a.shape[-1] + pad))
    return Tensor.result(np.pad(a.data, width), (a,), lambda g: (np.ascontiguousarray(g[sl]),))


def crop_last2(a: Tensor, r0: int, r1: int, c0: int, c1: int) -> Tensor:
    if not (0 <= r0 <= r1 <= a.shape[-2] and 0 <= c0 <= c1 <= a.shape[-1]):
        raise GridError(f"crop_last2: window ({r0}:{r1},{c0}:{c1}) outside {a.shape}")
    sl = (slice(None),) * (a.ndim - 2) + (slice(r0, r1), slice(c0, c1))

    def vjp(g):
        out = np.zeros(a.shape, dtype=a.dtype)
        out[sl] = g
        return (out,)

    return Tensor.result(np.ascontiguousarray(a.data[sl]), (a,), vjp)


# ---------------------------------------------------------------------------
# planar rotations and resampling
# ---------------------------------------------------------------------------


class RotationAngle:
    """Planar rotation angle, normalized to [0, 360) degrees.

    `exact` is true iff the angle is a multiple of 90 degrees, in which case
    the rotation is realized as an index permutation with no interpolation.
    """

    __slots__ = ("degrees", "exact")

    def __init__(self, degrees: float):
        self.degrees = float(degrees) % 360.0
        self.exact = self.degrees % 90.0 == 0.0

    def __repr__(self) -> str:
        return f"RotationAngle({self.degrees}, exact={self.exact})"


@functools.lru_cache(maxsize=256)
def _rot90_index(h: int, w: int, k: int) -> np.ndarray:
    """Index map realizing out[x, y] = in[x', y'] with (x', y') = r_{-k*90deg}(x, y)."""
    base = np.arange(h * w, dtype=np.intp).reshape(h, w)
    return np.ascontiguousarray(np.rot90(base, k))


def _spatial_gather(a: Tensor, plane_idx: np.ndarray, out_hw: tuple[int, int]) -> Tensor:
    lead = int(np.prod(a.shape[:-2], dtype=np.int64)) if a.ndim > 2 else 1
    hw = a.shape[-2] * a.shape[-1]
    idx = (np.arange(lead, dtype=np.intp)[:, None] * hw + plane_idx.reshape(1, -1)).reshape(-1)
    out_shape = a.shape[:-2] + out_hw
    return take_flat(a, idx, out_shape)


def rotate90(grid: Tensor, k: int) -> Tensor:
    """Exact quarter-turn rotation of a square grid about its center.

    The coordinate action matches the clockwise map used everywhere in this
    package: out[..., x, y] = in[..., x', y'] with x' = y, y' = H-1-x for one
    quarter turn.  Pure index permutation, bit-exact.
    """
    h, w = grid.shape[-2], grid.shape[-1]
    if h != w:
        raise GridError(f"rotate90: grid must be square, got {h}x{w}")
    k = int(k) % 4
    if k == 0:
        return Tensor.result(grid.data.copy(), (grid,), lambda g: (g,))
    return _spatial_gather(grid, _rot90_index(h, w, k), (h, w))


def rot90_array(arr: np.ndarray, k: int) -> np.ndarray:
    """rotate90 for plain numpy arrays (same orientation convention)."""
    if arr.shape[-2] != arr.shape[-1]:
        raise GridError("rot90_array: grid must be square")
    return np.ascontiguousarray(np.rot90(arr, int(k) % 4, axes=(-2, -1)))


@functools.lru_cache(maxsize=256)
def _bilinear_rotation_maps(h: int, w: int, degrees: float):
    """Corner indices, weights, and out-of-bounds fill fraction for a rotation
    by `degrees` in (0, 90) about the continuous grid center."""
    theta = math.radians(degrees)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cx, cy = (h - 1) / 2.0, (w - 1) / 2.0
    x, y = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    u, v = x - cx, y - cy
    # source position under r_{-theta}
    sx = cos_t * u + sin_t * v + cx
    sy = -sin_t * u + cos_t * v + cy
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    fx, fy = sx - x0, sy - y0
    corners = []
    fill = np.zeros((h, w), dtype=np.float64)
    for dx, wx in ((0, 1.0 - fx), (1, fx)):
        for dy, wy in ((0, 1.0 - fy), (1, fy)):
            xi, yi = x0 + dx, y0 + dy
            inside = (xi >= 0) & (xi < h) & (yi >= 0) & (yi < w)
            weight = wx * wy
            fill += weight * (~inside)
            flat = np.clip(xi, 0, h - 1) * w + np.clip(yi, 0, w - 1)
            corners.append((flat.astype(np.intp), np.where(inside, weight, 0.0)))
    return corners, fill


def rotate_bilinear(grid: Tensor, angle, pad: float = 0.0) -> Tensor:
    """Rotation by an arbitrary angle about the grid center.

    The angle is split into an exact quarter-turn part and a residual in
    [0, 90); the residual is resampled bilinearly, with samples falling
    outside the grid reading `pad`.  Multiples of 90 degrees therefore equal
    rotate90 exactly.
    """
    degrees = float(getattr(angle, "degrees", angle)) % 360.0
    h, w = grid.shape[-2], grid.shape[-1]
    if h != w:
        raise GridError(f"rotate_bilinear: grid must be square, got {h}x{w}")
    quarter = int(degrees // 90.0)
    residual = degrees - 90.0 * quarter
    out = rotate90(grid, quarter)
    if residual == 0.0:
        return out
    corners, fill = _bilinear_rotation_maps(h, w, residual)
    acc = None
    for flat, weight in corners:
        term = mul_const_arr(_spatial_gather(out, flat, (h, w)), _expand_plane(weight, out.shape))
        acc = term if acc is None else add(acc, term)
    if pad != 0.0:
        acc = add_const_arr(acc, _expand_plane(fill * pad, out.shape))
    return acc


def _expand_plane(plane: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return np.broadcast_to(plane, shape)


@functools.lru_cache(maxsize=256)
def _resize_axis_map(n_in: int, n_out: int):
    """Corners-aligned source positions: output corners sample input corners."""
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out, dtype=np.float64)
    else:
        pos = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
    i0 = np.floor(pos).astype(np.intp)
    frac = pos - i0
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, frac


def bilinear_resize(grid: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize with corners-aligned sampling.

    Interpolation is evaluated in lerp form, a + f*(b - a), so constant grids
    resize to the same constant bit-exactly and integer sample positions read
    the source sample untouched.
    """
    h, w = grid.shape[-2], grid.shape[-1]
    if out_h < 1 or out_w < 1:
        raise GridError("bilinear_resize: output size must be positive")
    r0, r1, rf = _resize_axis_map(h, out_h)
    c0, c1, cf = _resize_axis_map(w, out_w)
    lead = grid.shape[:-2]
    out_shape = lead + (out_h, out_w)

    def corner(ri, ci):
        flat = (ri[:, None] * w + ci[None, :]).astype(np.intp)
        return _spatial_gather(grid, flat, (out_h, out_w))

    rf2 = _expand_plane(rf[:, None], out_shape)
    cf2 = _expand_plane(cf[None, :], out_shape)
    x00, x01 = corner(r0, c0), corner(r0, c1)
    x10, x11 = corner(r1, c0), corner(r1, c1)
    top = add(x00, mul_const_arr(sub(x01, x00), cf2))
    bot = add(x10, mul_const_arr(sub(x11, x10), cf2))
    return add(top, mul_const_arr(sub(bot, top), rf2))


def bilinear_upsample(grid: Tensor, factor: int) -> Tensor:
    """Integer-factor upsampling, implemented as a corners-aligned resize."""
    factor = int(factor)
    if factor < 1:
        raise GridError("bilinear_upsample: factor must be >= 1")
    if factor == 1:
        return Tensor.result(grid.data.copy(), (grid,), lambda g: (g,))
    return bilinear_resize(grid, grid.shape[-2] * factor, grid.shape[-1] * factor)


# ---------------------------------------------------------------------------
# affine / normalization composites
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight + bias over the last axis, any leading axes."""
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    out = matmul(flat, weight)
    if bias is not None:
        out = add(out, expand(bias, out.shape))
    if x.ndim != 2:
        out = reshape(out, lead + (weight.shape[-1],))
    return out


def normalize_tokens(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Zero-mean unit-variance normalization over the last axis (pre-affine)."""
    mu = mean(x, axis=-1, keepdims=True)
    centered = sub(x, expand(mu, x.shape))
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(add_const(var, eps), -0.5)
    return mul(centered, expand(inv, x.shape))


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-6) -> Tensor:
    normed = normalize_tokens(x, eps)
    return add(mul(normed, expand(scale, x.shape)), expand(shift, x.shape))
