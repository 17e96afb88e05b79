"""Independent reference implementations used as test oracles.

These deliberately avoid the package's own operator machinery: filter
rotation is evaluated by direct trigonometric sampling, spatial shifts by
padded array indexing, and the group sum by explicit loops over rotation
slots and filter offsets.
"""

import math

import numpy as np


def rotated_filter_slices(psi: np.ndarray, theta_deg: float) -> np.ndarray:
    """psi[..., 3, 3] spatially rotated so out[a, b] = psi[r_{-theta}(a, b)],
    sampled bilinearly about the filter center, zero outside the support."""
    theta = math.radians(theta_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    kh, kw = psi.shape[-2:]
    c = (kh - 1) / 2.0
    out = np.zeros_like(psi)
    for a in range(kh):
        for b in range(kw):
            su = cos_t * (a - c) + sin_t * (b - c) + c
            sv = -sin_t * (a - c) + cos_t * (b - c) + c
            i0, j0 = math.floor(su), math.floor(sv)
            fu, fv = su - i0, sv - j0
            acc = 0.0
            for di, wu in ((0, 1.0 - fu), (1, fu)):
                for dj, wv in ((0, 1.0 - fv), (1, fv)):
                    ii, jj = i0 + di, j0 + dj
                    if 0 <= ii < kh and 0 <= jj < kw and wu * wv != 0.0:
                        acc = acc + wu * wv * psi[..., ii, jj]
            out[..., a, b] = acc
    return out


def gconv_reference(x: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """Direct evaluation of the group convolution.

    out[t, co, p, q] = sum over t', ci, (dx, dy) of
        x[t', ci, p+dx, q+dy] * psi[co, ci, (t'-t) mod n, r_{-theta_t}(dx, dy)]
    with zero padding and theta_t = t * 360 / n.
    """
    n, c_in, h, w = x.shape
    c_out, _, _, kh, kw = psi.shape
    pad = kh // 2
    padded = np.zeros((n, c_in, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    padded[:, :, pad : pad + h, pad : pad + w] = x
    out = np.zeros((n, c_out, h, w), dtype=x.dtype)
    for t in range(n):
        rotated = rotated_filter_slices(psi, t * 360.0 / n)
        for tp in range(n):
            bank = rotated[:, :, (tp - t) % n]  # [c_out, c_in, kh, kw]
            for a in range(kh):
                for b in range(kw):
                    window = padded[tp, :, a : a + h, b : b + w]  # [c_in, h, w]
                    out[t] += np.einsum("oc,chw->ohw", bank[:, :, a, b], window)
    return out


def gconv_reference_scalar(x: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """Fully scalar triple-loop evaluation; quarter-turn groups only."""
    n, c_in, h, w = x.shape
    c_out, _, _, kh, kw = psi.shape
    assert n == 4 and kh == kw == 3
    out = np.zeros((n, c_out, h, w), dtype=x.dtype)
    for t in range(n):
        rotated = rotated_filter_slices(psi, t * 90.0)
        for co in range(c_out):
            for p in range(h):
                for q in range(w):
                    acc = 0.0
                    for tp in range(n):
                        for ci in range(c_in):
                            for dx in (-1, 0, 1):
                                for dy in (-1, 0, 1):
                                    xx, yy = p + dx, q + dy
                                    if 0 <= xx < h and 0 <= yy < w:
                                        acc += x[tp, ci, xx, yy] * rotated[co, ci, (tp - t) % n, dx + 1, dy + 1]
                    out[t, co, p, q] = acc
    return out


def group_action_reference(x: np.ndarray, k: int) -> np.ndarray:
    """Quarter-turn action on [n, C, h, w]: shift slots by k*n/4, rotate slices."""
    n = x.shape[0]
    shift = (k % 4) * (n // 4)
    shifted = np.stack([x[(t - shift) % n] for t in range(n)])
    return np.rot90(shifted, k % 4, axes=(-2, -1)).copy()
