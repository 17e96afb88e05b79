"""Shared transformer building blocks for the encoder and decoder.

Blocks are pre-norm (attention and MLP each wrapped in residuals) and add no
positional information themselves, so a stack is exactly equivariant to
permutations of the token axis.  Positional embeddings, where wanted, are the
caller's business.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .grid import Tensor
from .grid import ops

INIT_STD = 0.02


def gaussian_param(rng: np.random.Generator, shape, std: float = INIT_STD, dtype=np.float32) -> Tensor:
    return Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


@dataclass
class AttentionLayerParams:
    """One pre-norm attention + MLP block."""

    ln1_scale: Tensor
    ln1_shift: Tensor
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_out: Tensor
    b_out: Tensor
    ln2_scale: Tensor
    ln2_shift: Tensor
    w_up: Tensor
    b_up: Tensor
    w_down: Tensor
    b_down: Tensor
    n_heads: int

    @staticmethod
    def create(rng: np.random.Generator, dim: int, n_heads: int, mlp_ratio: int = 4) -> "AttentionLayerParams":
        if dim % n_heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {n_heads}")
        hidden = mlp_ratio * dim
        return AttentionLayerParams(
            ln1_scale=ones_param(dim),
            ln1_shift=zeros_param(dim),
            w_q=gaussian_param(rng, (dim, dim)),
            b_q=zeros_param(dim),
            w_k=gaussian_param(rng, (dim, dim)),
            b_k=zeros_param(dim),
            w_v=gaussian_param(rng, (dim, dim)),
            b_v=zeros_param(dim),
            w_out=gaussian_param(rng, (dim, dim)),
            b_out=zeros_param(dim),
            ln2_scale=ones_param(dim),
            ln2_shift=zeros_param(dim),
            w_up=gaussian_param(rng, (dim, hidden)),
            b_up=zeros_param(hidden),
            w_down=gaussian_param(rng, (hidden, dim)),
            b_down=zeros_param(dim),
            n_heads=n_heads,
        )

    def named_tensors(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Tensor):
                out[f"{prefix}.{f.name}"] = value
        return out

    def replace_tensors(self, lookup, prefix: str) -> "AttentionLayerParams":
        kwargs = {"n_heads": self.n_heads}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Tensor):
                kwargs[f.name] = lookup[f"{prefix}.{f.name}"]
        return AttentionLayerParams(**kwargs)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, n, d = x.shape
    head_dim = d // n_heads
    x = ops.reshape(x, (*lead, n, n_heads, head_dim))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return ops.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, head_dim = x.shape
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    x = ops.transpose(x, axes)
    return ops.reshape(x, (*lead, n, h * head_dim))


def self_attention(x: Tensor, p: AttentionLayerParams) -> Tensor:
    """Multi-headed self-attention over the second-to-last axis."""
    q = _split_heads(ops.linear(x, p.w_q, p.b_q), p.n_heads)
    k = _split_heads(ops.linear(x, p.w_k, p.b_k), p.n_heads)
    v = _split_heads(ops.linear(x, p.w_v, p.b_v), p.n_heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = ops.mul_const(ops.matmul(q, ops.transpose(k, _swap_last2(k.ndim))), scale)
    att = ops.softmax(scores, axis=-1)
    mixed = _merge_heads(ops.matmul(att, v))
    return ops.linear(mixed, p.w_out, p.b_out)


def _swap_last2(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def mlp(x: Tensor, p: AttentionLayerParams) -> Tensor:
    return ops.linear(ops.gelu(ops.linear(x, p.w_up, p.b_up)), p.w_down, p.b_down)


def attention_block(x: Tensor, p: AttentionLayerParams) -> Tensor:
    """Pre-norm transformer block: x + attn(LN(x)), then x + mlp(LN(x))."""
    x = ops.add(x, self_attention(ops.layer_norm(x, p.ln1_scale, p.ln1_shift), p))
    x = ops.add(x, mlp(ops.layer_norm(x, p.ln2_scale, p.ln2_shift), p))
    return x


def transformer_stack(x: Tensor, layers) -> Tensor:
    for layer in layers:
        x = attention_block(x, layer)
    return x


def layers_named_tensors(layers, prefix: str) -> dict[str, Tensor]:
    out = {}
    for i, layer in enumerate(layers):
        out.update(layer.named_tensors(f"{prefix}.layer{i}"))
    return out


def layers_replace_tensors(layers, lookup, prefix: str):
    return [layer.replace_tensors(lookup, f"{prefix}.layer{i}") for i, layer in enumerate(layers)]


def sinusoidal_table(n: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal embeddings; used only by the deliberate equivariance-break hook."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * (idx // 2) / dim)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(np.float32)
