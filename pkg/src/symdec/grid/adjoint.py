"""Differentiation contract: adjoint rules and finite-difference certification.

Every operation used on the model's forward path registers an AdjointRule.
`check_adjoint` certifies a rule by comparing the analytic pullback against
central finite differences of a random scalar projection of the output, in
float64.  The reported error for each input tensor is normalized by the
largest gradient magnitude seen in that tensor, so tensors mixing large and
tiny entries do not produce spurious failures on the tiny ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, no_grad

FD_STEP = 1e-4


class AdjointError(ArithmeticError):
    """Raised when an adjoint check cannot be evaluated (non-finite values)."""


@dataclass(frozen=True)
class AdjointRule:
    """Pairing of a forward operation with its cotangent pullback.

    `backward` maps (inputs, output cotangent) to one cotangent per input,
    each shaped like its input.  When omitted it is derived from the graph,
    which is exactly what the finite-difference check is certifying.
    """

    name: str
    forward: Callable[..., Tensor]
    backward: Callable[[Sequence[Tensor], np.ndarray], list[np.ndarray]] | None = None
    sample_inputs: Callable[[np.random.Generator], list[np.ndarray]] | None = None

    def pullback(self, inputs: Sequence[Tensor], cotangent: np.ndarray) -> list[np.ndarray]:
        if self.backward is not None:
            return list(self.backward(inputs, cotangent))
        leaves = [Tensor(x.data, requires_grad=True) for x in inputs]
        out = self.forward(*leaves)
        out.backward(cotangent)
        grads = []
        for leaf in leaves:
            g = leaf.grad if leaf.grad is not None else np.zeros(leaf.shape, dtype=leaf.dtype)
            if g.shape != leaf.shape:
                raise AdjointError(f"{self.name}: adjoint shape {g.shape} != input {leaf.shape}")
            grads.append(g)
        return grads


_REGISTRY: dict[str, AdjointRule] = {}


def register(name: str, forward, sample_inputs) -> AdjointRule:
    rule = AdjointRule(name=name, forward=forward, sample_inputs=sample_inputs)
    _REGISTRY[name] = rule
    return rule


def registry() -> dict[str, AdjointRule]:
    return dict(_REGISTRY)


def check_adjoint(
    rule: AdjointRule,
    inputs: Sequence,
    seed: int = 0,
    step: float = FD_STEP,
    max_entries: int | None = None,
) -> float:
    """Maximum normalized deviation between analytic and numeric cotangents.

    Evaluates in float64.  The scalar probe is sum(u * f(x)) for a fixed
    standard-normal u; numeric cotangents use central differences with the
    given step.  `max_entries` caps how many coordinates per input are probed
    (seeded choice) for large inputs.
    """
    rng = np.random.default_rng(seed)
    xs = [Tensor(np.asarray(getattr(x, "data", x), dtype=np.float64)) for x in inputs]
    for i, x in enumerate(xs):
        if not x.is_finite():
            raise AdjointError(f"{rule.name}: non-finite input {i}")

    with no_grad():
        y0 = rule.forward(*xs)
    if not y0.is_finite():
        raise AdjointError(f"{rule.name}: non-finite forward output")
    u = rng.standard_normal(y0.shape)

    analytic = rule.pullback(xs, u)

    def probe(args) -> float:
        with no_grad():
            out = rule.forward(*args)
        if not out.is_finite():
            raise AdjointError(f"{rule.name}: non-finite value during finite differences")
        return float(np.sum(u * out.data))

    worst = 0.0
    for i, x in enumerate(xs):
        a = analytic[i]
        coords = np.arange(x.size)
        if max_entries is not None and x.size > max_entries:
            coords = rng.choice(x.size, size=max_entries, replace=False)
        numeric = np.zeros(len(coords))
        for slot, j in enumerate(coords):
            base = x.data.reshape(-1)
            bumped = base.copy()
            bumped[j] = base[j] + step
            plus = probe(xs[:i] + [Tensor(bumped.reshape(x.shape))] + xs[i + 1 :])
            bumped[j] = base[j] - step
            minus = probe(xs[:i] + [Tensor(bumped.reshape(x.shape))] + xs[i + 1 :])
            numeric[slot] = (plus - minus) / (2.0 * step)
        a_sel = a.reshape(-1)[coords]
        scale = max(float(np.max(np.abs(a_sel), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
        err = float(np.max(np.abs(a_sel - numeric), initial=0.0)) / scale
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# registrations for the core grid operations
# ---------------------------------------------------------------------------


def _pair(rng):
    return [rng.standard_normal((3, 5)), rng.standard_normal((3, 5))]


def _one(rng):
    return [rng.standard_normal((4, 6))]


def _positive(rng):
    return [np.abs(rng.standard_normal((4, 6))) + 0.5]


register("add", ops.add, _pair)
register("sub", ops.sub, _pair)
register("mul", ops.mul, _pair)
register("div", lambda a, b: ops.div(a, ops.add_const(ops.mul(b, b), 0.5)), _pair)
register("add_const", lambda a: ops.add_const(a, 1.7), _one)
register("mul_const", lambda a: ops.mul_const(a, -2.5), _one)
register("expand", lambda a: ops.expand(a, (5, 4, 6)), _one)
register("reshape", lambda a: ops.reshape(a, (8, 3)), _one)
register("transpose", lambda a: ops.transpose(a, (1, 0)), _one)
register("stack", lambda a, b: ops.stack([a, b], axis=1), _pair)
register("sum", lambda a: ops.sum_(a, axis=1), _one)
register("mean", lambda a: ops.mean(a, axis=0), _one)
register("matmul", lambda a, b: ops.matmul(a, ops.transpose(b, (1, 0))), _pair)
register("exp", ops.exp, _one)
register("log", ops.log, _positive)
register("power", lambda a: ops.power(a, 1.5), _positive)
register("relu", ops.relu, _one)
register("sigmoid", ops.sigmoid, _one)
register("tanh", ops.tanh, _one)
register("gelu", ops.gelu, _one)
register("clip", lambda a: ops.clip(a, -0.9, 0.9), _one)
register("softmax", lambda a: ops.softmax(a, axis=-1), _one)
register("take_flat", lambda a: ops.take_flat(a, np.arange(24).reshape(4, 6)[::-1].copy(), (4, 6)), _one)
register("pad_last2", lambda a: ops.pad_last2(a, 2), _one)
register("crop_last2", lambda a: ops.crop_last2(a, 1, 3, 2, 5), _one)
register("rotate90", lambda a: ops.rotate90(a, 1), lambda rng: [rng.standard_normal((2, 5, 5))])
register(
    "rotate_bilinear",
    lambda a: ops.rotate_bilinear(a, 33.5, pad=0.25),
    lambda rng: [rng.standard_normal((2, 5, 5))],
)
register(
    "bilinear_upsample",
    lambda a: ops.bilinear_upsample(a, 2),
    lambda rng: [rng.standard_normal((2, 4, 4))],
)
register(
    "bilinear_resize",
    lambda a: ops.bilinear_resize(a, 7, 5),
    lambda rng: [rng.standard_normal((2, 4, 4))],
)
register(
    "linear",
    lambda x, w, b: ops.linear(x, w, b),
    lambda rng: [rng.standard_normal((7, 4)), rng.standard_normal((4, 3)), rng.standard_normal(3)],
)
register(
    "layer_norm",
    lambda x, s, b: ops.layer_norm(x, s, b),
    lambda rng: [rng.standard_normal((6, 5)), rng.standard_normal(5), rng.standard_normal(5)],
)
