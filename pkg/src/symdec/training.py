"""Loss, augmentation, optimization, and checkpointing.

The focal objective balances the rare on-axis pixels against background with
a per-class factor and down-weights easy pixels with a focusing exponent.
Augmentation applies one geometric transform to the image and, analytically,
to the annotation; ground truth is re-rasterized from the transformed
geometry rather than resampled.  All randomness is derived statelessly from
(seed, epoch, index), so an interrupted run resumed from a checkpoint
reproduces the uninterrupted loss trajectory bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import synthdata
from .decoder import Heatmap
from .grid import NumericError, Tensor, csym, ops


class TrainingError(ValueError):
    """Invalid loss inputs or checkpoint contents."""


# ---------------------------------------------------------------------------
# focal loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FocalConfig:
    """Class-balanced focal loss settings.

    `alpha` weights on-axis pixels (0.85 for reflection, 0.95 for rotation,
    whose positive pixels are rarer); `lam` is the focusing exponent; `eps`
    clamps predicted probabilities away from {0, 1} before logs.
    """

    alpha: float = 0.85
    lam: float = 2.0
    eps: float = 1e-7

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise TrainingError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.lam < 0.0:
            raise TrainingError(f"focusing exponent must be >= 0, got {self.lam}")
        if not 0.0 < self.eps <= 1e-3:
            raise TrainingError(f"probability clamp must lie in (0, 1e-3], got {self.eps}")

    @staticmethod
    def for_task(task: str, lam: float = 2.0, eps: float = 1e-7) -> "FocalConfig":
        if task not in ("reflection", "rotation"):
            raise TrainingError(f"unknown task {task!r}")
        return FocalConfig(alpha=0.85 if task == "reflection" else 0.95, lam=lam, eps=eps)


def focal_loss(pred, gt, cfg: FocalConfig) -> Tensor:
    """Sum over pixels of -alpha' * (1 - s')^lam * log(s').

    s' is the predicted probability of the true class (pred on positive
    pixels, 1 - pred on negatives) and alpha' is alpha on positives and
    1 - alpha on negatives.  `gt` must be strictly binary.
    """
    p = pred.scores if isinstance(pred, Heatmap) else pred
    g = np.asarray(gt.scores.data if isinstance(gt, Heatmap) else getattr(gt, "data", gt))
    if p.shape != g.shape:
        raise TrainingError(f"pred {p.shape} and gt {g.shape} differ in shape")
    if not np.all((g == 0.0) | (g == 1.0)):
        raise TrainingError("ground truth heatmap must be binary {0, 1}")
    g = g.astype(np.float64)
    clamped = ops.clip(p, cfg.eps, 1.0 - cfg.eps)
    # s' = p on positives, 1 - p on negatives == p * (2g - 1) + (1 - g)
    s_true = ops.add_const_arr(ops.mul_const_arr(clamped, 2.0 * g - 1.0), 1.0 - g)
    weight = cfg.alpha * g + (1.0 - cfg.alpha) * (1.0 - g)
    hard = ops.power(ops.add_const(ops.mul_const(s_true, -1.0), 1.0), cfg.lam)
    per_pixel = ops.mul_const_arr(ops.mul(hard, ops.log(s_true)), -weight)
    return ops.sum_(per_pixel)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    """Geometric and photometric augmentation ranges; zeros disable a part."""

    quarter_turns: bool = True
    small_rotation: float = 15.0  # degrees, uniform in [-r, r]
    brightness: float = 0.1
    contrast: tuple[float, float] = (0.9, 1.1)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.small_rotation <= 15.0:
            raise TrainingError("small-rotation range must stay within [-15, 15] degrees")

    @property
    def enabled(self) -> bool:
        return (
            self.quarter_turns
            or self.small_rotation > 0.0
            or self.brightness > 0.0
            or tuple(self.contrast) != (1.0, 1.0)
        )


def augment(image: Tensor, annotation, cfg: AugmentConfig, rng: np.random.Generator):
    """One augmented (image, annotation) pair; geometry moves together.

    Draw order is fixed (quarter turns, small rotation, brightness, contrast)
    so a given rng state always produces the same pair.
    """
    from .grid import no_grad, rotate90, rotate_bilinear

    h, w = image.shape[-2], image.shape[-1]
    k = int(rng.integers(0, 4)) if cfg.quarter_turns else 0
    delta = float(rng.uniform(-cfg.small_rotation, cfg.small_rotation)) if cfg.small_rotation > 0 else 0.0
    brightness = float(rng.uniform(-cfg.brightness, cfg.brightness)) if cfg.brightness > 0 else 0.0
    lo, hi = cfg.contrast
    contrast = float(rng.uniform(lo, hi)) if (lo, hi) != (1.0, 1.0) else 1.0

    with no_grad():
        out = image
        if k:
            out = rotate90(out, k)
        if delta != 0.0:
            out = rotate_bilinear(out, delta, pad=0.0)
        arr = out.data
        if brightness != 0.0 or contrast != 1.0:
            arr = np.clip(contrast * (arr - 0.5) + 0.5 + brightness, 0.0, 1.0)
    ann = synthdata.rotate_annotation_quarter(annotation, k, h, w)
    if delta != 0.0:
        ann = synthdata.rotate_annotation(ann, delta, h, w)
    return Tensor(np.ascontiguousarray(arr)), ann


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    """Adam accumulators plus the learning-rate schedule descriptor."""

    lr: float = 1e-3
    schedule: str = "constant"  # constant | exponential
    decay: float = 0.1  # total decay factor reached at total_steps
    total_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def learning_rate(self) -> float:
        if self.schedule == "constant" or self.total_steps <= 0:
            return self.lr
        if self.schedule == "exponential":
            frac = min(self.step / self.total_steps, 1.0)
            return self.lr * (self.decay**frac)
        raise TrainingError(f"unknown schedule {self.schedule!r}")


def adam_update(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimState):
    """Functional Adam step; returns fresh parameter tensors and state."""
    state.step += 1
    lr = state.learning_rate()
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.step
    corr2 = 1.0 - b2**state.step
    fresh: dict[str, Tensor] = {}
    for name, tensor in params.items():
        g = grads.get(name)
        if g is None:
            fresh[name] = tensor
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(tensor.data)
            v = np.zeros_like(tensor.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        step_vec = lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        fresh[name] = Tensor((tensor.data - step_vec).astype(tensor.dtype), requires_grad=True)
    return fresh, state


# ---------------------------------------------------------------------------
# train step and loop
# ---------------------------------------------------------------------------


def batch_loss(model, batch, focal_cfg: FocalConfig) -> Tensor:
    """Mean focal loss over (image tensor, binary gt array) pairs."""
    total = None
    for image, gt in batch:
        heat = model.predict(image)
        item = focal_loss(heat, gt, focal_cfg)
        total = item if total is None else ops.add(total, item)
    return ops.mul_const(total, 1.0 / len(batch))


def train_step(batch, model, optim: OptimState, focal_cfg: FocalConfig):
    """One forward/backward/Adam update over a batch.

    Aborts with a diagnostic naming the first offending tensor if the loss or
    any gradient goes non-finite.
    """
    named = model.named_tensors()
    loss = batch_loss(model, batch, focal_cfg)
    if not loss.is_finite():
        raise NumericError("training loss is non-finite (tensor: loss)")
    loss.backward(np.ones((), dtype=loss.dtype))
    grads: dict[str, np.ndarray] = {}
    for name, tensor in named.items():
        if tensor.grad is None:
            continue
        if not np.isfinite(tensor.grad).all():
            raise NumericError(f"non-finite gradient (tensor: {name})")
        grads[name] = tensor.grad
        tensor.zero_grad()
    fresh, optim = adam_update(named, grads, optim)
    return model.replace_tensors(fresh), optim, float(loss.item())


def epoch_order(n_samples: int, seed: int, epoch: int) -> np.ndarray:
    """Stateless per-epoch shuffle; resuming mid-run recreates the order."""
    return np.random.default_rng([seed, 1000003, epoch]).permutation(n_samples)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 7919, epoch, index])


def train_loop(
    model,
    optim: OptimState,
    samples,
    epochs: int,
    batch_size: int,
    focal_cfg: FocalConfig,
    augment_cfg: AugmentConfig | None,
    rasterize,
    seed: int,
    start_epoch: int = 0,
    checkpoint_dir=None,
    checkpoint_every: int = 0,
    log=None,
):
    """Epoch loop over (image, annotation) samples.

    `rasterize` maps a (possibly augmented) annotation to a binary target.
    Returns (model, optim, history) where history records one dict per step.
    """
    history = []
    for epoch in range(start_epoch, epochs):
        order = epoch_order(len(samples), seed, epoch)
        for start in range(0, len(order), batch_size):
            chunk = order[start : start + batch_size]
            batch = []
            for idx in chunk:
                image, ann = samples[int(idx)]
                if augment_cfg is not None and augment_cfg.enabled:
                    image, ann = augment(image, ann, augment_cfg, sample_rng(seed, epoch, int(idx)))
                batch.append((image, rasterize(ann)))
            model, optim, loss = train_step(batch, model, optim, focal_cfg)
            record = {"epoch": epoch, "step": optim.step, "loss": loss, "lr": optim.learning_rate()}
            history.append(record)
            if log:
                log(record)
        if checkpoint_dir and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            checkpoint_save(model, optim, checkpoint_dir, {"epoch": epoch + 1})
    return model, optim, history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def checkpoint_save(model, optim: OptimState, path, extra: dict | None = None) -> None:
    """Directory of named CSYM tensors plus a manifest with config and state."""
    path = Path(path)
    (path / "tensors").mkdir(parents=True, exist_ok=True)
    named = model.named_tensors()
    for name, tensor in named.items():
        csym.write_tensor(path / "tensors" / f"{name}.csym", tensor.data)
    for name, arr in optim.m.items():
        csym.write_tensor(path / "tensors" / f"adam_m.{name}.csym", arr)
    for name, arr in optim.v.items():
        csym.write_tensor(path / "tensors" / f"adam_v.{name}.csym", arr)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "model": model.describe(),
        "tensors": {name: list(t.shape) for name, t in sorted(named.items())},
        "optimizer": {
            "lr": optim.lr,
            "schedule": optim.schedule,
            "decay": optim.decay,
            "total_steps": optim.total_steps,
            "beta1": optim.beta1,
            "beta2": optim.beta2,
            "eps": optim.eps,
            "step": optim.step,
            "moment_tensors": sorted(optim.m.keys()),
        },
        "extra": extra or {},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def checkpoint_load(path, expect_model_desc: dict | None = None):
    """Rebuild (model, optim) from a checkpoint directory.

    Raises TrainingError when the stored configuration disagrees with
    `expect_model_desc` or tensors are missing or mis-shaped.
    """
    from .model import ModelState

    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise TrainingError(f"{path}: missing manifest.json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise TrainingError(f"{path}: unsupported checkpoint version {manifest.get('format_version')}")
    desc = manifest["model"]
    if expect_model_desc is not None:
        for key, val in expect_model_desc.items():
            if desc.get(key) != val:
                raise TrainingError(
                    f"{path}: checkpoint {key}={desc.get(key)!r} does not match run config {val!r}"
                )
    model = ModelState.from_description(desc)
    lookup = {}
    for name, shape in manifest["tensors"].items():
        file = path / "tensors" / f"{name}.csym"
        if not file.exists():
            raise TrainingError(f"{path}: missing tensor file {name}.csym")
        arr = csym.read_tensor(file)
        if list(arr.shape) != shape:
            raise TrainingError(f"{path}: tensor {name} has shape {arr.shape}, manifest says {shape}")
        lookup[name] = Tensor(arr, requires_grad=True)
    model = model.replace_tensors(lookup)
    opt_meta = manifest["optimizer"]
    optim = OptimState(
        lr=opt_meta["lr"],
        schedule=opt_meta["schedule"],
        decay=opt_meta["decay"],
        total_steps=opt_meta["total_steps"],
        beta1=opt_meta["beta1"],
        beta2=opt_meta["beta2"],
        eps=opt_meta["eps"],
        step=opt_meta["step"],
    )
    for name in opt_meta["moment_tensors"]:
        optim.m[name] = csym.read_tensor(path / "tensors" / f"adam_m.{name}.csym")
        optim.v[name] = csym.read_tensor(path / "tensors" / f"adam_v.{name}.csym")
    return model, optim, manifest.get("extra", {})


# ---------------------------------------------------------------------------
# adjoint registration: the training objective per pixel block
# ---------------------------------------------------------------------------

from .grid import register as _register  # noqa: E402

_FOCAL_GT = (np.arange(24) % 5 == 0).astype(np.float64).reshape(4, 6)


def _focal_forward(logits):
    pred = ops.sigmoid(logits)
    return focal_loss(pred, _FOCAL_GT, FocalConfig(alpha=0.85, lam=2.0))


_register("focal_objective", _focal_forward, lambda rng: [rng.standard_normal((4, 6))])
