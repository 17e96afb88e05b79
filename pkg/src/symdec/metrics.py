"""Evaluation: threshold-swept F1, robustness under transforms, consistency.

F1 is micro-aggregated by default: one confusion matrix over every pixel of
the split per threshold, maximum taken over the threshold grid.  Matching is
exact-pixel unless a tolerance radius is given, in which case ground truth is
dilated for precision and predictions for recall.  Robustness re-rasterizes
transformed geometry rather than warping label rasters.  Consistency is the
cross-entropy between the transformed prediction and the prediction on the
transformed image; it is bounded below by the entropy of its target.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import synthdata
from .grid import Tensor, no_grad, ops

DEFAULT_TAU_GRID = np.round(np.arange(0.01, 1.0, 0.01), 10)
METRIC_EPS = 1e-9  # probability clamp for the cross-entropy scores, below metric resolution
TRANSFORM_KINDS = ("rotation", "flip", "quarter")


class MetricsError(ValueError):
    """Degenerate evaluation request (e.g. a split without positive pixels)."""


@dataclass
class F1Sweep:
    f1: float
    tau_star: float
    curve: list  # (tau, precision, recall, f1)


@dataclass
class EvalReport:
    f1: float
    tau_star: float
    curve: list
    robustness_f1: float | None = None
    consistency: float | None = None
    per_image: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"f1: {self.f1:.6f}", f"tau_star: {self.tau_star:.2f}"]
        if self.robustness_f1 is not None:
            lines.append(f"robustness_f1: {self.robustness_f1:.6f}")
        if self.consistency is not None:
            lines.append(f"consistency: {self.consistency:.6f}")
        return "\n".join(lines) + "\n"

    def curve_csv(self) -> str:
        rows = ["tau,precision,recall,f1"]
        rows += [f"{t:.4f},{p:.8f},{r:.8f},{f:.8f}" for t, p, r, f in self.curve]
        return "\n".join(rows) + "\n"


def _disk_footprint(radius: float) -> np.ndarray:
    r = int(np.floor(radius))
    dx, dy = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    return (dx * dx + dy * dy) <= radius * radius


def _as_array(value) -> np.ndarray:
    if hasattr(value, "scores"):
        value = value.scores
    return np.asarray(getattr(value, "data", value), dtype=np.float64)


def f1_max(preds, gts, tau_grid=None, tolerance_radius: float = 0.0, macro: bool = False) -> F1Sweep:
    """Best F1 over the threshold grid, plus the full precision/recall curve.

    Exact-pixel matching by default; with a tolerance radius rho, a predicted
    positive counts toward precision when within rho of a true positive, and
    a true positive counts as recalled when a prediction fires within rho.
    """
    taus = DEFAULT_TAU_GRID if tau_grid is None else np.asarray(tau_grid, dtype=np.float64)
    if len(preds) != len(gts) or not preds:
        raise MetricsError("need equally many predictions and ground truths, at least one")
    pos_vals, neg_vals, rec_vals = [], [], []
    per_image = []
    for pred, gt in zip(preds, gts):
        p = _as_array(pred)
        g = _as_array(gt)
        if p.shape != g.shape:
            raise MetricsError(f"prediction {p.shape} vs ground truth {g.shape}")
        if not np.all((g == 0.0) | (g == 1.0)):
            raise MetricsError("ground truth must be binary")
        mask = g > 0
        if tolerance_radius > 0.0:
            from scipy import ndimage

            foot = _disk_footprint(tolerance_radius)
            near = ndimage.binary_dilation(mask, structure=foot)
            local_max = ndimage.maximum_filter(p, footprint=foot)
        else:
            near = mask
            local_max = p
        pos_vals.append(p[near])
        neg_vals.append(p[~near])
        rec_vals.append(local_max[mask])
        per_image.append((p, g, near, local_max))
    total_gt = sum(int(v.size) for v in rec_vals)
    if total_gt == 0:
        raise MetricsError("split has no positive ground-truth pixels; recall is undefined")

    if macro:
        curves = []
        for p, g, near, local_max in per_image:
            n_img_gt = int(g.sum())
            if n_img_gt == 0:
                raise MetricsError("macro mode: an image has no positive pixels")
            curves.append(
                _confusion_curve(np.sort(p[near]), np.sort(p[~near]), np.sort(local_max[g > 0]), n_img_gt, taus)
            )
        stacked = np.stack([c[:, 3] for c in curves])  # per-image f1 rows
        f1s = stacked.mean(axis=0)
        prec = np.stack([c[:, 1] for c in curves]).mean(axis=0)
        rec = np.stack([c[:, 2] for c in curves]).mean(axis=0)
        curve = list(zip(taus.tolist(), prec.tolist(), rec.tolist(), f1s.tolist()))
    else:
        pos_sorted = np.sort(np.concatenate(pos_vals)) if pos_vals else np.empty(0)
        neg_sorted = np.sort(np.concatenate(neg_vals)) if neg_vals else np.empty(0)
        rec_sorted = np.sort(np.concatenate(rec_vals))
        table = _confusion_curve(pos_sorted, neg_sorted, rec_sorted, total_gt, taus)
        curve = [tuple(row) for row in table]
        f1s = table[:, 3]
    best = int(np.argmax(f1s))
    return F1Sweep(f1=float(f1s[best]), tau_star=float(taus[best]), curve=curve)


def per_image_f1(preds, gts, tau: float) -> list[float]:
    """Per-image F1 at one fixed threshold (report breakdown)."""
    out = []
    for pred, gt in zip(preds, gts):
        p = _as_array(pred) >= tau
        g = _as_array(gt) > 0
        tp = int(np.sum(p & g))
        fp = int(np.sum(p & ~g))
        fn = int(np.sum(~p & g))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        out.append(2 * precision * recall / (precision + recall) if precision + recall else 0.0)
    return out


def _confusion_curve(pos_sorted, neg_sorted, rec_sorted, n_gt, taus) -> np.ndarray:
    """Counts by binary search; identical to thresholding every pixel."""
    rows = np.zeros((len(taus), 4))
    for i, tau in enumerate(taus):
        tp_p = pos_sorted.size - np.searchsorted(pos_sorted, tau, side="left")
        fp = neg_sorted.size - np.searchsorted(neg_sorted, tau, side="left")
        tp_r = rec_sorted.size - np.searchsorted(rec_sorted, tau, side="left")
        precision = tp_p / (tp_p + fp) if (tp_p + fp) > 0 else 0.0
        recall = tp_r / n_gt
        f1 = 2.0 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0
        rows[i] = (tau, precision, recall, f1)
    return rows


# ---------------------------------------------------------------------------
# transforms shared by robustness and consistency
# ---------------------------------------------------------------------------


def _draw_transform(kind: str, rotation_range: float, rng: np.random.Generator):
    if kind == "rotation":
        return ("rotation", float(rng.uniform(-rotation_range, rotation_range)))
    if kind == "flip":
        return ("flip", int(rng.integers(0, 2)))
    if kind == "quarter":
        return ("quarter", int(rng.integers(0, 4)))
    raise MetricsError(f"unknown transform kind {kind!r}; choose from {TRANSFORM_KINDS}")


def _apply_to_grid(arr: np.ndarray, transform) -> np.ndarray:
    kind, param = transform
    with no_grad():
        t = Tensor(np.ascontiguousarray(arr))
        if kind == "rotation":
            if param % 360.0 == 0.0:
                return np.asarray(arr)
            return ops.rotate_bilinear(t, param % 360.0, pad=0.0).data
        if kind == "quarter":
            return ops.rotate90(t, param).data
        if kind == "flip":
            return np.ascontiguousarray(arr[..., ::-1]) if param else np.asarray(arr)
    raise MetricsError(f"unknown transform {kind!r}")


def _apply_to_annotation(ann, transform, h: int, w: int):
    kind, param = transform
    if kind == "rotation":
        return synthdata.rotate_annotation(ann, param % 360.0, h, w)
    if kind == "quarter":
        return synthdata.rotate_annotation_quarter(ann, param, h, w)
    if kind == "flip":
        return synthdata.flip_annotation(ann, h, w) if param else ann
    raise MetricsError(f"unknown transform {kind!r}")


def robustness(
    predict_fn,
    samples,
    task: str,
    transform: str = "rotation",
    rotation_range: float = 45.0,
    seed: int = 0,
    tau_grid=None,
    stroke_width: float = 3.0,
    sigma: float = 3.0,
    tolerance_radius: float = 0.0,
) -> F1Sweep:
    """Best F1 on transformed inputs with ground truth re-rasterized from the
    correspondingly transformed geometry."""
    if not samples:
        raise MetricsError("robustness needs a non-empty dataset")
    preds, gts = [], []
    for i, (image, ann) in enumerate(samples):
        rng = np.random.default_rng([seed, 211, i])
        chosen = _draw_transform(transform, rotation_range, rng)
        h, w = image.shape[-2], image.shape[-1]
        timg = Tensor(np.ascontiguousarray(_apply_to_grid(image.data, chosen)))
        tann = _apply_to_annotation(ann, chosen, h, w)
        gts.append(synthdata.rasterize_gt(tann, h, w, task, width=stroke_width, sigma=sigma).scores.data)
        preds.append(predict_fn(timg))
    return f1_max(preds, gts, tau_grid=tau_grid, tolerance_radius=tolerance_radius)


def binary_cross_entropy(target: np.ndarray, pred: np.ndarray, eps: float = METRIC_EPS) -> float:
    p = np.clip(np.asarray(target, dtype=np.float64), eps, 1.0 - eps)
    q = np.clip(np.asarray(pred, dtype=np.float64), eps, 1.0 - eps)
    return float(-np.mean(p * np.log(q) + (1.0 - p) * np.log(1.0 - q)))


def binary_entropy(target: np.ndarray, eps: float = METRIC_EPS) -> float:
    return binary_cross_entropy(target, target, eps)


def consistency(
    predict_fn,
    samples,
    transform: str = "rotation",
    rotation_range: float = 45.0,
    seed: int = 0,
    transforms_per_image: int = 4,
    eps: float = METRIC_EPS,
) -> float:
    """Mean cross-entropy between the transformed prediction on the original
    image (target) and the prediction on the transformed image."""
    if not samples:
        raise MetricsError("consistency needs a non-empty dataset")
    values = []
    for i, item in enumerate(samples):
        image = item[0] if isinstance(item, tuple) else item
        base = predict_fn(image)
        for j in range(transforms_per_image):
            rng = np.random.default_rng([seed, 409, i, j])
            chosen = _draw_transform(transform, rotation_range, rng)
            target = _apply_to_grid(base, chosen)
            moved = predict_fn(Tensor(np.ascontiguousarray(_apply_to_grid(image.data, chosen))))
            values.append(binary_cross_entropy(target, moved, eps))
    return float(np.mean(values))
