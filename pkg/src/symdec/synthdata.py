"""Procedural scenes with analytically known symmetry elements.

Shapes (ellipses, rectangles, regular polygons, stars) are placed on a noisy
background; every shape contributes its exact reflection axes and rotation
center to the annotation.  Annotation coordinates are snapped to a 1/8-pixel
lattice: on that lattice the quarter-turn coordinate maps are exact in
floating point, which is what makes rasterization commute with quarter-turn
annotation rotation bit for bit.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .decoder import Heatmap
from .grid import GridError, Tensor

SNAP = 8.0  # lattice denominator for annotation coordinates
FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Invalid scene specification, annotation, or dataset directory."""


class EmptyAnnotationWarning(UserWarning):
    """Rasterizing an annotation with no elements for the requested task."""


def snap(value: float) -> float:
    return round(value * SNAP) / SNAP


# ---------------------------------------------------------------------------
# annotations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Annotation:
    """Reflection axis segments and rotation centers, in pixel coordinates.

    Coordinates follow the grid convention used everywhere in this package:
    the first coordinate indexes rows (x), the second columns (y).
    """

    axes: tuple[tuple[float, float, float, float], ...] = ()
    centers: tuple[tuple[float, float, int], ...] = ()

    def __post_init__(self):
        for x0, y0, x1, y1 in self.axes:
            if (x1 - x0) ** 2 + (y1 - y0) ** 2 <= 1.0:
                raise DatasetError(f"degenerate axis segment ({x0},{y0})-({x1},{y1})")
        for _, _, order in self.centers:
            if order < 2:
                raise DatasetError(f"rotation order must be >= 2, got {order}")

    def validate_bounds(self, h: int, w: int) -> None:
        for x0, y0, x1, y1 in self.axes:
            for x, y in ((x0, y0), (x1, y1)):
                if not (0 <= x <= h - 1 and 0 <= y <= w - 1):
                    raise DatasetError(f"axis endpoint ({x},{y}) outside {h}x{w} image")
        for x, y, _ in self.centers:
            if not (0 <= x <= h - 1 and 0 <= y <= w - 1):
                raise DatasetError(f"rotation center ({x},{y}) outside {h}x{w} image")

    def is_empty(self, task: str) -> bool:
        return not self.axes if task == "reflection" else not self.centers


def rotate_annotation_quarter(ann: Annotation, k: int, h: int, w: int) -> Annotation:
    """Forward quarter-turn rotation of the geometry about the raster center.

    Uses swap/negate coordinate maps only, so lattice-snapped coordinates
    transform exactly; k=1 sends (x, y) to (H-1-y, x).
    """
    k = int(k) % 4
    if k == 0:
        return ann
    if h != w:
        raise DatasetError("quarter-turn annotation rotation needs a square raster")

    def rot_point(x, y):
        for _ in range(k):
            x, y = (h - 1) - y, x
        return x, y

    axes = []
    for x0, y0, x1, y1 in ann.axes:
        (a, b), (c, d) = rot_point(x0, y0), rot_point(x1, y1)
        axes.append((a, b, c, d))
    centers = [(*rot_point(x, y), order) for x, y, order in ann.centers]
    return Annotation(axes=tuple(axes), centers=tuple(centers))


def rotate_annotation(ann: Annotation, degrees: float, h: int, w: int) -> Annotation:
    """Forward rotation by an arbitrary angle about the raster center."""
    quarter = int((degrees % 360.0) // 90.0)
    residual = (degrees % 360.0) - 90.0 * quarter
    ann = rotate_annotation_quarter(ann, quarter, h, w)
    if residual == 0.0:
        return ann
    theta = math.radians(residual)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cx, cy = (h - 1) / 2.0, (w - 1) / 2.0

    def rot_point(x, y):
        u, v = x - cx, y - cy
        return (cos_t * u - sin_t * v + cx, sin_t * u + cos_t * v + cy)

    axes = []
    for x0, y0, x1, y1 in ann.axes:
        (a, b), (c, d) = rot_point(x0, y0), rot_point(x1, y1)
        axes.append((a, b, c, d))
    centers = [(*rot_point(x, y), order) for x, y, order in ann.centers]
    return Annotation(axes=tuple(axes), centers=tuple(centers))


def flip_annotation(ann: Annotation, h: int, w: int) -> Annotation:
    """Mirror the geometry across the vertical center line (horizontal flip)."""
    axes = tuple((x0, (w - 1) - y0, x1, (w - 1) - y1) for x0, y0, x1, y1 in ann.axes)
    centers = tuple((x, (w - 1) - y, order) for x, y, order in ann.centers)
    return Annotation(axes=axes, centers=centers)


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------


def _segment_distance_sq(h: int, w: int, seg) -> np.ndarray:
    x0, y0, x1, y1 = (float(c) for c in seg)
    xs = np.arange(h, dtype=np.float64)[:, None]
    ys = np.arange(w, dtype=np.float64)[None, :]
    dx, dy = x1 - x0, y1 - y0
    len_sq = dx * dx + dy * dy
    t = ((xs - x0) * dx + (ys - y0) * dy) / len_sq
    t = np.clip(t, 0.0, 1.0)
    qx = x0 + t * dx
    qy = y0 + t * dy
    return (xs - qx) ** 2 + (ys - qy) ** 2


def rasterize_gt(ann: Annotation, h: int, w: int, task: str, width: float = 3.0, sigma: float = 3.0) -> Heatmap:
    """Binary ground-truth raster for one task.

    Reflection: pixels within `width`/2 of any axis segment are 1.  Rotation:
    the per-pixel max over centers of exp(-r^2 / (2 sigma^2)), binarized at
    0.5.  An annotation with no elements for the task yields an all-zero map
    and a warning.
    """
    if task not in ("reflection", "rotation"):
        raise DatasetError(f"unknown task {task!r}")
    if task == "reflection" and width < 1.0:
        raise DatasetError(f"stroke width must be >= 1 pixel, got {width}")
    if task == "rotation" and sigma <= 0.0:
        raise DatasetError(f"sigma must be positive, got {sigma}")
    out = np.zeros((h, w), dtype=np.float64)
    if ann.is_empty(task):
        warnings.warn(f"annotation has no {task} elements; target is all zeros", EmptyAnnotationWarning)
        return Heatmap(scores=Tensor(out.astype(np.float32)))
    if task == "reflection":
        limit = (width / 2.0) ** 2
        for seg in ann.axes:
            out = np.maximum(out, (_segment_distance_sq(h, w, seg) <= limit).astype(np.float64))
    else:
        xs = np.arange(h, dtype=np.float64)[:, None]
        ys = np.arange(w, dtype=np.float64)[None, :]
        score = np.zeros((h, w), dtype=np.float64)
        for cx, cy, _ in ann.centers:
            r_sq = (xs - cx) ** 2 + (ys - cy) ** 2
            score = np.maximum(score, np.exp(-r_sq / (2.0 * sigma * sigma)))
        out = (score >= 0.5).astype(np.float64)
    return Heatmap(scores=Tensor(out.astype(np.float32)))


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

FAMILIES = ("ellipse", "rectangle", "polygon", "star")


@dataclass(frozen=True)
class SceneSpec:
    """Knobs for procedural scene generation."""

    size: int = 128
    min_shapes: int = 1
    max_shapes: int = 2
    families: tuple[str, ...] = FAMILIES
    noise: float = 0.02
    max_attempts: int = 50

    def __post_init__(self):
        if self.size < 16:
            raise DatasetError("image size must be at least 16")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise DatasetError("need 1 <= min_shapes <= max_shapes")
        unknown = set(self.families) - set(FAMILIES)
        if unknown:
            raise DatasetError(f"unknown shape families: {sorted(unknown)}")
        if not self.families:
            raise DatasetError("at least one shape family required")

    def to_dict(self) -> dict:
        return {
            "size": self.size,
            "min_shapes": self.min_shapes,
            "max_shapes": self.max_shapes,
            "families": list(self.families),
            "noise": self.noise,
            "max_attempts": self.max_attempts,
        }

    @staticmethod
    def from_dict(data: dict) -> "SceneSpec":
        return SceneSpec(
            size=data["size"],
            min_shapes=data["min_shapes"],
            max_shapes=data["max_shapes"],
            families=tuple(data["families"]),
            noise=data["noise"],
            max_attempts=data.get("max_attempts", 50),
        )


def _coverage(inside_fn, h: int, w: int) -> np.ndarray:
    """2x2 supersampled coverage of an inside test given centered coords."""
    cx, cy = (h - 1) / 2.0, (w - 1) / 2.0
    cover = np.zeros((h, w), dtype=np.float64)
    for ox in (-0.25, 0.25):
        for oy in (-0.25, 0.25):
            u = np.arange(h, dtype=np.float64)[:, None] + ox - cx
            v = np.arange(w, dtype=np.float64)[None, :] + oy - cy
            cover += inside_fn(u, v)
    return cover / 4.0


def _axis_segments(cx: float, cy: float, angles, length: float):
    """Axis segments as center +/- a snapped offset, so each passes through
    the center exactly."""
    segs = []
    for psi in angles:
        ox = snap(length * math.cos(psi))
        oy = snap(length * math.sin(psi))
        if ox == 0.0 and oy == 0.0:
            continue
        segs.append((cx + ox, cy + oy, cx - ox, cy - oy))
    return segs


def _make_shape(rng: np.random.Generator, spec: SceneSpec):
    """One random symmetric shape: inside test, color, and symmetry elements."""
    size = spec.size
    family = str(rng.choice(list(spec.families)))
    radius = float(rng.uniform(0.16, 0.30) * size)
    margin = radius + 3.0
    cx = snap(float(rng.uniform(margin, size - 1 - margin)))
    cy = snap(float(rng.uniform(margin, size - 1 - margin)))
    phi = float(rng.uniform(0.0, math.pi))
    color = rng.uniform(0.25, 1.0, size=3)
    cos_p, sin_p = math.cos(phi), math.sin(phi)

    def rotated(u, v):
        du, dv = u - (cx - (size - 1) / 2.0), v - (cy - (size - 1) / 2.0)
        return cos_p * du + sin_p * dv, -sin_p * du + cos_p * dv

    if family == "ellipse":
        a = radius
        b = float(rng.uniform(0.45, 1.0)) * radius

        def inside(u, v):
            p, q = rotated(u, v)
            return (p / a) ** 2 + (q / b) ** 2 <= 1.0

        angles = [phi, phi + math.pi / 2.0]
        order = 2
        axis_len = a
    elif family == "rectangle":
        a = radius
        b = float(rng.uniform(0.4, 0.9)) * radius

        def inside(u, v):
            p, q = rotated(u, v)
            return (np.abs(p) <= a) & (np.abs(q) <= b)

        angles = [phi, phi + math.pi / 2.0]
        order = 2
        axis_len = a
    elif family == "polygon":
        k = int(rng.integers(3, 7))
        apothem = radius * math.cos(math.pi / k)

        def inside(u, v, k=k):
            du = u - (cx - (size - 1) / 2.0)
            dv = v - (cy - (size - 1) / 2.0)
            val = np.full(du.shape, -np.inf)
            for i in range(k):
                alpha = phi + (2 * i + 1) * math.pi / k
                val = np.maximum(val, du * math.cos(alpha) + dv * math.sin(alpha))
            return val <= apothem

        angles = [phi + i * math.pi / k for i in range(k)]
        order = k
        axis_len = radius
    else:  # star
        k = int(rng.integers(4, 7))
        inner = float(rng.uniform(0.35, 0.55)) * radius

        def inside(u, v, k=k, inner=inner):
            du = u - (cx - (size - 1) / 2.0)
            dv = v - (cy - (size - 1) / 2.0)
            ang = (np.arctan2(dv, du) - phi) % (2.0 * math.pi / k)
            ang = np.minimum(ang, 2.0 * math.pi / k - ang)
            rad = np.hypot(du, dv)
            # boundary: segment from (radius, 0) to (inner, pi/k) in the folded sector
            bx0, by0 = radius, 0.0
            bx1 = inner * math.cos(math.pi / k)
            by1 = inner * math.sin(math.pi / k)
            px = rad * np.cos(ang)
            py = rad * np.sin(ang)
            cross = (bx1 - bx0) * (py - by0) - (by1 - by0) * (px - bx0)
            return cross <= 0.0

        angles = [phi + i * math.pi / k for i in range(k)]
        order = k
        axis_len = radius
    axes = _axis_segments(cx, cy, angles, axis_len)
    center = (cx, cy, order)
    return {
        "inside": inside,
        "color": color,
        "axes": axes,
        "center": center,
        "pos": (cx, cy),
        "radius": radius,
        "family": family,
    }


def generate_scene(spec: SceneSpec, rng: np.random.Generator):
    """One (image, annotation) pair; shapes never fully occlude each other."""
    size = spec.size
    base = rng.uniform(0.05, 0.25)
    image = np.full((3, size, size), base, dtype=np.float64)
    if spec.noise > 0:
        image += rng.normal(0.0, spec.noise, size=(3, size, size))
    count = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    shapes = []
    while len(shapes) < count:
        placed = False
        for _ in range(spec.max_attempts):
            shape = _make_shape(rng, spec)
            too_close = any(
                math.hypot(shape["pos"][0] - s["pos"][0], shape["pos"][1] - s["pos"][1])
                < 0.8 * (shape["radius"] + s["radius"])
                for s in shapes
            )
            if not too_close:
                shapes.append(shape)
                placed = True
                break
        if not placed:
            if len(shapes) >= spec.min_shapes:
                break  # crowded scene: settle for fewer shapes
            raise DatasetError(
                f"could not place {spec.min_shapes} shapes in {spec.max_attempts} attempts"
            )
    axes, centers = [], []
    for shape in shapes:
        cover = _coverage(shape["inside"], size, size)
        image = image * (1.0 - cover) + shape["color"][:, None, None] * cover
        axes.extend(shape["axes"])
        centers.append(shape["center"])
    ann = Annotation(axes=tuple(axes), centers=tuple(centers))
    ann.validate_bounds(size, size)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Tensor(image), ann


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------


def annotation_to_text(ann: Annotation) -> str:
    lines = [f"axis {x0!r} {y0!r} {x1!r} {y1!r}" for x0, y0, x1, y1 in ann.axes]
    lines += [f"center {x!r} {y!r} {k}" for x, y, k in ann.centers]
    return "\n".join(lines) + "\n"


def annotation_from_text(text: str) -> Annotation:
    axes, centers = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "axis" and len(parts) == 5:
            axes.append(tuple(float(p) for p in parts[1:]))
        elif parts[0] == "center" and len(parts) == 4:
            centers.append((float(parts[1]), float(parts[2]), int(parts[3])))
        else:
            raise DatasetError(f"annotation line {lineno}: cannot parse {line!r}")
    return Annotation(axes=tuple(axes), centers=tuple(centers))


def _image_to_png(image: Tensor, path: Path) -> None:
    arr = np.clip(np.rint(image.data * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0)).save(path, format="PNG")


def load_image(path) -> Tensor:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return Tensor(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def write_dataset(spec: SceneSpec, count: int, out_dir, split: str = "train", seed: int = 0) -> dict:
    """Generate `count` scenes into a dataset directory; returns the manifest."""
    if count < 1:
        raise DatasetError(f"sample count must be positive, got {count}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "annotations").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        image, ann = generate_scene(spec, rng)
        image_rel = f"images/{i:04d}.png"
        ann_rel = f"annotations/{i:04d}.txt"
        _image_to_png(image, out_dir / image_rel)
        (out_dir / ann_rel).write_text(annotation_to_text(ann))
        entries.append(
            {"image": image_rel, "annotation": ann_rel, "height": spec.size, "width": spec.size}
        )
    manifest = {
        "format_version": FORMAT_VERSION,
        "split": split,
        "seed": seed,
        "spec": spec.to_dict(),
        "entries": entries,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_dataset(dataset_dir):
    """Load a dataset directory; every referenced file must exist."""
    dataset_dir = Path(dataset_dir)
    manifest_path = dataset_dir / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"{dataset_dir}: missing manifest.json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(
            f"{dataset_dir}: manifest version {manifest.get('format_version')} unsupported"
        )
    samples = []
    for entry in manifest["entries"]:
        image_path = dataset_dir / entry["image"]
        ann_path = dataset_dir / entry["annotation"]
        for p in (image_path, ann_path):
            if not p.exists():
                raise DatasetError(f"{dataset_dir}: manifest references missing file {p.name}")
        samples.append((load_image(image_path), annotation_from_text(ann_path.read_text())))
    return manifest, samples
