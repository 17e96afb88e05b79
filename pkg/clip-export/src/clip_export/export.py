"""Export jobs: fixed-resolution image reshaping and tensor emission.

Images are resized preserving aspect ratio so the long side matches the
target, zero-padded square, and fed to the backend; the resulting patch-token
grid must match the declared geometry or the job fails.  Text prompts export
one embedding row per line, order preserved.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import csymio
from .backends import resolve_backend

TARGET_SIZE = 417
PATCH_SIZE = 16


class ExportError(RuntimeError):
    pass


@dataclass
class ExportJob:
    model_id: str
    output_dir: Path
    target_size: int = TARGET_SIZE
    patch_size: int = PATCH_SIZE
    backend: object = field(default=None, repr=False)

    def __post_init__(self):
        self.output_dir = Path(self.output_dir)
        if self.backend is None:
            self.backend = resolve_backend(self.model_id, self.patch_size)

    @property
    def expected_grid(self) -> int:
        return self.target_size // self.patch_size


def load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def reshape_to_square(image: np.ndarray, target: int) -> np.ndarray:
    """Aspect-preserving resize to `target` on the long side, zero padding."""
    _, h, w = image.shape
    if h >= w:
        new_h, new_w = target, max(1, round(w * target / h))
    else:
        new_h, new_w = max(1, round(h * target / w)), target
    chw = np.stack(
        [
            np.asarray(
                Image.fromarray((c * 255).astype(np.uint8)).resize((new_w, new_h), Image.BILINEAR),
                dtype=np.float32,
            )
            / 255.0
            for c in image
        ]
    )
    out = np.zeros((3, target, target), dtype=np.float32)
    out[:, :new_h, :new_w] = chw
    return out


def export_image_tokens(job: ExportJob, image_paths) -> list[Path]:
    """One rank-3 CSYM token grid (plus sidecar) per input image."""
    written = []
    for path in image_paths:
        path = Path(path)
        image = reshape_to_square(load_image(path), job.target_size)
        tokens = job.backend.image_tokens(image)
        m = job.expected_grid
        if tokens.shape[:2] != (m, m):
            raise ExportError(
                f"{path.name}: token grid {tokens.shape[0]}x{tokens.shape[1]}, expected {m}x{m}"
            )
        out_path = job.output_dir / f"{path.stem}_tokens.csym"
        csymio.write_tensor(out_path, tokens)
        csymio.write_sidecar(
            out_path,
            {
                "patch_size": job.patch_size,
                "image_height": job.target_size,
                "image_width": job.target_size,
                "source_image": path.name,
                "model": job.model_id,
                "feature_source": "vision_final_block",
            },
        )
        written.append(out_path)
    return written


def export_text_embeddings(job: ExportJob, prompts, name: str = "text_embeddings") -> Path:
    """Rank-2 CSYM with one row per prompt, order preserved."""
    prompts = [p.strip() for p in prompts if p.strip()]
    if not prompts:
        raise ExportError("no prompts to export")
    rows = np.stack([job.backend.text_embedding(p) for p in prompts])
    out_path = job.output_dir / f"{name}.csym"
    csymio.write_tensor(out_path, rows)
    csymio.write_sidecar(
        out_path,
        {
            "prompt_count": len(prompts),
            "model": job.model_id,
            "feature_source": "text_pooled_final_block",
        },
    )
    return out_path
