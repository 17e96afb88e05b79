"""Feature backends.

`TransformersClipBackend` runs a published CLIP checkpoint through the
`transformers` library (weights must be available locally or via network).
`HashedReferenceBackend` is a deterministic, geometry-faithful stand-in for
offline integration testing: seeded random projections keyed by the backend
name.  It produces tensors with the exact shapes and dtypes of the real
export but carries no learned semantics.
"""

from __future__ import annotations

import hashlib
import warnings

import numpy as np

REFERENCE_PREFIX = "reference/"


class BackendError(RuntimeError):
    pass


def _key_from(*parts: str) -> np.ndarray:
    digest = hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()
    return np.frombuffer(digest[:16], dtype=np.uint64)


class HashedReferenceBackend:
    """Deterministic projections with real-export geometry (no learned model)."""

    image_dim = 768
    text_dim = 512

    def __init__(self, name: str = "reference/hashed", patch_size: int = 16):
        self.name = name
        self.patch_size = patch_size

    def image_tokens(self, image: np.ndarray) -> np.ndarray:
        """[3, S, S] in [0, 1] -> [M, M, image_dim] with M = S // patch_size."""
        _, h, w = image.shape
        p = self.patch_size
        m = min(h, w) // p
        used = m * p
        patches = (
            image[:, :used, :used]
            .reshape(3, m, p, m, p)
            .transpose(1, 3, 0, 2, 4)
            .reshape(m, m, 3 * p * p)
        )
        rng = np.random.Generator(np.random.Philox(key=_key_from(self.name, "image-proj")))
        proj = rng.standard_normal((3 * p * p, self.image_dim)) / np.sqrt(3 * p * p)
        return (patches @ proj).astype(np.float32)

    def text_embedding(self, prompt: str) -> np.ndarray:
        rng = np.random.Generator(np.random.Philox(key=_key_from(self.name, "text", prompt.lower())))
        return rng.standard_normal(self.text_dim).astype(np.float32)


class TransformersClipBackend:
    """Patch tokens and prompt embeddings from a published CLIP checkpoint.

    Image tokens come from the vision tower's final block with the class
    token discarded; text embeddings from the text tower's pooled output.
    Features are exported raw: no normalization and no projection head.
    """

    def __init__(self, model_id: str, patch_size: int = 16):
        try:
            import torch  # noqa: F401
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as err:
            raise BackendError(
                f"backend {model_id!r} needs the transformers/torch extra installed"
            ) from err
        try:
            self.model = CLIPModel.from_pretrained(model_id)
            self.processor = CLIPProcessor.from_pretrained(model_id)
        except Exception as err:
            raise BackendError(f"model {model_id!r} is not available locally: {err}") from err
        self.model.eval()
        self.name = model_id
        self.patch_size = patch_size
        self.image_dim = self.model.config.vision_config.hidden_size
        self.text_dim = self.model.config.text_config.hidden_size

    def image_tokens(self, image: np.ndarray) -> np.ndarray:
        import torch

        _, h, w = image.shape
        m = min(h, w) // self.patch_size
        pixel = torch.from_numpy(image[None]).float()
        mean = torch.tensor(self.processor.image_processor.image_mean).view(1, 3, 1, 1)
        std = torch.tensor(self.processor.image_processor.image_std).view(1, 3, 1, 1)
        pixel = (pixel - mean) / std
        with torch.no_grad():
            out = self.model.vision_model(pixel_values=pixel, interpolate_pos_encoding=True)
        hidden = out.last_hidden_state[0]  # [1 + M*M, D]
        patch_tokens = hidden[1:]  # class token discarded
        if patch_tokens.shape[0] != m * m:
            raise BackendError(
                f"vision tower produced {patch_tokens.shape[0]} patch tokens, geometry expects {m * m}"
            )
        return patch_tokens.reshape(m, m, -1).numpy().astype(np.float32)

    def text_embedding(self, prompt: str) -> np.ndarray:
        import torch

        tok = self.processor.tokenizer(prompt, return_tensors="pt", truncation=True)
        full = self.processor.tokenizer(prompt, truncation=False)["input_ids"]
        if len(full) > tok["input_ids"].shape[1]:
            warnings.warn(f"prompt truncated by the tokenizer: {prompt!r}")
        with torch.no_grad():
            out = self.model.text_model(**tok)
        return out.pooler_output[0].numpy().astype(np.float32)


def resolve_backend(model_id: str, patch_size: int = 16):
    if model_id.startswith(REFERENCE_PREFIX):
        return HashedReferenceBackend(model_id, patch_size)
    return TransformersClipBackend(model_id, patch_size)
