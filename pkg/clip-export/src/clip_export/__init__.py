"""Vision-language feature export to CSYM tensor files."""

from .backends import BackendError, HashedReferenceBackend, TransformersClipBackend, resolve_backend
from .export import ExportError, ExportJob, export_image_tokens, export_text_embeddings

__all__ = [
    "BackendError",
    "ExportError",
    "ExportJob",
    "HashedReferenceBackend",
    "TransformersClipBackend",
    "export_image_tokens",
    "export_text_embeddings",
    "resolve_backend",
]
