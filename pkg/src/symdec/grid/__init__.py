"""Numeric substrate: tensors, planar rotations, resampling, adjoint checks."""

from . import ops
from .adjoint import FD_STEP, AdjointError, AdjointRule, check_adjoint, register, registry
from .csym import CsymFormatError, read_sidecar, read_tensor, write_sidecar, write_tensor
from .ops import (
    bilinear_resize,
    bilinear_upsample,
    RotationAngle,
    rot90_array,
    rotate90,
    rotate_bilinear,
)
from .tensor import GridError, NumericError, Tensor, as_tensor, no_grad, require_finite

__all__ = [
    "AdjointError",
    "AdjointRule",
    "CsymFormatError",
    "FD_STEP",
    "GridError",
    "NumericError",
    "Tensor",
    "RotationAngle",
    "as_tensor",
    "bilinear_resize",
    "bilinear_upsample",
    "check_adjoint",
    "no_grad",
    "ops",
    "read_sidecar",
    "read_tensor",
    "register",
    "registry",
    "require_finite",
    "rot90_array",
    "rotate90",
    "rotate_bilinear",
    "write_sidecar",
    "write_tensor",
]
