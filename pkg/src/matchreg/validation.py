"""Input validation helpers and the package's exception types.

The checks here enforce the contracts that the numeric kernels assume but do
not re-verify themselves (shape agreement, window parity, sample counts).
"""

from __future__ import annotations

import torch


class ContractViolation(ValueError):
    """An operation was called with arguments that break its contract."""


class CheckpointError(RuntimeError):
    """A checkpoint file is missing, malformed, or inconsistent."""


class VolumeIOError(RuntimeError):
    """A volume file or its sidecar header is malformed."""


def check_same_dims(a, b, what="operands"):
    if tuple(a) != tuple(b):
        raise ContractViolation(f"{what} must share dims, got {tuple(a)} vs {tuple(b)}")


def check_odd_window(n, name):
    if n < 3 or n % 2 == 0:
        raise ContractViolation(f"{name} must be odd and >= 3, got {n}")


def check_positive(value, name):
    if not value > 0:
        raise ContractViolation(f"{name} must be > 0, got {value}")


def check_divisible(dims, factor=16):
    for d in dims:
        if d % factor != 0:
            raise ContractViolation(
                f"spatial dims must be divisible by {factor} for pyramid encoding, got {tuple(dims)}"
            )


def as_voxels(x) -> torch.Tensor:
    """Accept a Volume or a raw (H, W, L) tensor and return the tensor."""
    t = getattr(x, "voxels", x)
    if not torch.is_tensor(t):
        t = torch.as_tensor(t)
    if t.dim() != 3:
        raise ContractViolation(f"expected a 3D scalar grid, got shape {tuple(t.shape)}")
    return t


def as_field_tensor(x) -> torch.Tensor:
    """Accept a DisplacementField or a raw (3, H, W, L) tensor."""
    t = getattr(x, "u", x)
    if not torch.is_tensor(t):
        t = torch.as_tensor(t)
    if t.dim() != 4 or t.shape[0] != 3:
        raise ContractViolation(f"expected a (3, H, W, L) field, got shape {tuple(t.shape)}")
    return t
