"""Volumetric grid math: warping, field composition, upsampling, Jacobians.

Conventions used throughout the package:

* grids are indexed (h, w, l) and stored row-major;
* displacement fields are (3, H, W, L) tensors in voxel units with channel
  order (du_h, du_w, du_l);
* warping is backward: output(x) = input(x + u(x)), with out-of-bounds sample
  positions clamped to the grid edge;
* the zero field is the identity transform.

All functions are pure and differentiable through torch autograd where the
interpolation is trilinear.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch

from .validation import ContractViolation, as_field_tensor, as_voxels, check_same_dims


@dataclass
class Volume:
    """A scalar 3D image with optional integer label map.

    ``voxels`` is an (H, W, L) tensor; ``spacing`` is the per-axis physical
    voxel size (only the surface-distance metric consumes it). Labels, when
    present, share the voxel dims.
    """

    voxels: torch.Tensor
    spacing: tuple = (1.0, 1.0, 1.0)
    labels: Optional[torch.Tensor] = None

    def __post_init__(self):
        if not torch.is_tensor(self.voxels):
            self.voxels = torch.as_tensor(self.voxels, dtype=torch.float32)
        if self.voxels.dim() != 3 or min(self.voxels.shape) < 1:
            raise ContractViolation(f"voxels must be (H, W, L) with dims >= 1, got {tuple(self.voxels.shape)}")
        if len(self.spacing) != 3:
            raise ContractViolation("spacing must have 3 entries")
        if self.labels is not None:
            if not torch.is_tensor(self.labels):
                self.labels = torch.as_tensor(self.labels)
            if tuple(self.labels.shape) != self.dims:
                raise ContractViolation(
                    f"labels dims {tuple(self.labels.shape)} do not match voxels {self.dims}"
                )
            self.labels = self.labels.long()

    @property
    def dims(self) -> tuple:
        return tuple(self.voxels.shape)

    def normalized(self) -> "Volume":
        """Min-max rescale intensities into [0, 1] (constant volumes map to 0)."""
        v = self.voxels
        lo, hi = v.min(), v.max()
        span = (hi - lo).clamp_min(1e-12)
        return Volume((v - lo) / span, self.spacing, self.labels)


@dataclass
class DisplacementField:
    """Per-voxel 3-vector displacement in voxel units, channels (dh, dw, dl)."""

    u: torch.Tensor

    def __post_init__(self):
        if not torch.is_tensor(self.u):
            self.u = torch.as_tensor(self.u, dtype=torch.float32)
        if self.u.dim() != 4 or self.u.shape[0] != 3:
            raise ContractViolation(f"field must be (3, H, W, L), got {tuple(self.u.shape)}")
        if not torch.isfinite(self.u.detach()).all():
            raise ContractViolation("displacement field contains NaN/Inf")

    @property
    def dims(self) -> tuple:
        return tuple(self.u.shape[1:])

    @staticmethod
    def zeros(dims, dtype=torch.float32) -> "DisplacementField":
        return DisplacementField(torch.zeros((3,) + tuple(dims), dtype=dtype))


def identity_grid(dims, dtype=torch.float32, device=None) -> torch.Tensor:
    """(3, H, W, L) tensor of voxel coordinates."""
    axes = [torch.arange(d, dtype=dtype, device=device) for d in dims]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=0)


def sample_at(vox: torch.Tensor, pos: torch.Tensor, interp: str = "trilinear") -> torch.Tensor:
    """Sample a (C, H, W, L) or (H, W, L) grid at absolute voxel positions.

    ``pos`` is (3, ...) in voxel coordinates; positions outside the grid are
    clamped to the edge. Trilinear sampling is differentiable w.r.t. both the
    grid values and (inside the bounds) the positions; nearest rounds half up.
    """
    squeeze = vox.dim() == 3
    if squeeze:
        vox = vox.unsqueeze(0)
    H, W, L = vox.shape[1:]
    out_shape = pos.shape[1:]
    sizes = (H, W, L)
    p = [pos[a].clamp(0, sizes[a] - 1) for a in range(3)]

    if interp == "nearest":
        idx = [torch.floor(p[a] + 0.5).long().clamp(0, sizes[a] - 1) for a in range(3)]
        out = vox[:, idx[0], idx[1], idx[2]]
        return out.squeeze(0) if squeeze else out
    if interp != "trilinear":
        raise ContractViolation(f"unknown interpolation {interp!r}")

    i0, frac = [], []
    for a in range(3):
        base = torch.floor(p[a]).clamp(0, max(sizes[a] - 2, 0))
        i0.append(base.long())
        frac.append(p[a] - base)
    i1 = [torch.clamp(i0[a] + 1, max=sizes[a] - 1) for a in range(3)]

    out = torch.zeros((vox.shape[0],) + out_shape, dtype=vox.dtype, device=vox.device)
    for ch in range(2):
        for cw in range(2):
            for cl in range(2):
                wgt = (
                    (frac[0] if ch else 1 - frac[0])
                    * (frac[1] if cw else 1 - frac[1])
                    * (frac[2] if cl else 1 - frac[2])
                )
                corner = vox[:, (i1 if ch else i0)[0], (i1 if cw else i0)[1], (i1 if cl else i0)[2]]
                out = out + wgt.unsqueeze(0) * corner
    return out.squeeze(0) if squeeze else out


def warp_tensor(vox: torch.Tensor, u: torch.Tensor, interp: str = "trilinear") -> torch.Tensor:
    """Backward-warp a (C, H, W, L) or (H, W, L) grid by a (3, H, W, L) field."""
    dims = vox.shape[-3:]
    check_same_dims(dims, u.shape[1:], "volume and field")
    pos = identity_grid(dims, dtype=u.dtype, device=u.device) + u
    return sample_at(vox, pos, interp)


def warp_volume(v: Volume, f: DisplacementField, interp: str = "trilinear") -> Volume:
    """Warp a volume: output(x) = v(x + f(x)). Labels always resample nearest."""
    vox = as_voxels(v)
    u = as_field_tensor(f)
    check_same_dims(vox.shape, u.shape[1:], "volume and field")
    warped = warp_tensor(vox, u.to(vox.dtype), interp)
    labels = None
    spacing = (1.0, 1.0, 1.0)
    if isinstance(v, Volume):
        spacing = v.spacing
        if v.labels is not None:
            labels = warp_tensor(v.labels.to(u.dtype), u, "nearest").long()
    return Volume(warped, spacing, labels)


def compose_tensors(outer: torch.Tensor, inner: torch.Tensor) -> torch.Tensor:
    check_same_dims(outer.shape[1:], inner.shape[1:], "fields")
    return inner + warp_tensor(outer, inner, "trilinear")


def compose_fields(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """Compose so that applying the result equals applying ``inner`` then ``outer``.

    result(x) = inner(x) + outer(x + inner(x)), with outer sampled trilinearly
    and clamped at the edges.
    """
    return DisplacementField(compose_tensors(as_field_tensor(outer), as_field_tensor(inner)))


def upsample_tensor(u: torch.Tensor, factor: int = 2) -> torch.Tensor:
    up = torch.nn.functional.interpolate(
        u.unsqueeze(0), scale_factor=factor, mode="trilinear", align_corners=True
    ).squeeze(0)
    return up * factor


def upsample_field(f: DisplacementField, factor: int = 2) -> DisplacementField:
    """Trilinearly upsample each component and rescale values to voxel units."""
    return DisplacementField(upsample_tensor(as_field_tensor(f), factor))


def _axis_gradient(g: torch.Tensor, axis: int) -> torch.Tensor:
    """d g / d axis with central differences inside, one-sided at the borders."""
    g = g.movedim(axis, 0)
    interior = (g[2:] - g[:-2]) / 2
    first = (g[1:2] - g[0:1])
    last = (g[-1:] - g[-2:-1])
    return torch.cat([first, interior, last], dim=0).movedim(0, axis)


def jacobian_determinant(f) -> torch.Tensor:
    """Per-voxel determinant of the warp's Jacobian, det(I + du/dx).

    Central differences in the interior, one-sided at the boundaries; each
    axis needs at least 3 voxels.
    """
    u = as_field_tensor(f)
    if min(u.shape[1:]) < 3:
        raise ContractViolation(f"jacobian needs dims >= 3 per axis, got {tuple(u.shape[1:])}")
    J = [[_axis_gradient(u[c], a) for a in range(3)] for c in range(3)]
    for c in range(3):
        J[c][c] = J[c][c] + 1.0
    det = (
        J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1])
        - J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0])
        + J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0])
    )
    return det
