"""Coarse-to-fine field decoding via multi-head local attention.

Each level estimates a residual displacement by letting every fixed-image
voxel attend over the 3x3x3 neighborhood of the (already warped) moving
features: per head, a softmax over the 27 candidate offsets yields an
expected offset, and a learned 1x1x1 convolution combines the heads. The
attention temperature starts at zero (uniform softmax), so a freshly built
decoder outputs an exactly zero field for any input pair; training raises
the temperature. Level fields are upsampled and composed from the coarsest
level down to full resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import torch
import torch.nn as nn

from .encoders import FeaturePyramid
from .validation import ContractViolation, check_same_dims
from .volgrid import DisplacementField, compose_tensors, upsample_tensor, warp_tensor


@dataclass
class DecoderConfig:
    heads: tuple = (1, 2, 2, 4, 4)  # indexed fine -> coarse (level 1 .. level 5)
    neighborhood: int = 3
    max_level_disp: float = 8.0

    def __post_init__(self):
        self.heads = tuple(self.heads)
        if len(self.heads) != 5 or min(self.heads) < 1:
            raise ContractViolation("heads must be a 5-tuple of >= 1")
        if self.neighborhood != 3:
            raise ContractViolation("only a 3x3x3 attention neighborhood is supported")
        if self.max_level_disp <= 0:
            raise ContractViolation("max_level_disp must be > 0")


def offset_grid(dtype=torch.float32, device=None) -> torch.Tensor:
    """(27, 3) candidate offsets in lexicographic (dh, dw, dl) order."""
    vals = torch.tensor([-1.0, 0.0, 1.0], dtype=dtype, device=device)
    hh, ww, ll = torch.meshgrid(vals, vals, vals, indexing="ij")
    return torch.stack([hh.reshape(-1), ww.reshape(-1), ll.reshape(-1)], dim=1)


def fields_from_weights(weights: torch.Tensor) -> torch.Tensor:
    """Per-head expected offsets from attention weights.

    ``weights`` is (heads, 27, H, W, L) and should sum to 1 over dim 1; the
    result is (heads, 3, H, W, L) with every component in [-1, 1].
    """
    offs = offset_grid(dtype=weights.dtype, device=weights.device)
    return torch.einsum("koxyz,oc->kcxyz", weights, offs)


class LevelFieldEstimator(nn.Module):
    """Single-level motion estimator: local attention heads as motion modes."""

    def __init__(self, channels: int, heads: int, max_disp: float = 8.0):
        super().__init__()
        if channels % heads != 0:
            raise ContractViolation(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = channels // heads
        self.max_disp = max_disp
        self.query = nn.Conv3d(channels, channels, 1)
        self.key = nn.Conv3d(channels, channels, 1)
        # zero temperature = uniform attention = exactly zero field at init
        self.temperature = nn.Parameter(torch.zeros(()))
        self.combine = nn.Conv3d(heads * 3, 3, 1)
        with torch.no_grad():
            self.combine.weight.zero_()
            self.combine.bias.zero_()
            for c in range(3):
                for h in range(heads):
                    self.combine.weight[c, h * 3 + c, 0, 0, 0] = 1.0 / heads

    def attention_weights(self, f_fixed: torch.Tensor, f_moving: torch.Tensor) -> torch.Tensor:
        """(heads, 27, H, W, L) softmax weights over candidate offsets."""
        check_same_dims(f_fixed.shape, f_moving.shape, "level features")
        dims = f_fixed.shape[1:]
        q = self.query(f_fixed.unsqueeze(0)).squeeze(0)
        k = self.key(f_moving.unsqueeze(0)).squeeze(0)
        q = q.reshape(self.heads, self.head_dim, *dims)
        k = k.reshape(self.heads, self.head_dim, *dims)
        padded = nn.functional.pad(k, (1, 1, 1, 1, 1, 1), mode="replicate")
        H, W, L = dims
        scores = []
        for dh in (-1, 0, 1):
            for dw in (-1, 0, 1):
                for dl in (-1, 0, 1):
                    nb = padded[:, :, 1 + dh:1 + dh + H, 1 + dw:1 + dw + W, 1 + dl:1 + dl + L]
                    scores.append((q * nb).sum(dim=1) / self.head_dim ** 0.5)
        stack = torch.stack(scores, dim=1)  # (heads, 27, H, W, L)
        return torch.softmax(self.temperature * stack, dim=1)

    def forward(self, f_fixed: torch.Tensor, f_moving: torch.Tensor) -> torch.Tensor:
        weights = self.attention_weights(f_fixed, f_moving)
        head_fields = fields_from_weights(weights)  # (heads, 3, H, W, L)
        merged = head_fields.reshape(1, self.heads * 3, *f_fixed.shape[1:])
        field = self.combine(merged).squeeze(0)
        return field.clamp(-self.max_disp, self.max_disp)


def estimate_level_field(f_fixed: torch.Tensor, f_moving: torch.Tensor,
                         estimator: LevelFieldEstimator) -> torch.Tensor:
    return estimator(f_fixed, f_moving)


class FusionLayers(nn.Module):
    """Per-level convolutions mapping concat(G_l, S_l) to the fused features.

    In the first two training stages fusion is bypassed and the output is
    bit-identical to one input stream.
    """

    def __init__(self, channels: tuple):
        super().__init__()
        self.convs = nn.ModuleList(
            [nn.Conv3d(2 * c, c, 3, padding=1) for c in channels]
        )

    def forward(self, g: torch.Tensor, s: torch.Tensor, level_index: int, mode: str = "fuse"):
        if mode == "g":
            return g
        if mode == "s":
            return s
        if mode != "fuse":
            raise ContractViolation(f"unknown fusion mode {mode!r}")
        check_same_dims(g.shape[1:], s.shape[1:], "fusion inputs")
        return self.convs[level_index](torch.cat([g, s], dim=0).unsqueeze(0)).squeeze(0)


def fuse_features(g: torch.Tensor, s: torch.Tensor, fusion: FusionLayers,
                  level_index: int, mode: str = "fuse") -> torch.Tensor:
    return fusion(g, s, level_index, mode)


class PyramidDecoder(nn.Module):
    """Composes per-level residual fields into the final deformation."""

    def __init__(self, channels: tuple, cfg: DecoderConfig = None):
        super().__init__()
        self.cfg = cfg or DecoderConfig()
        self.estimators = nn.ModuleList(
            [LevelFieldEstimator(c, h, self.cfg.max_level_disp)
             for c, h in zip(channels, self.cfg.heads)]
        )

    def decode(self, pyr_fixed: FeaturePyramid, pyr_moving: FeaturePyramid
               ) -> Tuple[DisplacementField, List[torch.Tensor]]:
        """Runs coarse-to-fine decoding; returns the final field and the
        running field after every level (coarsest first)."""
        if pyr_fixed.dims != pyr_moving.dims:
            raise ContractViolation("pyramids have mismatched dims")
        running = None
        per_level = []
        for li in reversed(range(5)):
            ff = pyr_fixed.levels[li]
            fm = pyr_moving.levels[li]
            if running is None:
                running = self.estimators[li](ff, fm)
            else:
                up = upsample_tensor(running)
                fm = warp_tensor(fm, up)
                delta = self.estimators[li](ff, fm)
                running = compose_tensors(up, delta)
            per_level.append(running)
        return DisplacementField(running), per_level

    forward = decode
