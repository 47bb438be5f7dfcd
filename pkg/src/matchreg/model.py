"""Full registration network: two encoder streams, fusion, pyramid decoder.

The forward mode selects which features drive the decoder: the general
stream alone, the structural stream alone, or the learned fusion of both.
A frozen seeded reference encoder rides along as the distillation target.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn as nn

from .decoder import DecoderConfig, FusionLayers, PyramidDecoder
from .encoders import (
    EncoderConfig,
    FeaturePyramid,
    PyramidEncoder,
    ReferenceEncoder,
    SEMConfig,
    distill_alignment_loss,
    pca_reduce,
    reference_features,
)
from .losses import LossConfig
from .validation import ContractViolation, as_voxels

MODES = ("g", "s", "fuse")


@dataclass
class NetworkConfig:
    input_dims: tuple = (32, 32, 32)
    channels: tuple = (8, 16, 24, 32, 48)
    sem_n: int = 7
    sem_reduced_min: int = 4
    sem_epsilon: float = 1e-8
    heads: tuple = (1, 2, 2, 4, 4)
    max_level_disp: float = 8.0
    reference_channels: int = 32
    seed: int = 0

    def __post_init__(self):
        self.input_dims = tuple(int(d) for d in self.input_dims)
        self.channels = tuple(int(c) for c in self.channels)
        self.heads = tuple(int(h) for h in self.heads)

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        return NetworkConfig(**d)


class RegistrationNetwork(nn.Module):
    def __init__(self, cfg: NetworkConfig = None):
        super().__init__()
        self.cfg = cfg or NetworkConfig()
        enc_cfg = EncoderConfig(self.cfg.channels)
        sem_cfg = SEMConfig(self.cfg.sem_n, self.cfg.sem_reduced_min, self.cfg.sem_epsilon)
        dec_cfg = DecoderConfig(self.cfg.heads, max_level_disp=self.cfg.max_level_disp)
        with torch.random.fork_rng():
            torch.manual_seed(self.cfg.seed)
            self.encoder_g = PyramidEncoder(enc_cfg, sem=None, input_dims=self.cfg.input_dims)
            self.encoder_s = PyramidEncoder(enc_cfg, sem=sem_cfg, input_dims=self.cfg.input_dims)
            self.fusion = FusionLayers(self.cfg.channels)
            self.decoder = PyramidDecoder(self.cfg.channels, dec_cfg)
        self.reference = ReferenceEncoder(self.cfg.reference_channels, seed=self.cfg.seed + 101)

    def parameter_groups(self):
        return {
            "encoder_g": list(self.encoder_g.parameters()),
            "encoder_s": list(self.encoder_s.parameters()),
            "fusion": list(self.fusion.parameters()),
            "decoder": list(self.decoder.parameters()),
            "reference": list(self.reference.parameters()),
        }

    def feature_pyramids(self, vox, mode: str):
        """Fused feature pyramid for one image under the given stage mode."""
        if mode not in MODES:
            raise ContractViolation(f"mode must be one of {MODES}, got {mode!r}")
        if mode == "g":
            return self.encoder_g(vox), None
        if mode == "s":
            return self.encoder_s(vox), None
        return self.encoder_g(vox), self.encoder_s(vox)

    def forward(self, moving, fixed, mode: str = "fuse"):
        """Returns (final DisplacementField, per-level running fields, extras).

        ``extras`` carries the level-1 general-stream features of both inputs
        when the general encoder ran (used by the distillation term).
        """
        mv = as_voxels(moving)
        fx = as_voxels(fixed)
        pyr_m, pyr_m_s = self.feature_pyramids(mv, mode)
        pyr_f, pyr_f_s = self.feature_pyramids(fx, mode)
        extras = {}
        if mode == "fuse":
            fused_m = [self.fusion(g, s, i, "fuse") for i, (g, s) in enumerate(zip(pyr_m.levels, pyr_m_s.levels))]
            fused_f = [self.fusion(g, s, i, "fuse") for i, (g, s) in enumerate(zip(pyr_f.levels, pyr_f_s.levels))]
            dec_m = FeaturePyramid(fused_m, "F")
            dec_f = FeaturePyramid(fused_f, "F")
            extras["g1_moving"] = pyr_m.levels[0]
            extras["g1_fixed"] = pyr_f.levels[0]
        else:
            dec_m, dec_f = pyr_m, pyr_f
            if mode == "g":
                extras["g1_moving"] = pyr_m.levels[0]
                extras["g1_fixed"] = pyr_f.levels[0]
        final, per_level = self.decoder.decode(dec_f, dec_m)
        return final, per_level, extras

    def distillation_term(self, vox, g1_features: torch.Tensor, loss_cfg: LossConfig) -> torch.Tensor:
        """Alignment of level-1 general features with the frozen reference.

        The reference features are reduced to the same channel count by a
        per-volume principal-component projection, then paired channel-wise.
        """
        ref = reference_features(as_voxels(vox), self.reference)
        reduced = pca_reduce(ref, g1_features.shape[0])
        return distill_alignment_loss(g1_features, reduced, loss_cfg)
