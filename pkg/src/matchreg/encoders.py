"""Siamese pyramid encoders: a general-feature stream and a structural stream.

Both encoders share the same 5-level convolutional skeleton and apply
identical parameters to the moving and fixed inputs. The structural stream
additionally folds a clamped-cosine self-similarity embedding into the
features at every level. A frozen, seeded reference network provides the
distillation target for the general stream; its weights can optionally be
replaced from a file.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import List

import torch
import torch.nn as nn

from . import tensorio
from .losses import LossConfig, mi_score
from .validation import CheckpointError, ContractViolation, as_voxels, check_divisible, check_odd_window

_NORM_GUARD = 1e-24


@dataclass
class FeaturePyramid:
    """Five feature grids with spatial dims halving per level."""

    levels: List[torch.Tensor]
    source: str = "G"  # one of G, S, F

    def __post_init__(self):
        if len(self.levels) != 5:
            raise ContractViolation(f"a pyramid has exactly 5 levels, got {len(self.levels)}")
        base = tuple(self.levels[0].shape[1:])
        for i, lv in enumerate(self.levels):
            expect = tuple(max(d // (2 ** i), 1) for d in base)
            if tuple(lv.shape[1:]) != expect:
                raise ContractViolation(
                    f"level {i + 1} dims {tuple(lv.shape[1:])}, expected {expect}"
                )

    @property
    def dims(self):
        return tuple(self.levels[0].shape[1:])


@dataclass
class SEMConfig:
    """Neighborhood and projection settings for the self-similarity embedding."""

    n: int = 7
    reduced_min: int = 4
    epsilon: float = 1e-8

    def __post_init__(self):
        check_odd_window(self.n, "sem neighborhood n")

    @property
    def radius(self) -> int:
        return (self.n - 1) // 2

    def reduced_channels(self, c: int) -> int:
        return max(self.reduced_min, c // 2)


@dataclass
class EncoderConfig:
    channels: tuple = (8, 16, 24, 32, 48)
    leaky_slope: float = 0.01

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if len(self.channels) != 5 or min(self.channels) < 1:
            raise ContractViolation("channels must be a 5-tuple of positive ints")
        if any(b < a for a, b in zip(self.channels, self.channels[1:])):
            raise ContractViolation("channels must be non-decreasing")


def conv_block(c_in, c_out, stride=1, slope=0.01):
    return nn.Sequential(
        nn.Conv3d(c_in, c_out, 3, stride=stride, padding=1),
        nn.InstanceNorm3d(c_out, affine=True),
        nn.LeakyReLU(slope),
    )


def clamp_neighborhood(n: int, dims) -> int:
    """Largest odd value <= min(n, min spatial dim)."""
    m = min(min(dims), n)
    return m if m % 2 == 1 else m - 1


def _offsets(n):
    D = (n - 1) // 2
    return [(dh, dw, dl)
            for dh in range(-D, D + 1)
            for dw in range(-D, D + 1)
            for dl in range(-D, D + 1)]


def _padded_norms(v, n):
    D = (n - 1) // 2
    padded = nn.functional.pad(v, (D, D, D, D, D, D))
    norm_pad = torch.sqrt((padded * padded).sum(dim=0) + _NORM_GUARD)
    return padded, norm_pad


class _SelfSimilarity(torch.autograd.Function):
    """Clamped-cosine neighborhood similarity with a hand-written backward.

    The autograd graph of the offset loop is large and slow; the analytic
    gradient below costs about two forward passes and is covered by the
    finite-difference suite.
    """

    @staticmethod
    def forward(ctx, v, n, epsilon):
        D = (n - 1) // 2
        H, W, L = v.shape[1:]
        padded, norm_pad = _padded_norms(v, n)
        norm_c = norm_pad[D:D + H, D:D + W, D:D + L]
        outs = []
        for dh, dw, dl in _offsets(n):
            sh, sw, sl = dh + D, dw + D, dl + D
            nb = padded[:, sh:sh + H, sw:sw + W, sl:sl + L]
            dot = (v * nb).sum(dim=0)
            cos = dot / (norm_c * norm_pad[sh:sh + H, sw:sw + W, sl:sl + L] + epsilon)
            outs.append(cos.clamp_min(0.0))
        out = torch.stack(outs, dim=0)
        ctx.save_for_backward(v, out)
        ctx.n = n
        ctx.epsilon = epsilon
        return out

    @staticmethod
    def backward(ctx, grad_out):
        v, out = ctx.saved_tensors
        n, eps = ctx.n, ctx.epsilon
        D = (n - 1) // 2
        H, W, L = v.shape[1:]
        padded, norm_pad = _padded_norms(v, n)
        norm_c = norm_pad[D:D + H, D:D + W, D:D + L]
        grad_v = torch.zeros_like(v)
        grad_p = torch.zeros_like(padded)
        # norm-derivative coefficients for the center and neighbor factors
        coef_c = torch.zeros_like(norm_c)
        coef_p = torch.zeros_like(norm_pad)
        for i, (dh, dw, dl) in enumerate(_offsets(n)):
            sh, sw, sl = dh + D, dw + D, dl + D
            nb = padded[:, sh:sh + H, sw:sw + W, sl:sl + L]
            norm_n = norm_pad[sh:sh + H, sw:sw + W, sl:sl + L]
            den = norm_c * norm_n + eps
            g = grad_out[i] * (out[i] > 0)
            q = g / den
            grad_v += q * nb
            grad_p[:, sh:sh + H, sw:sw + W, sl:sl + L] += q * v
            r = g * out[i] / den  # g * cos / den on the active set
            coef_c -= r * norm_n
            coef_p[sh:sh + H, sw:sw + W, sl:sl + L] -= r * norm_c
        grad_v += coef_c * v / norm_c
        grad_p += coef_p * padded / norm_pad
        grad_v += grad_p[:, D:D + H, D:D + W, D:D + L]
        return grad_v, None, None


def _self_similarity(v: torch.Tensor, n: int, epsilon: float) -> torch.Tensor:
    """Core of the embedding; ``n`` may be any odd value >= 1."""
    return _SelfSimilarity.apply(v, n, epsilon)


def sem_self_similarity(v: torch.Tensor, cfg: SEMConfig) -> torch.Tensor:
    """Clamped cosine similarity of each voxel's vector against its neighborhood.

    ``v`` is (c1, H, W, L); returns (n^3, H, W, L) where the channel for
    offset d = (dh, dw, dl), offsets ordered lexicographically, is
    max(0, <v(x), v(x+d)> / (|v(x)| |v(x+d)| + eps)). Neighbors outside the
    grid count as zero vectors, so their similarity is 0.
    """
    if v.dim() != 4:
        raise ContractViolation(f"expected (c1, H, W, L) features, got {tuple(v.shape)}")
    return _self_similarity(v, cfg.n, cfg.epsilon)


class StructuralEmbedding(nn.Module):
    """Folds neighborhood self-similarity back into a feature grid.

    Pipeline: 1x1x1 projection c -> c1, self-similarity over the (clamped)
    n^3 neighborhood, two convolutions encoding the similarity channels back
    to c1, residual addition with the projected features, and a final
    convolution restoring c channels.
    """

    def __init__(self, channels: int, cfg: SEMConfig, level_dims, slope=0.01):
        super().__init__()
        self.cfg = cfg
        self.n_eff = clamp_neighborhood(cfg.n, level_dims)
        c1 = cfg.reduced_channels(channels)
        self.project = nn.Conv3d(channels, c1, 1)
        self.encode = nn.Sequential(
            nn.Conv3d(self.n_eff ** 3, c1, 3, padding=1),
            nn.LeakyReLU(slope),
            nn.Conv3d(c1, c1, 3, padding=1),
        )
        self.restore = nn.Conv3d(c1, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, c, H, W, L); the similarity stage runs per batch item
        proj = self.project(x)
        sims = torch.stack([_self_similarity(p, self.n_eff, self.cfg.epsilon) for p in proj], dim=0)
        encoded = self.encode(sims)
        return self.restore(proj + encoded)


class PyramidEncoder(nn.Module):
    """Five-level Siamese encoder; optionally with a structural embedding per level.

    Each level applies two blocks of [3x3x3 conv -> instance norm -> leaky
    ReLU]; levels 2..5 open with a stride-2 downsampling block. Input dims
    must be divisible by 16.
    """

    def __init__(self, cfg: EncoderConfig = None, sem: SEMConfig = None, input_dims=(32, 32, 32)):
        super().__init__()
        self.cfg = cfg or EncoderConfig()
        self.sem_cfg = sem
        self.input_dims = tuple(input_dims)
        check_divisible(self.input_dims, 16)
        ch = self.cfg.channels
        slope = self.cfg.leaky_slope
        self.levels = nn.ModuleList()
        self.sems = nn.ModuleList() if sem is not None else None
        prev = 1
        dims = self.input_dims
        for i, c in enumerate(ch):
            stride = 1 if i == 0 else 2
            if i > 0:
                dims = tuple(max(d // 2, 1) for d in dims)
            self.levels.append(
                nn.Sequential(conv_block(prev, c, stride=stride, slope=slope),
                              conv_block(c, c, slope=slope))
            )
            if sem is not None:
                self.sems.append(StructuralEmbedding(c, sem, dims, slope=slope))
            prev = c

    def forward(self, vox) -> FeaturePyramid:
        t = as_voxels(vox)
        check_divisible(t.shape, 16)
        if tuple(t.shape) != self.input_dims:
            raise ContractViolation(
                f"encoder built for dims {self.input_dims}, got {tuple(t.shape)}"
            )
        x = t.unsqueeze(0).unsqueeze(0)
        feats = []
        for i, level in enumerate(self.levels):
            x = level(x)
            if self.sems is not None:
                x = self.sems[i](x)
            feats.append(x.squeeze(0))
        return FeaturePyramid(feats, "S" if self.sems is not None else "G")


class ReferenceEncoder(nn.Module):
    """Frozen stride-1 feature extractor used as the distillation target.

    By default it is randomly initialized from a fixed seed and never
    trained; real pretrained weights can be loaded from a tensor-blob file.
    """

    def __init__(self, out_channels: int = 32, seed: int = 0x5EED):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.net = nn.Sequential(
                nn.Conv3d(1, 16, 3, padding=1),
                nn.LeakyReLU(0.1),
                nn.Conv3d(16, out_channels, 3, padding=1),
                nn.LeakyReLU(0.1),
                nn.Conv3d(out_channels, out_channels, 3, padding=1),
            )
        self.out_channels = out_channels
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, vox) -> torch.Tensor:
        t = as_voxels(vox)
        with torch.no_grad():
            return self.net(t.unsqueeze(0).unsqueeze(0)).squeeze(0)

    def load_weights(self, path):
        tensors, meta = tensorio.read_named_tensors(path)
        own = dict(self.net.named_parameters())
        if set(tensors) != set(own):
            raise CheckpointError(
                f"reference weight file parameter names do not match: "
                f"file has {sorted(tensors)}, encoder expects {sorted(own)}"
            )
        for name, t in tensors.items():
            if tuple(t.shape) != tuple(own[name].shape):
                raise CheckpointError(
                    f"shape mismatch for {name}: file {tuple(t.shape)} vs encoder {tuple(own[name].shape)}"
                )
        with torch.no_grad():
            for name, t in tensors.items():
                own[name].copy_(t.to(own[name].dtype))

    def save_weights(self, path):
        tensorio.write_named_tensors(path, dict(self.net.named_parameters()),
                                     {"kind": "reference-encoder", "out_channels": self.out_channels})


def reference_features(vox, ref: ReferenceEncoder) -> torch.Tensor:
    """Frozen reference features at input resolution; never carries gradients."""
    return ref(vox)


def pca_reduce(feat: torch.Tensor, target_channels: int) -> torch.Tensor:
    """Project each voxel's channel vector onto the top principal directions.

    Voxels are the observations; the (sample) covariance over the volume is
    eigendecomposed and the leading ``target_channels`` directions, ordered by
    descending variance, give the output channels. Directions beyond the
    covariance rank are replaced by zero projections (with a warning).
    """
    c = feat.shape[0]
    n = feat[0].numel()
    if c < target_channels:
        raise ContractViolation(f"cannot reduce {c} channels to {target_channels}")
    if n <= c:
        raise ContractViolation(f"need more voxels ({n}) than channels ({c}) to fit")
    x = feat.reshape(c, -1).t()
    centered = x - x.mean(dim=0, keepdim=True)
    cov = centered.t() @ centered / (n - 1)
    evals, evecs = torch.linalg.eigh(cov)
    order = torch.argsort(evals, descending=True)[:target_channels]
    vals = evals[order]
    vecs = evecs[:, order]
    # fix the sign so output is reproducible across eigensolver runs
    idx = vecs.abs().argmax(dim=0)
    signs = torch.sign(vecs[idx, torch.arange(vecs.shape[1])])
    signs = torch.where(signs == 0, torch.ones_like(signs), signs)
    vecs = vecs * signs
    rank_floor = evals.max().clamp_min(0) * 1e-10
    dead = vals <= rank_floor
    if dead.any():
        warnings.warn(
            f"covariance rank below target: zero-padding {int(dead.sum())} component(s)",
            RuntimeWarning,
        )
        vecs = vecs * (~dead).to(vecs.dtype).unsqueeze(0)
    proj = centered @ vecs
    return proj.t().reshape((target_channels,) + tuple(feat.shape[1:]))


def distill_alignment_loss(g1: torch.Tensor, r: torch.Tensor, cfg: LossConfig = None) -> torch.Tensor:
    """Negative mean per-channel mutual information between two feature grids.

    Channels are paired by index; lower means better aligned. Gradients flow
    to ``g1`` only (the reference side is detached).
    """
    cfg = cfg or LossConfig()
    if g1.shape != r.shape:
        raise ContractViolation(f"feature shapes differ: {tuple(g1.shape)} vs {tuple(r.shape)}")
    r = r.detach()
    terms = [mi_score(g1[c].reshape(-1), r[c].reshape(-1), cfg) for c in range(g1.shape[0])]
    return -sum(terms) / g1.shape[0]
