"""Differentiable similarity and regularization terms for staged training.

Window statistics for the local correlation and structural-similarity terms
are taken over windows clipped at the grid border (the window of a border
voxel is the part that lies inside the grid), so every voxel contributes one
window and border windows use their true counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .validation import ContractViolation, as_field_tensor, as_voxels, check_odd_window, check_same_dims

_LOG_FLOOR = 1e-30


@dataclass
class LossConfig:
    ncc_window: int = 9
    ssim_window: int = 7
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03
    mi_bins: int = 32
    mi_sigma: float = None  # default: half bin width
    reg_weight: float = 1.0  # the similarity/regularization trade-off weight
    epsilon: float = 1e-8

    def __post_init__(self):
        check_odd_window(self.ncc_window, "ncc_window")
        check_odd_window(self.ssim_window, "ssim_window")
        if self.mi_bins < 4:
            raise ContractViolation(f"mi_bins must be >= 4, got {self.mi_bins}")
        if self.reg_weight < 0:
            raise ContractViolation("reg_weight must be >= 0")
        if self.mi_sigma is None:
            self.mi_sigma = 0.5 / self.mi_bins


def _window_means(t: torch.Tensor, win: int):
    """Clipped-window means of t, t*t for an (H, W, L) grid."""
    pad = win // 2
    x = t.unsqueeze(0).unsqueeze(0)
    mean = F.avg_pool3d(x, win, stride=1, padding=pad, count_include_pad=False)
    return mean.squeeze(0).squeeze(0)


def ncc_loss(a, b, cfg: LossConfig = None) -> torch.Tensor:
    """1 - mean squared local normalized cross-correlation.

    Per-window correlation is squared, so the result lies in [0, 1] and is
    invariant to per-image affine intensity changes. Window variances are
    floored at cfg.epsilon, which keeps constant windows finite (their
    correlation contributes 0).
    """
    cfg = cfg or LossConfig()
    ta, tb = as_voxels(a), as_voxels(b)
    check_same_dims(ta.shape, tb.shape, "images")
    w = cfg.ncc_window
    mu_a = _window_means(ta, w)
    mu_b = _window_means(tb, w)
    mu_aa = _window_means(ta * ta, w)
    mu_bb = _window_means(tb * tb, w)
    mu_ab = _window_means(ta * tb, w)
    var_a = (mu_aa - mu_a * mu_a).clamp_min(cfg.epsilon)
    var_b = (mu_bb - mu_b * mu_b).clamp_min(cfg.epsilon)
    cross = mu_ab - mu_a * mu_b
    cc2 = cross * cross / (var_a * var_b)
    return 1.0 - cc2.mean()


def ssim_loss(a, b, cfg: LossConfig = None) -> torch.Tensor:
    """1 - mean local SSIM with uniform windows and dynamic range 1.0."""
    cfg = cfg or LossConfig()
    ta, tb = as_voxels(a), as_voxels(b)
    check_same_dims(ta.shape, tb.shape, "images")
    w = cfg.ssim_window
    c1 = cfg.ssim_k1 ** 2
    c2 = cfg.ssim_k2 ** 2
    mu_a = _window_means(ta, w)
    mu_b = _window_means(tb, w)
    var_a = _window_means(ta * ta, w) - mu_a * mu_a
    var_b = _window_means(tb * tb, w) - mu_b * mu_b
    cov = _window_means(ta * tb, w) - mu_a * mu_b
    ssim = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return 1.0 - ssim.mean()


def _soft_weights(z: torch.Tensor, bins: int, sigma: float) -> torch.Tensor:
    """(N, bins) Gaussian soft assignment of unit-interval samples to bin centers."""
    centers = (torch.arange(bins, dtype=z.dtype, device=z.device) + 0.5) / bins
    logits = -((z.unsqueeze(1) - centers.unsqueeze(0)) ** 2) / (2 * sigma * sigma)
    return torch.softmax(logits, dim=1)


def mi_score(x, y, cfg: LossConfig = None) -> torch.Tensor:
    """Plug-in mutual information of a Parzen soft joint histogram (nats).

    Both sample sets are min-max normalized to [0, 1], softly binned with a
    Gaussian kernel, and MI is the KL divergence of the soft joint from the
    product of its own marginals, so the value is >= 0 up to float rounding.
    Differentiable w.r.t. the sample values.
    """
    cfg = cfg or LossConfig()
    tx = torch.as_tensor(x).reshape(-1)
    ty = torch.as_tensor(y).reshape(-1)
    if tx.numel() != ty.numel():
        raise ContractViolation("mi_score needs equal sample counts")
    if tx.numel() < 2:
        raise ContractViolation("mi_score needs at least 2 samples")

    def normalize(t):
        lo, hi = t.min(), t.max()
        return (t - lo) / (hi - lo).clamp_min(cfg.epsilon)

    wx = _soft_weights(normalize(tx), cfg.mi_bins, cfg.mi_sigma)
    wy = _soft_weights(normalize(ty), cfg.mi_bins, cfg.mi_sigma)
    joint = wx.t() @ wy / tx.numel()
    px = joint.sum(dim=1, keepdim=True)
    py = joint.sum(dim=0, keepdim=True)
    log_ratio = torch.log(joint.clamp_min(_LOG_FLOOR)) - torch.log((px * py).clamp_min(_LOG_FLOOR))
    return (joint * log_ratio).sum()


def smoothness_loss(f) -> torch.Tensor:
    """First-order diffusion penalty on a displacement field.

    Average over the three axes of the mean squared forward difference of all
    field components along that axis. Zero for any constant field.
    """
    u = as_field_tensor(f)
    if min(u.shape[1:]) < 2:
        raise ContractViolation("smoothness needs dims >= 2 per axis")
    terms = []
    for axis in range(1, 4):
        d = u.diff(dim=axis)
        terms.append((d * d).mean())
    return sum(terms) / 3.0


def stage_loss(stage: int, fixed, warped, f, mi_term=None, cfg: LossConfig = None) -> torch.Tensor:
    """Total objective for one training stage.

    Stage 1 pairs local correlation with the smoothness penalty and, when the
    distillation schedule is active, an extra additive term. Stage 2 swaps the
    similarity for SSIM; stage 3 is stage 1 without the extra term.
    """
    cfg = cfg or LossConfig()
    if stage not in (1, 2, 3):
        raise ContractViolation(f"stage must be 1, 2, or 3, got {stage}")
    if mi_term is not None and stage != 1:
        raise ContractViolation("the distillation term enters the loss only in stage 1")
    sim = ssim_loss(fixed, warped, cfg) if stage == 2 else ncc_loss(fixed, warped, cfg)
    total = sim + cfg.reg_weight * smoothness_loss(f)
    if mi_term is not None:
        total = total + mi_term
    return total
