"""sklearn-style facade over the registration engine.

``fit`` consumes a list of (moving, fixed) volume pairs and runs the full
three-stage schedule; ``predict`` maps pairs to displacement fields and
``transform`` to warped moving volumes. ``adapt`` exposes the per-pair
one-shot fine-tune. All constructor arguments are plain values, so
``get_params``/``set_params`` and ``clone`` work as usual.
"""

from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np
import torch
from sklearn.base import BaseEstimator

from .evalsuite import dice
from .losses import LossConfig
from .model import NetworkConfig
from .trainer import TrainConfig, infer, init_state, one_shot_adapt, train_stage
from .validation import ContractViolation
from .volgrid import DisplacementField, Volume, warp_volume


def as_volume(x) -> Volume:
    if isinstance(x, Volume):
        return x
    if torch.is_tensor(x) or isinstance(x, np.ndarray):
        return Volume(torch.as_tensor(x, dtype=torch.float32))
    raise ContractViolation(f"cannot interpret {type(x).__name__} as a volume")


def check_pairs(X) -> List[Tuple[Volume, Volume]]:
    """Validate a pair list: every item yields same-dim (moving, fixed) volumes."""
    if not isinstance(X, (list, tuple)) or len(X) == 0:
        raise ContractViolation("expected a non-empty list of (moving, fixed) pairs")
    pairs = []
    dims = None
    for item in X:
        if hasattr(item, "moving") and hasattr(item, "fixed"):
            m, f = item.moving, item.fixed
        else:
            try:
                m, f = item
            except (TypeError, ValueError) as exc:
                raise ContractViolation("each item must be a (moving, fixed) pair") from exc
        m, f = as_volume(m), as_volume(f)
        if m.dims != f.dims:
            raise ContractViolation(f"pair dims differ: {m.dims} vs {f.dims}")
        if dims is None:
            dims = m.dims
        elif m.dims != dims:
            raise ContractViolation(f"all pairs must share dims; saw {dims} and {m.dims}")
        pairs.append((m, f))
    return pairs


class PairRegistrar(BaseEstimator):
    """Deformable volume-pair registration as a fit/predict estimator."""

    def __init__(self, channels=(8, 16, 24, 32, 48), sem_n=7, heads=(1, 2, 2, 4, 4),
                 ncc_window=9, ssim_window=7, mi_bins=32, reg_weight=1.0,
                 lr=1e-4, epochs=(30, 20, 10), mi_active_fraction=0.2,
                 one_shot_iters=(5, 10, 20), seed=0):
        self.channels = channels
        self.sem_n = sem_n
        self.heads = heads
        self.ncc_window = ncc_window
        self.ssim_window = ssim_window
        self.mi_bins = mi_bins
        self.reg_weight = reg_weight
        self.lr = lr
        self.epochs = epochs
        self.mi_active_fraction = mi_active_fraction
        self.one_shot_iters = one_shot_iters
        self.seed = seed

    def _configs(self, dims):
        net = NetworkConfig(input_dims=dims, channels=tuple(self.channels),
                            sem_n=self.sem_n, heads=tuple(self.heads), seed=self.seed)
        loss = LossConfig(ncc_window=self.ncc_window, ssim_window=self.ssim_window,
                          mi_bins=self.mi_bins, reg_weight=self.reg_weight)
        train = TrainConfig(lr=self.lr, epochs=tuple(self.epochs),
                            mi_active_fraction=self.mi_active_fraction,
                            one_shot_iters=tuple(self.one_shot_iters), seed=self.seed)
        return net, loss, train

    def fit(self, X, y=None):
        pairs = check_pairs(X)
        torch.manual_seed(self.seed)
        self.state_ = init_state(*self._configs(pairs[0][0].dims))
        self.loss_log_ = []
        for stage in (1, 2, 3):
            train_stage(stage, pairs, self.state_, log=self.loss_log_)
        return self

    def _check_fitted(self):
        if not hasattr(self, "state_"):
            raise ContractViolation("this registrar is not fitted yet; call fit first")

    def predict(self, X) -> List[DisplacementField]:
        """Displacement fields aligning each moving volume to its fixed one."""
        self._check_fitted()
        return [infer(self.state_, m, f) for m, f in check_pairs(X)]

    def transform(self, X) -> List[Volume]:
        """Moving volumes warped into their fixed counterparts' frames."""
        self._check_fitted()
        return [warp_volume(m, infer(self.state_, m, f)) for m, f in check_pairs(X)]

    def adapt(self, pair, iters):
        """One-shot fine-tune on a single pair; the fitted state is untouched."""
        self._check_fitted()
        (m, f), = check_pairs([pair])
        return one_shot_adapt((m, f), self.state_, iters)

    def score(self, X, y=None) -> float:
        """Mean label overlap (DSC) after registration, over all labeled pairs."""
        self._check_fitted()
        pairs = check_pairs(X)
        values = []
        for m, f in pairs:
            if m.labels is None or f.labels is None:
                continue
            fld = infer(self.state_, m, f)
            warped = warp_volume(m, fld, "nearest")
            labels = sorted(set(torch.unique(f.labels).tolist()) - {0})
            values.extend(dice(warped.labels, f.labels, k) for k in labels)
        if not values:
            raise ContractViolation("score needs at least one labeled pair")
        return float(np.mean(values))
