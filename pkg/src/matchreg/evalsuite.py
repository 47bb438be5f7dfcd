"""Registration quality metrics and per-experiment report assembly.

A voxel belongs to a label's boundary when it carries the label and at least
one of its six face neighbors does not (voxels on the grid border count).
Surface distances use the exact Euclidean distance transform, which agrees
with the brute-force all-pairs computation to floating-point precision.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional

import numpy as np
import torch
from scipy.ndimage import binary_erosion, distance_transform_edt, generate_binary_structure

from .trainer import ModelState, infer, one_shot_adapt
from .validation import ContractViolation, check_same_dims
from .volgrid import DisplacementField, Volume, jacobian_determinant, warp_tensor


class MetricUndefined(ValueError):
    """A metric has no value for this input (e.g. surface of an empty mask)."""


def _labels_array(a) -> np.ndarray:
    t = getattr(a, "labels", a)
    if torch.is_tensor(t):
        t = t.cpu().numpy()
    return np.asarray(t)


def dice(a, b, label: int) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks agree perfectly (1.0)."""
    ma = _labels_array(a) == label
    mb = _labels_array(b) == label
    check_same_dims(ma.shape, mb.shape, "label grids")
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / total


def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Labeled voxels with an unlabeled 6-neighbor or sitting on the border."""
    struct = generate_binary_structure(3, 1)
    interior = binary_erosion(mask, structure=struct, border_value=0)
    return mask & ~interior


def assd(a, b, label: int, spacing=(1.0, 1.0, 1.0)) -> float:
    """Average symmetric surface distance between two masks, in spacing units."""
    ma = _labels_array(a) == label
    mb = _labels_array(b) == label
    check_same_dims(ma.shape, mb.shape, "label grids")
    if not ma.any() or not mb.any():
        raise MetricUndefined(f"label {label} has an empty mask")
    ba = boundary_mask(ma)
    bb = boundary_mask(mb)
    dist_to_b = distance_transform_edt(~bb, sampling=spacing)
    dist_to_a = distance_transform_edt(~ba, sampling=spacing)
    total = dist_to_b[ba].sum() + dist_to_a[bb].sum()
    return float(total / (ba.sum() + bb.sum()))


def neg_jacobian_fraction(f) -> float:
    """Fraction of voxels where the local transform folds (det <= 0)."""
    det = jacobian_determinant(f)
    return float((det <= 0).to(torch.float64).mean())


@dataclass
class MetricRecord:
    pair: str
    domain: str
    iters: int
    mean_dsc: float
    per_label_dsc: Dict[str, float]
    mean_assd: float
    neg_jac_frac: float
    seconds: float

    def to_dict(self):
        return asdict(self)


@dataclass
class MetricsReport:
    records: List[MetricRecord] = field(default_factory=list)

    def write_records(self, path):
        """One structured-text (JSON) record per pair per checkpoint."""
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")

    @staticmethod
    def read_records(path) -> "MetricsReport":
        records = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(MetricRecord(**json.loads(line)))
        return MetricsReport(records)

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["pair", "iters", "mean_dsc", "mean_assd", "neg_jac_frac", "seconds"])
            for r in self.records:
                writer.writerow([r.pair, r.iters, r.mean_dsc, r.mean_assd, r.neg_jac_frac, r.seconds])


def pair_metrics(moving: Volume, fixed: Volume, fld: DisplacementField,
                 name="", domain="", iters=0, seconds=0.0) -> MetricRecord:
    """Metrics for one registered pair given the final field."""
    jac = neg_jacobian_fraction(fld)
    if moving.labels is None or fixed.labels is None:
        return MetricRecord(name, domain, iters, float("nan"), {}, float("nan"), jac, seconds)
    warped_labels = warp_tensor(moving.labels.to(fld.u.dtype), fld.u, "nearest").long()
    labels = sorted(set(torch.unique(fixed.labels).tolist()) - {0})
    dscs, assds = {}, []
    for k in labels:
        dscs[str(k)] = dice(warped_labels, fixed.labels, k)
        try:
            assds.append(assd(warped_labels, fixed.labels, k, fixed.spacing))
        except MetricUndefined:
            pass
    mean_dsc = float(np.mean(list(dscs.values()))) if dscs else float("nan")
    mean_assd = float(np.mean(assds)) if assds else float("nan")
    return MetricRecord(name, domain, iters, mean_dsc, dscs, mean_assd, jac, seconds)


def evaluate_pair(pair, state: ModelState, adaptation_iters=(), name=None, domain=None) -> MetricsReport:
    """Register at 0 iterations and at each adaptation checkpoint.

    Each nonzero checkpoint restarts from a pristine copy of ``state``; the
    recorded seconds cover state copy, adaptation, and inference.
    """
    moving, fixed = pair.moving, pair.fixed
    name = name if name is not None else getattr(pair, "name", "")
    domain = domain if domain is not None else getattr(pair, "domain", "")
    checkpoints = sorted(set(int(i) for i in adaptation_iters) - {0})
    report = MetricsReport()

    start = time.perf_counter()
    base_field = infer(state, moving, fixed)
    seconds = time.perf_counter() - start
    report.records.append(pair_metrics(moving, fixed, base_field, name, domain, 0, seconds))

    for k in checkpoints:
        start = time.perf_counter()
        result = one_shot_adapt(pair, state, k)
        seconds = time.perf_counter() - start
        report.records.append(pair_metrics(moving, fixed, result.field, name, domain, k, seconds))
    return report


def summarize(records: List[MetricRecord]) -> List[dict]:
    """Mean and std of each metric per (domain, iters) group."""
    groups: Dict[tuple, List[MetricRecord]] = {}
    for r in records:
        groups.setdefault((r.domain, r.iters), []).append(r)
    rows = []
    for (domain, iters), recs in sorted(groups.items()):
        def stats(values):
            vals = [v for v in values if not np.isnan(v)]
            if not vals:
                return float("nan"), float("nan")
            return float(np.mean(vals)), float(np.std(vals))

        dsc_m, dsc_s = stats([r.mean_dsc for r in recs])
        assd_m, assd_s = stats([r.mean_assd for r in recs])
        jac_m, jac_s = stats([r.neg_jac_frac for r in recs])
        sec_m, sec_s = stats([r.seconds for r in recs])
        rows.append(
            {
                "domain": domain,
                "iters": iters,
                "n": len(recs),
                "dsc_mean": dsc_m,
                "dsc_std": dsc_s,
                "assd_mean": assd_m,
                "assd_std": assd_s,
                "neg_jac_mean": jac_m,
                "neg_jac_std": jac_s,
                "seconds_mean": sec_m,
                "seconds_std": sec_s,
            }
        )
    return rows


def write_summary_csv(rows: List[dict], path):
    if not rows:
        cols = ["domain", "iters", "n"]
    else:
        cols = list(rows[0].keys())
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
