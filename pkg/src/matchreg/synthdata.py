"""Procedural two-domain labeled volumes, smooth deformations, and file I/O.

Domain A is a body of nested ellipsoidal "organs" (4 labels); domain B is a
set of concentric "brain-like" shells (3 labels) with a different intensity
transfer, which stands in for a cross-domain contrast shift. All generation
is a pure function of (spec, dims, seed).

Volumes are stored as raw little-endian float32 payloads next to a key=value
sidecar header; labels live in a parallel uint16 file.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .validation import ContractViolation, VolumeIOError
from .volgrid import DisplacementField, Volume, jacobian_determinant, warp_volume

FORMAT_VERSION = 1


@dataclass(frozen=True)
class DomainSpec:
    name: str
    structure: str  # "ellipsoids" or "shells"
    n_labels: int
    intensity: tuple  # per-label transfer, index 0 = background
    bias_amplitude: float = 0.12
    noise_sigma: float = 0.02

    def __post_init__(self):
        if len(self.intensity) != self.n_labels + 1:
            raise ContractViolation("intensity transfer needs one entry per label plus background")
        if not all(0.0 <= v <= 1.0 for v in self.intensity):
            raise ContractViolation("intensity transfer values must lie in [0, 1]")


DOMAIN_A = DomainSpec("A", "ellipsoids", 4, (0.10, 0.80, 0.50, 0.30, 0.65))
DOMAIN_B = DomainSpec("B", "shells", 3, (0.55, 0.20, 0.85, 0.40))

DOMAINS = {"A": DOMAIN_A, "B": DOMAIN_B}


@dataclass
class SynthPair:
    moving: Volume
    fixed: Volume
    gt_field: DisplacementField
    seed: int
    initial_mean_dsc: float = float("nan")
    name: str = ""
    domain: str = ""


def gen_smooth_field(dims, max_mag: float, smooth_sigma: float, seed: int) -> DisplacementField:
    """Gaussian-smoothed white noise rescaled so the largest |component| is max_mag."""
    dims = tuple(dims)
    if max_mag >= min(dims) / 4:
        raise ContractViolation(f"max_mag {max_mag} must stay below min(dims)/4 = {min(dims) / 4}")
    if max_mag == 0:
        return DisplacementField.zeros(dims)
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((3,) + dims)
    u = np.stack([gaussian_filter(u[c], smooth_sigma, mode="nearest") for c in range(3)])
    peak = np.abs(u).max()
    if peak > 0:
        u = u * (max_mag / peak)
    return DisplacementField(torch.from_numpy(u.astype(np.float32)))


def _ellipsoid_labels(dims, rng) -> np.ndarray:
    """Nested axis-aligned ellipsoids; deeper containment wins."""
    grid = np.stack(np.meshgrid(*[np.arange(d) for d in dims], indexing="ij"), axis=0).astype(float)
    center = np.array(dims, dtype=float) / 2 + rng.uniform(-1.5, 1.5, size=3)
    base = np.array(dims, dtype=float) * np.array([0.38, 0.40, 0.34])
    labels = np.zeros(dims, dtype=np.int64)
    for k, scale in enumerate((1.0, 0.62, 0.40, 0.20), start=1):
        axes = base * scale * rng.uniform(0.9, 1.1, size=3)
        c = center + rng.uniform(-1.0, 1.0, size=3) * (0 if k == 1 else 1)
        r2 = sum(((grid[a] - c[a]) / axes[a]) ** 2 for a in range(3))
        labels[r2 <= 1.0] = k
    return labels


def _shell_labels(dims, rng) -> np.ndarray:
    """Concentric rings: outer ring 1, middle ring 2, inner core 3."""
    grid = np.stack(np.meshgrid(*[np.arange(d) for d in dims], indexing="ij"), axis=0).astype(float)
    center = np.array(dims, dtype=float) / 2 + rng.uniform(-1.5, 1.5, size=3)
    stretch = rng.uniform(0.9, 1.1, size=3)
    r = np.sqrt(sum(((grid[a] - center[a]) * stretch[a]) ** 2 for a in range(3)))
    r1 = 0.40 * min(dims) * rng.uniform(0.95, 1.05)
    r2 = 0.28 * min(dims) * rng.uniform(0.95, 1.05)
    r3 = 0.15 * min(dims) * rng.uniform(0.95, 1.05)
    labels = np.zeros(dims, dtype=np.int64)
    labels[r <= r1] = 1
    labels[r <= r2] = 2
    labels[r <= r3] = 3
    return labels


def gen_domain_sample(spec: DomainSpec, dims, seed: int, noise: bool = True) -> Volume:
    """One labeled volume: structure labels, intensity transfer, bias, noise."""
    dims = tuple(dims)
    if min(dims) < 16:
        raise ContractViolation(f"dims must be >= 16 per axis, got {dims}")
    rng = np.random.default_rng(seed)
    if spec.structure == "ellipsoids":
        labels = _ellipsoid_labels(dims, rng)
    elif spec.structure == "shells":
        labels = _shell_labels(dims, rng)
    else:
        raise ContractViolation(f"unknown structure family {spec.structure!r}")
    transfer = np.asarray(spec.intensity, dtype=np.float64)
    vox = transfer[labels]
    if spec.bias_amplitude > 0:
        g = gaussian_filter(rng.standard_normal(dims), min(dims) / 4, mode="nearest")
        peak = np.abs(g).max()
        if peak > 0:
            g = g / peak
        vox = vox * (1.0 + spec.bias_amplitude * g)
    if noise and spec.noise_sigma > 0:
        vox = vox + rng.normal(0.0, spec.noise_sigma, size=dims)
    vox = np.clip(vox, 0.0, 1.0)
    return Volume(torch.from_numpy(vox.astype(np.float32)), labels=torch.from_numpy(labels))


def _mean_dice(a: torch.Tensor, b: torch.Tensor, n_labels: int) -> float:
    from .evalsuite import dice

    vals = [dice(a, b, k) for k in range(1, n_labels + 1)]
    return float(np.mean(vals))


def make_pair_dataset(spec: DomainSpec, count: int, dims, max_mag: float = 4.0,
                      smooth_sigma: float = 4.0, seed: int = 0,
                      max_retries: int = 10) -> List[SynthPair]:
    """Template + smooth warp pairs with fold-free ground-truth fields.

    Per pair: the fixed image is the (noised) template; the moving image is
    the template warped by a fresh smooth field, with independent noise.
    Labels follow nearest-neighbor. A ground-truth field whose Jacobian is
    anywhere non-positive is regenerated from a sub-seed, a bounded number
    of times.
    """
    if count < 1:
        raise ContractViolation("count must be >= 1")
    dims = tuple(dims)
    pairs = []
    for i in range(count):
        pair_seed = seed * 100003 + i
        template = gen_domain_sample(spec, dims, pair_seed, noise=False)
        f = None
        for attempt in range(max_retries):
            candidate = gen_smooth_field(dims, max_mag, smooth_sigma, pair_seed + 7919 * (attempt + 1))
            det = jacobian_determinant(candidate)
            if (det <= 0).sum().item() == 0:
                f = candidate
                break
        if f is None:
            raise RuntimeError(f"could not draw a fold-free field after {max_retries} tries")
        rng = np.random.default_rng(pair_seed + 1)
        moved = warp_volume(template, f, "trilinear")

        def with_noise(v: Volume) -> Volume:
            if spec.noise_sigma <= 0:
                return v
            noise = rng.normal(0.0, spec.noise_sigma, size=dims)
            vox = np.clip(v.voxels.numpy().astype(np.float64) + noise, 0.0, 1.0)
            return Volume(torch.from_numpy(vox.astype(np.float32)), v.spacing, v.labels)

        fixed = with_noise(template)
        moving = with_noise(moved)
        initial = _mean_dice(moving.labels, fixed.labels, spec.n_labels)
        pairs.append(SynthPair(moving, fixed, f, pair_seed, initial, f"pair_{i:03d}", spec.name))
    return pairs


# ---------------------------------------------------------------------------
# file formats


def _base_path(path) -> str:
    path = os.fspath(path)
    return path[:-4] if path.endswith((".vox", ".hdr", ".lab")) else path


def write_volume(v: Volume, path) -> str:
    """Write voxels (+ labels) and the sidecar header; returns the base path."""
    base = _base_path(path)
    vox = v.voxels.detach().cpu().to(torch.float32).numpy()
    with open(base + ".vox", "wb") as fh:
        fh.write(vox.astype("<f4", copy=False).tobytes(order="C"))
    lines = [
        f"format_version={FORMAT_VERSION}",
        "kind=volume",
        "dims=" + ",".join(str(d) for d in vox.shape),
        "spacing=" + ",".join(repr(float(s)) for s in v.spacing),
        "dtype=float32",
    ]
    if v.labels is not None:
        lab = v.labels.cpu().numpy()
        if lab.min() < 0 or lab.max() > np.iinfo(np.uint16).max:
            raise VolumeIOError("labels must fit in uint16")
        with open(base + ".lab", "wb") as fh:
            fh.write(lab.astype("<u2").tobytes(order="C"))
        lines.append(f"labels={os.path.basename(base)}.lab")
        lines.append("label_dtype=uint16")
    with open(base + ".hdr", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return base


def _read_header(base) -> dict:
    try:
        with open(base + ".hdr", "r", encoding="utf-8") as fh:
            entries = {}
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise VolumeIOError(f"{base}.hdr: malformed line {line!r}")
                key, _, value = line.partition("=")
                entries[key.strip()] = value.strip()
            return entries
    except OSError as exc:
        raise VolumeIOError(f"cannot read header {base}.hdr: {exc}") from exc


def read_volume(path) -> Volume:
    base = _base_path(path)
    hdr = _read_header(base)
    if hdr.get("format_version") != str(FORMAT_VERSION):
        raise VolumeIOError(f"{base}.hdr: unsupported format_version {hdr.get('format_version')}")
    if hdr.get("dtype", "float32") != "float32":
        raise VolumeIOError(f"{base}.hdr: unsupported dtype {hdr.get('dtype')}")
    dims = tuple(int(x) for x in hdr["dims"].split(","))
    spacing = tuple(float(x) for x in hdr.get("spacing", "1.0,1.0,1.0").split(","))
    expected = int(np.prod(dims)) * 4
    with open(base + ".vox", "rb") as fh:
        raw = fh.read()
    if len(raw) != expected:
        raise VolumeIOError(f"{base}.vox: payload is {len(raw)} bytes, header implies {expected}")
    vox = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    labels = None
    if "labels" in hdr:
        lab_path = os.path.join(os.path.dirname(base), hdr["labels"])
        with open(lab_path, "rb") as fh:
            lraw = fh.read()
        if len(lraw) != int(np.prod(dims)) * 2:
            raise VolumeIOError(f"{lab_path}: label payload size mismatch")
        labels = torch.from_numpy(np.frombuffer(lraw, dtype="<u2").reshape(dims).astype(np.int64))
    return Volume(torch.from_numpy(vox), spacing, labels)


def write_field(f: DisplacementField, path) -> str:
    base = _base_path(path)
    u = f.u.detach().cpu().to(torch.float32).numpy()
    with open(base + ".vox", "wb") as fh:
        fh.write(u.astype("<f4", copy=False).tobytes(order="C"))
    with open(base + ".hdr", "w", encoding="utf-8") as fh:
        fh.write(
            "\n".join(
                [
                    f"format_version={FORMAT_VERSION}",
                    "kind=field",
                    "dims=" + ",".join(str(d) for d in u.shape[1:]),
                    "channels=3",
                    "dtype=float32",
                ]
            )
            + "\n"
        )
    return base


def read_field(path) -> DisplacementField:
    base = _base_path(path)
    hdr = _read_header(base)
    if hdr.get("kind") != "field":
        raise VolumeIOError(f"{base}.hdr: not a field file")
    dims = tuple(int(x) for x in hdr["dims"].split(","))
    expected = 3 * int(np.prod(dims)) * 4
    with open(base + ".vox", "rb") as fh:
        raw = fh.read()
    if len(raw) != expected:
        raise VolumeIOError(f"{base}.vox: payload is {len(raw)} bytes, header implies {expected}")
    u = np.frombuffer(raw, dtype="<f4").reshape((3,) + dims).copy()
    return DisplacementField(torch.from_numpy(u))


def save_pair_dataset(pairs: List[SynthPair], out_dir, meta: Optional[dict] = None) -> str:
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for p in pairs:
        write_volume(p.moving, os.path.join(out_dir, f"{p.name}_moving"))
        write_volume(p.fixed, os.path.join(out_dir, f"{p.name}_fixed"))
        write_field(p.gt_field, os.path.join(out_dir, f"{p.name}_gt"))
        records.append(
            {
                "name": p.name,
                "seed": p.seed,
                "domain": p.domain,
                "initial_mean_dsc": p.initial_mean_dsc,
                "moving": f"{p.name}_moving.vox",
                "fixed": f"{p.name}_fixed.vox",
                "gt_field": f"{p.name}_gt.vox",
            }
        )
    manifest = {"format_version": FORMAT_VERSION, "pairs": records}
    manifest.update(meta or {})
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def load_pair_dataset(data_dir) -> List[SynthPair]:
    with open(os.path.join(data_dir, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    pairs = []
    for rec in manifest["pairs"]:
        moving = read_volume(os.path.join(data_dir, rec["moving"]))
        fixed = read_volume(os.path.join(data_dir, rec["fixed"]))
        gt = read_field(os.path.join(data_dir, rec["gt_field"]))
        pairs.append(
            SynthPair(moving, fixed, gt, rec["seed"], rec.get("initial_mean_dsc", float("nan")),
                      rec["name"], rec.get("domain", ""))
        )
    return pairs
