"""Command-line front end: synthesize, train, register, adapt, evaluate.

Exit codes: 0 on success, 1 on runtime errors, 2 on usage errors. All
outputs land under --out; a relative --out is resolved against the
MATCHREG_OUT environment variable when it is set.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field, asdict

from .validation import ContractViolation

CONFIG_SECTIONS = ("model", "loss", "train", "synth")


@dataclass
class RunConfig:
    """All tunables, overridable from an INI-style key=value config file."""

    channels: tuple = (8, 16, 24, 32, 48)
    sem_n: int = 7
    heads: tuple = (1, 2, 2, 4, 4)
    max_level_disp: float = 8.0
    reference_channels: int = 32
    ncc_window: int = 9
    ssim_window: int = 7
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03
    mi_bins: int = 32
    reg_weight: float = 1.0
    lr: float = 1e-4
    epochs: tuple = (30, 20, 10)
    mi_active_fraction: float = 0.2
    one_shot_iters: tuple = (5, 10, 20)
    max_mag: float = 4.0
    smooth_sigma: float = 4.0
    seed: int = 0

    _FIELD_SECTIONS = {
        "model": ("channels", "sem_n", "heads", "max_level_disp", "reference_channels"),
        "loss": ("ncc_window", "ssim_window", "ssim_k1", "ssim_k2", "mi_bins", "reg_weight"),
        "train": ("lr", "epochs", "mi_active_fraction", "one_shot_iters", "seed"),
        "synth": ("max_mag", "smooth_sigma"),
    }

    @staticmethod
    def from_file(path) -> "RunConfig":
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ContractViolation(f"cannot read config file {path}")
        cfg = RunConfig()
        for section, names in RunConfig._FIELD_SECTIONS.items():
            if not parser.has_section(section):
                continue
            for key in parser[section]:
                if key not in names:
                    raise ContractViolation(f"unknown config key [{section}] {key}")
                default = getattr(cfg, key)
                raw = parser[section][key]
                if isinstance(default, tuple):
                    parts = [p.strip() for p in raw.split(",") if p.strip()]
                    conv = float if any(isinstance(v, float) for v in default) else int
                    setattr(cfg, key, tuple(conv(p) for p in parts))
                elif isinstance(default, bool):
                    setattr(cfg, key, parser[section].getboolean(key))
                elif isinstance(default, int):
                    setattr(cfg, key, int(raw))
                elif isinstance(default, float):
                    setattr(cfg, key, float(raw))
                else:
                    setattr(cfg, key, raw)
        return cfg

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def _resolve_out(out):
    root = os.environ.get("MATCHREG_OUT")
    if root and not os.path.isabs(out):
        return os.path.join(root, out)
    return out


def _build_state(cfg: RunConfig, dims, seed):
    from .losses import LossConfig
    from .model import NetworkConfig
    from .trainer import TrainConfig, init_state

    net = NetworkConfig(
        input_dims=dims,
        channels=cfg.channels,
        sem_n=cfg.sem_n,
        heads=cfg.heads,
        max_level_disp=cfg.max_level_disp,
        reference_channels=cfg.reference_channels,
        seed=seed,
    )
    loss = LossConfig(
        ncc_window=cfg.ncc_window,
        ssim_window=cfg.ssim_window,
        ssim_k1=cfg.ssim_k1,
        ssim_k2=cfg.ssim_k2,
        mi_bins=cfg.mi_bins,
        reg_weight=cfg.reg_weight,
    )
    train = TrainConfig(
        lr=cfg.lr,
        epochs=cfg.epochs,
        mi_active_fraction=cfg.mi_active_fraction,
        one_shot_iters=cfg.one_shot_iters,
        seed=seed,
    )
    return init_state(net, loss, train)


def cmd_synth(args) -> int:
    from .synthdata import DOMAINS, make_pair_dataset, save_pair_dataset

    out = _resolve_out(args.out)
    if os.path.exists(out) and os.listdir(out) and not args.force:
        print(f"error: output dir {out} exists; pass --force to overwrite", file=sys.stderr)
        return 1
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    spec = DOMAINS[args.domain]
    dims = (args.dims,) * 3

    def emit(count, seed, directory):
        pairs = make_pair_dataset(spec, count, dims, cfg.max_mag, cfg.smooth_sigma, seed)
        meta = {
            "domain": spec.name,
            "dims": list(dims),
            "seed": seed,
            "count": count,
            "max_mag": cfg.max_mag,
            "smooth_sigma": cfg.smooth_sigma,
        }
        save_pair_dataset(pairs, directory, meta)
        print(f"wrote {count} pairs to {directory}")

    if args.test_count > 0:
        emit(args.count, args.seed, os.path.join(out, "train"))
        emit(args.test_count, args.seed + 1_000_000, os.path.join(out, "test"))
    else:
        emit(args.count, args.seed, out)
    return 0


def cmd_train(args) -> int:
    from .synthdata import load_pair_dataset
    from .trainer import load_checkpoint, save_checkpoint, train_stage

    out = _resolve_out(args.out)
    os.makedirs(out, exist_ok=True)
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    pairs = load_pair_dataset(args.data)
    stages = (1, 2, 3) if args.stage == "all" else (int(args.stage),)

    if stages[0] == 1:
        state = _build_state(cfg, pairs[0].moving.dims, args.seed)
    else:
        prev = os.path.join(out, f"stage{stages[0] - 1}.ckpt")
        if not os.path.exists(prev):
            print(f"error: stage {stages[0]} needs checkpoint {prev}", file=sys.stderr)
            return 1
        state = load_checkpoint(prev)

    log = []
    for stage in stages:
        train_stage(stage, pairs, state, log=log)
        ckpt = os.path.join(out, f"stage{stage}.ckpt")
        save_checkpoint(state, ckpt)
        print(f"stage {stage} complete -> {ckpt}")
    loss_csv = os.path.join(out, "losses.csv")
    mode = "a" if args.stage != "all" and os.path.exists(loss_csv) and stages[0] > 1 else "w"
    with open(loss_csv, mode, encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["stage", "epoch", "pair", "loss"])
        for row in log:
            writer.writerow([row[0], row[1], pairs[row[2]].name, row[3]])
    print(f"loss log -> {loss_csv}")
    return 0


def cmd_register(args) -> int:
    from .evalsuite import MetricsReport, pair_metrics
    from .synthdata import load_pair_dataset, write_field
    from .trainer import infer, load_checkpoint

    out = _resolve_out(args.out)
    os.makedirs(out, exist_ok=True)
    state = load_checkpoint(args.ckpt)
    pairs = load_pair_dataset(args.data)
    report = MetricsReport()
    for p in pairs:
        start = time.perf_counter()
        fld = infer(state, p.moving, p.fixed)
        seconds = time.perf_counter() - start
        write_field(fld, os.path.join(out, f"{p.name}_field"))
        report.records.append(pair_metrics(p.moving, p.fixed, fld, p.name, p.domain, 0, seconds))
    report.write_records(os.path.join(out, "report.jsonl"))
    report.write_csv(os.path.join(out, "report.csv"))
    dscs = [r.mean_dsc for r in report.records]
    print(f"registered {len(pairs)} pairs; mean DSC {sum(dscs) / len(dscs):.4f}")
    return 0


def cmd_adapt(args) -> int:
    from .evalsuite import MetricsReport, pair_metrics
    from .synthdata import load_pair_dataset, write_field
    from .trainer import file_hash, infer, load_checkpoint, one_shot_adapt

    out = _resolve_out(args.out)
    os.makedirs(out, exist_ok=True)
    iters = sorted({int(x) for x in args.iters.split(",") if x.strip() != ""})
    hash_before = file_hash(args.ckpt)
    state = load_checkpoint(args.ckpt)
    pairs = load_pair_dataset(args.data)
    report = MetricsReport()
    for p in pairs:
        for k in iters:
            start = time.perf_counter()
            if k == 0:
                fld = infer(state, p.moving, p.fixed)
            else:
                fld = one_shot_adapt(p, state, k).field
            seconds = time.perf_counter() - start
            write_field(fld, os.path.join(out, f"{p.name}_iter{k}_field"))
            report.records.append(pair_metrics(p.moving, p.fixed, fld, p.name, p.domain, k, seconds))
    report.write_records(os.path.join(out, "report.jsonl"))
    report.write_csv(os.path.join(out, "report.csv"))
    hash_after = file_hash(args.ckpt)
    if hash_before != hash_after:
        print("error: base checkpoint changed during adaptation", file=sys.stderr)
        return 1
    print(f"adapted {len(pairs)} pairs at iters {iters}; base checkpoint unchanged")
    return 0


def cmd_evaluate(args) -> int:
    from .evalsuite import write_summary_csv

    out = _resolve_out(args.out)
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    groups = {}
    for path in args.reports:
        label = os.path.splitext(os.path.basename(path))[0]
        with open(path, "r", encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                key = (label, int(row["iters"]))
                groups.setdefault(key, []).append(row)
    rows = []
    for (label, iters), recs in sorted(groups.items()):
        def stats(name):
            vals = [float(r[name]) for r in recs if r[name] not in ("", "nan")]
            vals = [v for v in vals if v == v]
            if not vals:
                return float("nan"), float("nan")
            mean = sum(vals) / len(vals)
            var = sum((v - mean) ** 2 for v in vals) / len(vals)
            return mean, var ** 0.5

        dsc = stats("mean_dsc")
        assd_ = stats("mean_assd")
        jac = stats("neg_jac_frac")
        sec = stats("seconds")
        rows.append(
            {
                "domain": label,
                "iters": iters,
                "n": len(recs),
                "dsc_mean": dsc[0],
                "dsc_std": dsc[1],
                "assd_mean": assd_[0],
                "assd_std": assd_[1],
                "neg_jac_mean": jac[0],
                "neg_jac_std": jac[1],
                "seconds_mean": sec[0],
                "seconds_std": sec[1],
            }
        )
    write_summary_csv(rows, out)
    print(f"summary ({len(rows)} rows) -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="matchreg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic pair dataset")
    p.add_argument("--domain", choices=("A", "B"), required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--dims", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--test-count", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.add_argument("--config")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the staged training schedule")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage", choices=("1", "2", "3", "all"), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="register pairs without adaptation")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("adapt", help="one-shot adaptation per pair")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", default="0,5,10,20")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("evaluate", help="aggregate report CSVs into a summary table")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ContractViolation, FileNotFoundError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures still map to exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
