"""Command-line entry point: ``dcil train | compare | sawtooth | export``.

Exit codes: 0 ok, 2 configuration error, 3 I/O or data error, 4 non-finite loss.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from .config import TRAINERS, TrainConfig, apply_overrides, dump_config, load_config, parse_config
from .data import LOADERS, TEST, TRAIN, Dataset, subset
from .errors import ConfigError, DataFormatError, NumericalError
from .metrics import (PROBE_COLUMNS, RunRecord, emit_csv, emit_probe_svg, emit_run_csv, emit_run_svg,
                      mean_refresh_drop, refresh_drops, sparsity_audit, stability_report)
from .trainers import fit

log = logging.getLogger("dcil")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


# --------------------------------------------------------------------------- helpers

def _parse_sets(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = value
    return out


def _effective_config(args) -> TrainConfig:
    path = Path(args.config)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} not found")
    cfg = load_config(path)
    overrides = _parse_sets(args.set)
    for name in ("trainer", "seed", "epochs", "out_dir"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = str(value)
    return apply_overrides(cfg, overrides)


def load_data(cfg: TrainConfig) -> tuple[Dataset, Dataset, Dataset | None]:
    """Train, test and probe sets per the config's data and output sections."""
    if cfg.dataset not in LOADERS:
        raise ConfigError(f"unknown dataset {cfg.dataset!r}; choose from {sorted(LOADERS)}")
    loader = LOADERS[cfg.dataset]
    directory = Path(cfg.data_dir)
    if not directory.is_dir():
        raise FileNotFoundError(f"data directory {directory} not found")
    train = loader(directory, TRAIN, dtype=cfg.dtype)
    test = loader(directory, TEST, dtype=cfg.dtype)
    if cfg.train_subset:
        train = subset(train, cfg.train_subset, cfg.seed)
    if cfg.test_subset:
        test = subset(test, cfg.test_subset, 0)
    probe = subset(test, cfg.probe_size, 0) if cfg.probe_size and cfg.probe_size < len(test) else None
    return train, test, probe


def _write_run(record: RunRecord, cfg: TrainConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    emit_run_csv(record, out / "run.csv")
    emit_run_svg(record, out / "run.svg")
    (out / "config.txt").write_text(dump_config(cfg))
    if record.probe:
        emit_csv(record.probe, out / "sawtooth.csv", PROBE_COLUMNS)
        emit_probe_svg(record.probe, out / "sawtooth.svg")


def _stability_text(record: RunRecord) -> str:
    accs = record.column("acc_P")
    if len(accs) < 2:
        return "stability: fewer than 2 epochs, no report\n"
    rep = stability_report(accs)
    return (f"window={rep.window}\nstd={rep.std!r}\nbest_acc={rep.best_acc!r}\nbest_epoch={rep.best_epoch}\n"
            f"last_acc={rep.last_acc!r}\ngap={rep.gap!r}\n")


# --------------------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = _effective_config(args)
    train, test, probe = load_data(cfg)
    out = Path(cfg.out_dir)
    record = fit(cfg, train, test, out_dir=out, probe_set=probe, resume=args.resume)
    _write_run(record, cfg, out)
    text = _stability_text(record)
    (out / "stability.txt").write_text(text)
    print(f"wrote {out / 'run.csv'}")
    print(text, end="")
    return EXIT_OK


def _mean_std(values: list[float]) -> tuple[float, float]:
    a = np.asarray(values, dtype=float)
    return float(a.mean()), float(a.std())


def cmd_compare(args) -> int:
    base = _effective_config(args)
    trainers = [t.strip() for t in args.trainers.split(",") if t.strip()]
    bad = [t for t in trainers if t not in TRAINERS]
    if not trainers or bad:
        raise ConfigError(f"--trainers must list values from {TRAINERS}, got {args.trainers!r}")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base.seed]
    out = Path(base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(base))
    rows = []
    for name in trainers:
        per_seed = []
        for seed in seeds:
            cfg = base.replace(trainer=name, seed=seed, out_dir=str(out / f"{name}_seed{seed}"))
            train, test, probe = load_data(cfg)
            record = fit(cfg, train, test, out_dir=cfg.out_dir, probe_set=probe)
            _write_run(record, cfg, Path(cfg.out_dir))
            accs = record.column("acc_P")
            rep = stability_report(accs) if len(accs) >= 2 else None
            per_seed.append(dict(last=accs[-1] if accs else math.nan,
                                 best=max(accs) if accs else math.nan,
                                 std=rep.std if rep else math.nan))
        row = dict(trainer=name, seeds=len(seeds))
        for key in ("last", "best", "std"):
            row[f"{key}_mean"], row[f"{key}_std"] = _mean_std([r[key] for r in per_seed])
        rows.append(row)
    columns = ("trainer", "seeds", "last_mean", "last_std", "best_mean", "best_std", "std_mean", "std_std")
    emit_csv(rows, out / "compare.csv", columns)
    table = _format_table(rows)
    (out / "compare.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def _format_table(rows: list[dict]) -> str:
    head = ["trainer", "last acc", "best acc", "stability std"]

    def cell(r, k):
        m, s = r[k + "_mean"], r[k + "_std"]
        return "n/a" if math.isnan(m) else f"{100 * m:.2f}±{100 * s:.2f}"

    body = [[r["trainer"]] + [cell(r, k) for k in ("last", "best", "std")] for r in rows]
    widths = [max(len(line[i]) for line in [head] + body) for i in range(len(head))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in [head] + body]
    return "\n".join(lines) + "\n"


def cmd_sawtooth(args) -> int:
    src = Path(args.source)
    if not src.exists():
        raise FileNotFoundError(f"{src} not found")
    overrides = _parse_sets(args.set)
    resume = None
    if src.suffix == ".npz":
        _, _, meta = ck.load_checkpoint(src)
        if "config" not in meta:
            raise DataFormatError(f"{src}: checkpoint carries no config echo")
        cfg = parse_config(meta["config"])
        if args.epoch <= meta["epoch"]:
            raise ConfigError(f"checkpoint is at epoch {meta['epoch']}; probe epoch must come later")
        resume = src
    else:
        cfg = load_config(src)
    if args.out_dir:
        overrides["out_dir"] = args.out_dir
    overrides["probe_epoch"] = str(args.epoch)
    cfg = apply_overrides(cfg, overrides)
    if args.epoch >= cfg.epochs:
        raise ConfigError(f"probe epoch {args.epoch} outside the run's {cfg.epochs} epochs")
    train, test, probe = load_data(cfg)
    out = Path(cfg.out_dir)
    record = fit(cfg, train, test, out_dir=out, resume=resume, probe_set=probe, stop_after=args.epoch)
    out.mkdir(parents=True, exist_ok=True)
    emit_csv(record.probe, out / "sawtooth.csv", PROBE_COLUMNS)
    emit_probe_svg(record.probe, out / "sawtooth.svg", label=f"{cfg.trainer} acc_P")
    drops = refresh_drops(record.probe)
    print(f"wrote {out / 'sawtooth.csv'} ({len(record.probe)} rows, {len(drops)} refreshes)")
    if drops:
        print(f"mean post-refresh drop {mean_refresh_drop(record.probe)!r}")
    return EXIT_OK


def cmd_export(args) -> int:
    net, _, meta = ck.load_checkpoint(args.checkpoint)
    out = Path(args.out)
    acc = next((r["acc_P"] for r in reversed(meta.get("rows", [])) if r["epoch"] == meta.get("epoch")), None)
    ck.export_pnet(net, out, dict(epoch=meta.get("epoch"), acc_P=acc, config=meta.get("config", "")))
    audit = sparsity_audit(net)
    lines = [f"global_sparsity={audit.global_sparsity!r}", f"zeros={audit.zeros}", f"total={audit.total}"]
    lines += [f"{k}={v!r}" for k, v in audit.per_layer.items()]
    lines += [f"{k}.filters_pruned={audit.filters_pruned[k]}/{audit.filters_total[k]}" for k in audit.filters_pruned]
    text = "\n".join(lines) + "\n"
    audit_path = out.with_name(out.stem + "_audit.txt")
    audit_path.write_text(text)
    print(f"wrote {out} and {audit_path}")
    print(text, end="")
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcil", description="Dynamic pruning with dual-path gradient routing.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="cmd", required=True)

    def overrides(sp):
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", default=[],
                        help="override a config value (repeatable); beats the file")

    pt = sub.add_parser("train", help="train one configuration")
    pt.add_argument("config", help="INI-style config file")
    pt.add_argument("--trainer", choices=TRAINERS)
    pt.add_argument("--seed", type=int)
    pt.add_argument("--epochs", type=int)
    pt.add_argument("--out-dir", dest="out_dir")
    pt.add_argument("--resume", help="checkpoint to continue from")
    overrides(pt)
    pt.set_defaults(func=cmd_train)

    pc = sub.add_parser("compare", help="run several trainers on identical data and seeds")
    pc.add_argument("config")
    pc.add_argument("--trainers", default="dcil,dpf", help="comma list, e.g. dense,dpf,dcil")
    pc.add_argument("--seeds", default="", help="comma list; default is the config's seed")
    pc.add_argument("--epochs", type=int)
    pc.add_argument("--out-dir", dest="out_dir")
    overrides(pc)
    pc.set_defaults(func=cmd_compare, trainer=None, seed=None)

    ps = sub.add_parser("sawtooth", help="per-iteration accuracy trace for one epoch")
    ps.add_argument("source", help="config file, or a checkpoint (.npz) to continue from")
    ps.add_argument("--epoch", type=int, required=True, help="epoch index to probe")
    ps.add_argument("--out-dir", dest="out_dir")
    overrides(ps)
    ps.set_defaults(func=cmd_sawtooth)

    pe = sub.add_parser("export", help="write the deployable P-path model and a sparsity audit")
    pe.add_argument("checkpoint")
    pe.add_argument("out", help="output .npz path")
    pe.set_defaults(func=cmd_export)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DataFormatError) as e:
        print(f"I/O or data error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
