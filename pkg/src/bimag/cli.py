"""Command-line runner: ``gen-data``, ``run`` and ``report``.

Exit codes: 0 success, 1 configuration error, 2 I/O or parse error,
3 at least one training run failed.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional

from .config import ExperimentConfig, load_config
from .data import generate_benchmark, load_dataset, save_dataset, split_tasks, tasks_from_column
from .exceptions import ConfigError, SchemaError, SpecError
from .experiment import run_bcl
from .metrics import write_curve_csv
from .models import save_bundle
from .training import Variant

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_RUN = 0, 1, 2, 3

SUMMARY_FIELDS = ["variant", "seed", "t", "acc_a", "acc_b", "harmonic_mean", "autac", "mean_autac"]


def _load_world(cfg: ExperimentConfig):
    """Task sequence and attribute table described by the config."""
    if cfg.source == "generate":
        dataset, table = generate_benchmark(cfg.bench)
    else:
        attributes = cfg.attributes
        if attributes is not None and not attributes.exists():
            if cfg.needs_attributes:
                raise ConfigError(f"attributes file {attributes} does not exist", "data.attributes")
            attributes = None
        dataset, table = load_dataset(cfg.features, attributes)
    if cfg.class_splits is not None:
        try:
            sequence = split_tasks(dataset, cfg.class_splits, shuffle=cfg.shuffle_classes, seed=cfg.bench.seed)
        except SpecError as exc:
            raise ConfigError(str(exc), "data.class_splits") from None
    elif cfg.source == "generate":
        sequence = split_tasks(dataset, [dataset.n_classes])
    else:
        sequence = tasks_from_column(dataset)
    return sequence, table


def _check_attributes(cfg: ExperimentConfig):
    if cfg.source == "files" and cfg.needs_attributes:
        if cfg.attributes is None:
            raise ConfigError("variants " + ", ".join(v for v in cfg.variants if Variant(v).needs_attributes)
                              + " need an attributes file", "data.attributes")
        if not cfg.attributes.exists():
            raise ConfigError(f"attributes file {cfg.attributes} does not exist", "data.attributes")


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    if cfg.source != "generate":
        raise ConfigError("gen-data needs data.source = generate", "data.source")
    if args.seed_override is not None:
        cfg.bench = type(cfg.bench)(**{**cfg.bench.__dict__, "seed": args.seed_override})
    if args.out is not None:
        out = Path(args.out)
        features, attributes = out / "features.csv", out / "attributes.csv"
    else:
        base = Path(args.config).parent
        features = cfg.features or base / "features.csv"
        attributes = cfg.attributes or base / "attributes.csv"
    try:
        dataset, table = generate_benchmark(cfg.bench)
    except SpecError as exc:
        raise ConfigError(str(exc), "bench") from None
    splits = cfg.class_splits or [dataset.n_classes]
    try:
        sequence = split_tasks(dataset, splits, shuffle=cfg.shuffle_classes, seed=cfg.bench.seed)
    except SpecError as exc:
        raise ConfigError(str(exc), "data.class_splits") from None
    for p in (features, attributes):
        p.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(sequence.to_dataset(), features, table, attributes)
    n_train = int((dataset.split == "train").sum())
    print(f"C={table.n_classes} Q={table.n_attributes} D={dataset.input_dim} "
          f"train={n_train} test={len(dataset) - n_train} tasks={len(sequence)} -> {features}, {attributes}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def _run_one(variant, seed, cfg: ExperimentConfig, sequence, table, runs_dir: Path):
    train = cfg.train.replace(seed=seed)
    echo = {"settings": cfg.echo(), "train": train.to_dict()}
    record = run_bcl(variant, sequence, table, train, keep_models=cfg.save_checkpoints, config_echo=echo)
    path = runs_dir / f"{variant}_{seed}.json"
    path.write_text(record.to_json(), encoding="utf-8")
    if cfg.save_checkpoints:
        for step in record.steps:
            save_bundle(step.bundle, runs_dir / f"{variant}_{seed}_t{step.t}.ckpt")
    return str(path), record.mean_autac


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed_override is not None:
        cfg.seeds = [args.seed_override]
    if args.workers is not None:
        cfg.workers = args.workers
    if args.out is not None:
        cfg.output = Path(args.out)
    _check_attributes(cfg)
    sequence, table = _load_world(cfg)
    if table is None and cfg.needs_attributes:
        raise ConfigError("attribute-conditioned variants need an attribute table", "data.attributes")
    if table is not None and table.n_classes != sequence.n_classes:
        raise ConfigError(f"{table.n_classes} attribute rows for {sequence.n_classes} classes", "data.attributes")
    runs_dir = cfg.output / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(v, s) for v in cfg.variants for s in cfg.seeds]
    failures = []
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = {job: pool.submit(_run_one, *job, cfg, sequence, table, runs_dir) for job in jobs}
            results = []
            for job, fut in futures.items():
                try:
                    results.append((job, fut.result()))
                except Exception as exc:  # noqa: BLE001 - every failure goes to the manifest
                    failures.append((job, exc))
    else:
        results = []
        for job in jobs:
            try:
                results.append((job, _run_one(*job, cfg, sequence, table, runs_dir)))
            except Exception as exc:  # noqa: BLE001
                failures.append((job, exc))
    for (variant, seed), (path, mean) in results:
        print(f"{variant} seed={seed} mean_autac={mean:.4f} -> {path}")
    manifest = runs_dir / "failures.json"
    if failures:
        manifest.write_text(json.dumps(
            [{"variant": v, "seed": s, "error": f"{type(e).__name__}: {e}"} for (v, s), e in failures],
            indent=2) + "\n", encoding="utf-8")
        for (v, s), e in failures:
            print(f"FAILED {v} seed={s}: {e}", file=sys.stderr)
        return EXIT_RUN
    if manifest.exists():
        manifest.unlink()
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _read_record(path: Path) -> dict:
    try:
        rec = json.loads(path.read_text(encoding="utf-8"))
        missing = [k for k in ("variant", "seed", "steps", "mean_autac") if k not in rec]
        if not missing and not rec["steps"]:
            missing = ["steps (empty)"]
        for s in rec.get("steps") or []:
            missing += [f"steps[].{k}" for k in ("t", "acc_per_task", "harmonic_mean", "autac", "curve")
                        if k not in s]
    except (OSError, ValueError, TypeError, AttributeError) as exc:
        raise SchemaError(f"malformed run record {path}: {exc}") from None
    if missing:
        raise SchemaError(f"malformed run record {path}: missing {', '.join(missing)}")
    return rec


def _step_acc(step: dict, which: str) -> float:
    key = f"acc_{which}"
    if key in step:
        return float(step[key])
    return float(step["acc_per_task"][0 if which == "a" else 1])


def report_rows(records: List[dict]) -> List[dict]:
    """Summary table rows: per step, per-run mean, then per-variant mean/std over seeds."""
    rows = []
    per_variant = {}
    for rec in sorted(records, key=lambda r: (r["variant"], r["seed"])):
        run_rows = []
        for s in rec["steps"]:
            run_rows.append({"variant": rec["variant"], "seed": rec["seed"], "t": s["t"],
                             "acc_a": 100.0 * _step_acc(s, "a"), "acc_b": 100.0 * _step_acc(s, "b"),
                             "harmonic_mean": 100.0 * float(s["harmonic_mean"]),
                             "autac": float(s["autac"]), "mean_autac": float(rec["mean_autac"])})
        mean_row = {"variant": rec["variant"], "seed": rec["seed"], "t": "mean"}
        for key in ("acc_a", "acc_b", "harmonic_mean", "autac"):
            mean_row[key] = math.fsum(r[key] for r in run_rows) / len(run_rows)
        mean_row["mean_autac"] = float(rec["mean_autac"])
        rows.extend(run_rows)
        rows.append(mean_row)
        for r in run_rows + [mean_row]:
            per_variant.setdefault(rec["variant"], {}).setdefault(str(r["t"]), []).append(r)
    for variant in sorted(per_variant):
        for t, group in per_variant[variant].items():
            for stat in ("mean", "std"):
                row = {"variant": variant, "seed": stat, "t": t}
                for key in ("acc_a", "acc_b", "harmonic_mean", "autac", "mean_autac"):
                    vals = [r[key] for r in group]
                    if stat == "mean":
                        row[key] = math.fsum(vals) / len(vals)
                    else:
                        row[key] = statistics.stdev(vals) if len(vals) > 1 else 0.0
                rows.append(row)
    return rows


def cmd_report(args) -> int:
    runs_dir = Path(args.runs_dir)
    out = Path(args.out) if args.out is not None else runs_dir
    if not runs_dir.is_dir():
        raise OSError(f"runs directory {runs_dir} does not exist")
    paths = sorted(p for p in runs_dir.glob("*.json") if p.name != "failures.json")
    if not paths:
        raise OSError(f"no run records in {runs_dir}")
    records = [_read_record(p) for p in paths]
    out.mkdir(parents=True, exist_ok=True)
    curves = out / "curves"
    curves.mkdir(exist_ok=True)
    with open(out / "summary.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in report_rows(records):
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    for rec in records:
        for s in rec["steps"]:
            write_curve_csv(curves / f"{rec['variant']}_{rec['seed']}_t{s['t']}.csv", s["curve"])
    print(f"{len(records)} runs -> {out / 'summary.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bimag", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed-override", type=int, default=None, help="replace the configured seeds")
        p.add_argument("--workers", type=int, default=None, help="parallel runs (default from config)")
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("gen-data", help="generate a synthetic benchmark as CSV files")
    p.add_argument("config")
    common(p)
    p.set_defaults(func=cmd_gen_data)
    p = sub.add_parser("run", help="train every (variant, seed) pair and write run records")
    p.add_argument("config")
    common(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("report", help="summarize run records into CSV tables")
    p.add_argument("runs_dir")
    common(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, SchemaError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
