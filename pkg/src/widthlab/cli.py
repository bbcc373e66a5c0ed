"""Command-line runner: ``widthlab <probe> [options]``.

Exit codes: 0 all verdicts pass, 1 a verdict failed, 2 usage or input error,
3 numeric failure (overflow, divergence, calibration).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import PROBES, SECTIONS, ConfigError, ExperimentConfig, dump_config, load_config, validate
from .data import IDXFormatError
from .experiments import RUNNERS, ProbeOutcome
from .net import CalibrationError, NumericOverflow
from .oracle import DivergenceError
from .probes import CSV_COLUMNS

log = logging.getLogger("widthlab")

EXIT_OK, EXIT_VERDICT, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

# (flag, config field, type); lists are comma-separated strings
_OPTIONS = [
    ("--param", "param", str),
    ("--params", "params", str),
    ("--activation", "activation", str),
    ("--activations", "activations", str),
    ("--L", "L", int),
    ("--p", "p", str),
    ("--u-shift", "u_shift", str),
    ("--widths", "widths", str),
    ("--d", "d", int),
    ("--dataset", "dataset", str),
    ("--images", "images", str),
    ("--labels", "labels", str),
    ("--n-samples", "n_samples", int),
    ("--data-seed", "data_seed", int),
    ("--eta", "eta", float),
    ("--batch-size", "batch_size", int),
    ("--steps", "steps", int),
    ("--record-steps", "record_steps", str),
    ("--seeds", "seeds", str),
    ("--loss", "loss", str),
    ("--layer", "layer", int),
    ("--n-mc", "n_mc", int),
    ("--eps", "eps", float),
    ("--n-params", "n_params", int),
    ("--tol", "tol", float),
    ("--calibrate", "calibrate", str),
    ("--first-layer-rescale", "first_layer_rescale", str),
]


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="sectioned INI config file")
    p.add_argument("--out", default=d, help="output directory for CSV reports and manifest")
    p.add_argument("--seed", type=int, default=d, help="shift the seed list to start at this value")
    p.add_argument("--threads", type=int, default=d, help="worker threads over (width, seed) cells")
    p.add_argument("-v", "--verbose", action="store_true", default=d)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="widthlab", description="Width-scaling probes for network parameterizations.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="PROBE")
    for name in PROBES:
        sp = sub.add_parser(name, help=(RUNNERS[name].__doc__ or "").strip().splitlines()[0])
        _global_flags(sp, suppress=True)
        for flag, dest, typ in _OPTIONS:
            sp.add_argument(flag, dest=dest, type=typ, default=argparse.SUPPRESS)
    return parser


def _field(key: str) -> str:
    k = key.rpartition(".")[2]
    return "param" if k == "name" else k


def _config_path(field: str) -> str:
    key = "name" if field == "param" else field
    sect = next((s for s, keys in SECTIONS.items() if key in keys), "experiment")
    return f"{sect}.{key}"


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    raw = load_config(args.config) if getattr(args, "config", None) else {}
    flat = {}
    for sect, vals in raw.items():
        for k, v in vals.items():
            flat[f"{sect}.{k}"] = v
    # command-line values override file values of the same field
    given = {dest: getattr(args, dest) for _, dest, _ in _OPTIONS if hasattr(args, dest)}
    for dest in ("out", "threads"):
        if getattr(args, dest, None):
            given[dest] = getattr(args, dest)
    for dest, val in given.items():
        path = _config_path(dest)
        flat = {k: v for k, v in flat.items() if _config_path(_field(k)) != path}
        flat[path] = val
    flat.pop("experiment.subcommand", None)
    cfg = validate(flat, subcommand=args.subcommand)
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed + i for i in range(len(cfg.seeds))]
    return cfg


def run_id(cfg: ExperimentConfig, probe: str) -> str:
    canon = dump_config(replace(cfg, out="", threads=1))
    return f"{probe}-{hashlib.sha1(canon.encode()).hexdigest()[:10]}"


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def csv_text(outcome: ProbeOutcome, rid: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for rep in outcome.reports:
        for row in rep.rows(rid):
            w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def run(cfg: ExperimentConfig) -> int:
    """Execute every requested probe, write CSVs and a manifest; return exit code."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config_ini": dump_config(cfg),
        "config": asdict(cfg),
        "versions": {
            "widthlab": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "probes": [],
    }
    code = EXIT_OK
    for probe in cfg.probes:
        t0 = time.perf_counter()
        entry = {"probe": probe}
        try:
            outcome = RUNNERS[probe](replace(cfg, subcommand=probe))
        except (NumericOverflow, DivergenceError, CalibrationError, FloatingPointError) as exc:
            log.error("%s: numeric failure: %s", probe, exc)
            entry.update(error=str(exc), status="numeric-failure")
            code = max(code, EXIT_NUMERIC)
            manifest["probes"].append(entry)
            continue
        rid = run_id(cfg, probe)
        path = out / f"{probe}.csv"
        path.write_text(csv_text(outcome, rid))
        entry.update(
            csv=str(path),
            run_id=rid,
            wall_time_s=round(time.perf_counter() - t0, 3),
            passed=outcome.passed,
            verdicts={f"{r.metric}[layer={r.layer},t={r.t},{r.activation}]": r.verdict for r in outcome.reports if r.verdict is not None},
        )
        manifest["probes"].append(entry)
        for r in outcome.reports:
            if r.verdict is not None:
                slope = f" slope={r.fit.slope:+.3f}" if r.fit else ""
                print(f"[{'PASS' if r.verdict else 'FAIL'}] {probe} {r.parameterization} {r.metric} layer={r.layer} t={r.t}{slope} ({r.expectation})")
        if not outcome.passed and code == EXIT_OK:
            code = EXIT_VERDICT
    manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    manifest["exit_code"] = code
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return run(cfg)
    except (OSError, IDXFormatError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
