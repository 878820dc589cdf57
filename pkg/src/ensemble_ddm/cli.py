"""Command line entry point.

    sde run <experiment> --config <file> [--set key=value]... --out <dir>
            [--threads N] [--seed S]

Exit status: 0 on success, 2 when a solve did not converge, 1 on a
configuration error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__
from .experiments import (EXPERIMENTS, RUNNERS, ConfigError, ExperimentConfig,
                          parse_config_text)

log = logging.getLogger("ensemble_ddm")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sde", description="Ensemble DDM experiments")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("experiment", choices=EXPERIMENTS)
    run.add_argument("--config", type=Path, help="key = value settings file")
    run.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="KEY=VALUE", help="override one setting (repeatable)")
    run.add_argument("--out", type=Path, required=True, help="output directory")
    run.add_argument("--threads", type=int, default=None,
                     help="cap on BLAS/worker threads (1 = fully deterministic)")
    run.add_argument("--seed", type=int, default=None, help="base random seed")
    run.add_argument("-v", "--verbose", action="store_true")
    return p


def load_config(path: Path | None, overrides, seed) -> ExperimentConfig:
    items = {}
    if path is not None:
        try:
            items.update(parse_config_text(path.read_text()))
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
    for ov in overrides:
        key, sep, value = ov.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {ov!r}")
        items[key.strip()] = value
    if seed is not None:
        items["seed"] = str(seed)
    return ExperimentConfig().updated(items)


def config_hash(cfg: ExperimentConfig, experiment: str) -> str:
    payload = json.dumps({"experiment": experiment, **cfg.as_dict()}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def _git_commit() -> str | None:
    try:
        res = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    return res.stdout.strip() or None


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def run_experiment(experiment: str, cfg: ExperimentConfig, out: Path,
                   threads: int | None = None) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if threads is not None:
        with threadpool_limits(limits=threads):
            summary = RUNNERS[experiment](cfg, out)
    else:
        summary = RUNNERS[experiment](cfg, out)
    manifest = {
        "experiment": experiment,
        "config": cfg.as_dict(),
        "config_hash": config_hash(cfg, experiment),
        "seed": cfg.seed,
        "version": __version__,
        "git_commit": _git_commit(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "threads": threads,
        "wall_seconds": time.perf_counter() - t0,
        "summary": summary,
    }
    (out / "manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2) + "\n")
    return summary


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be at least 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        summary = run_experiment(args.experiment, cfg, args.out, args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if summary.get("diverged"):
        print("solver did not converge for every sample; see manifest.json",
              file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
