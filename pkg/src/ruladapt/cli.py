"""Operator entry point.

Subcommands:
  ingest   parse one subset's flat files, cache trajectories, print counts
  train    run one source->target pair for one variant across seeds
  ablate   run the three-term ablation (alignment / +reconstruction / full)
  sweep    replay the tuning grid, ranked by source validation RMSE

A YAML config file provides defaults for any run field plus the path
options; command-line flags override it.  Unknown keys are rejected.  All
run artifacts land under out_dir/<SOURCE>-<TARGET>/<variant>/<seed>/ with
fixed file names.
"""

from __future__ import annotations

import argparse
import itertools
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from dataclasses import asdict, replace

from .data import (
    ALL_FEATURES,
    DEFAULT_RC,
    SOURCE,
    TARGET,
    build_domain_dataset,
    load_dataset_cache,
    parse_cmapss,
    save_dataset_cache,
    subset_paths,
)
from .evaluation import write_aggregate
from .model import desk_model_config, toy_model_config
from .serialization import config_hash
from .training import (
    VARIANTS,
    make_run_config,
    run_config_from_dict,
    run_experiment,
    run_single_seed,
    variant_weights,
)

PATH_KEYS = ("data_dir", "out_dir", "jobs")
TOY_FEATURE_MASK = tuple(range(3, 11))  # sensors 1..8
SWEEP_GRID = {
    "lambda_m": (0.1, 0.2, 0.35, 0.5),
    "lambda_r": (0.1, 0.2, 0.35, 0.5),
    "lambda_s": (0.1, 0.2, 0.35, 0.5),
    "gamma_noise": (0.1, 0.01),
    "autoencoder": ("gru", "lstm", "rnn"),
}


def _load_config_file(path) -> dict:
    payload = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(payload, dict):
        raise ValueError(f"{path}: config file must hold a mapping")
    return payload


def _resolve_paths(args, file_cfg: dict):
    data_dir = args.data_dir or file_cfg.get("data_dir") or os.environ.get("RULADAPT_DATA_DIR", "data")
    out_dir = args.out_dir or file_cfg.get("out_dir") or "runs"
    jobs = args.jobs or int(file_cfg.get("jobs") or 1)
    return Path(data_dir), Path(out_dir), jobs


def _build_run_config(args, file_cfg: dict, source: str, target: str, variant: str):
    run_cfg = {k: v for k, v in file_cfg.items() if k not in PATH_KEYS}

    preset = getattr(args, "preset", None) or run_cfg.pop("preset", None) or "full"
    if getattr(args, "toy", False):
        preset = "toy"
    overrides: dict = {}
    if preset == "toy":
        overrides["feature_mask"] = TOY_FEATURE_MASK
        overrides["window"] = 16
        overrides["model"] = toy_model_config(len(TOY_FEATURE_MASK), 16)
    elif preset == "desk":
        overrides["model"] = desk_model_config(
            len(run_cfg.get("feature_mask") or ALL_FEATURES),
            int(run_cfg.get("window", 40)),
        )
    elif preset != "full":
        raise ValueError(f"unknown preset {preset!r}")

    for field in ("window", "epochs", "batch_size", "lr", "rc"):
        value = getattr(args, field, None)
        if value is not None:
            overrides[field] = value
    if getattr(args, "seeds", None):
        overrides["seeds"] = tuple(int(s) for s in args.seeds.split(","))

    merged = {**run_cfg, **overrides}
    merged.pop("preset", None)
    merged["source_subset"] = source
    merged["target_subset"] = target
    merged["variant"] = variant
    if "weights" not in merged:
        merged["weights"] = variant_weights(variant)
    return run_config_from_dict({**_defaults_dict(), **_normalize(merged)})


def _defaults_dict() -> dict:
    return make_run_config("FD002", "FD001").to_dict()


def _normalize(payload: dict) -> dict:
    out = dict(payload)
    for key in ("model", "weights", "kernel"):
        value = out.get(key)
        if value is not None and not isinstance(value, dict):
            out[key] = asdict(value)
    return out


def provide_dataset(data_dir: Path, cache_dir: Path | None, subset: str, role: str, config):
    """Load trajectories (cache first, else raw flat files) and build windows."""
    cache_path = (cache_dir / f"{subset}.cache") if cache_dir else None
    if cache_path is not None and cache_path.exists():
        train, test, truth, _, _ = load_dataset_cache(cache_path)
    else:
        train_path, test_path, rul_path = subset_paths(data_dir, subset)
        for p in (train_path, test_path, rul_path):
            if not p.exists():
                raise FileNotFoundError(f"missing data file: {p}")
        train, test, truth = parse_cmapss(train_path, test_path, rul_path)
    return build_domain_dataset(
        train, test, truth,
        subset=subset, role=role, window=config.window, rc=config.rc,
        feature_mask=config.feature_mask,
        val_seed=config.val_seed, val_fraction=config.val_fraction,
    )


def provide_domain_pair(data_dir: Path, cache_dir: Path | None, config):
    source = provide_dataset(data_dir, cache_dir, config.source_subset, SOURCE, config)
    target = provide_dataset(data_dir, cache_dir, config.target_subset, TARGET, config)
    return source, target


# ---------------------------------------------------------------------------
# ingest

def cmd_ingest(args) -> int:
    file_cfg = _load_config_file(args.config) if args.config else {}
    data_dir, out_dir, _ = _resolve_paths(args, file_cfg)
    subset = args.subset
    window = args.window or int(file_cfg.get("window", 40))
    train_path, test_path, rul_path = subset_paths(data_dir, subset)
    try:
        train, test, truth = parse_cmapss(train_path, test_path, rul_path)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    ingest_cfg = {
        "subset": subset,
        "window": window,
        "rc": args.rc or DEFAULT_RC,
        "feature_mask": None,
    }
    cache_dir = Path(args.out or (out_dir / "cache"))
    cache_dir.mkdir(parents=True, exist_ok=True)
    cache_path = cache_dir / f"{subset}.cache"
    digest = save_dataset_cache(
        cache_path, train, test, truth, subset=subset,
        config={**ingest_cfg, "hash": config_hash(ingest_cfg)},
    )
    n_windows = sum(max(t.length - window + 1, 1) for t in train)
    print(f"{subset}: {len(train)} train trajectories, {len(test)} test trajectories")
    print(f"{subset}: {n_windows} train windows (K={window})")
    print(f"cache: {cache_path} sha256={digest[:16]}")
    return 0


# ---------------------------------------------------------------------------
# train

def _seed_worker(payload: dict) -> dict:
    """Process-pool worker: rebuild config and datasets, run one seed."""
    config = run_config_from_dict(payload["config"])
    data_dir = Path(payload["data_dir"])
    cache_dir = Path(payload["cache_dir"]) if payload["cache_dir"] else None
    source, target = provide_domain_pair(data_dir, cache_dir, config)
    result = run_single_seed(
        config, payload["seed"], source, target,
        run_dir=Path(payload["run_dir"]), write_latents=payload["latents"],
    )
    return {k: result[k] for k in ("seed", "rmse", "score", "val_rmse")}


def _run_variant(config, source, target, out_dir: Path, *, latents: bool, jobs: int,
                 data_dir: Path, cache_dir: Path | None, label: str | None = None):
    pair_dir = out_dir / f"{config.source_subset}-{config.target_subset}"
    variant_dir = pair_dir / (label or config.variant)
    if jobs <= 1:
        report = run_experiment(
            config, source, target, out_dir=variant_dir,
            write_latents=latents, progress=print,
        )
    else:
        from .evaluation import MetricsReport

        report = MetricsReport(
            source=config.source_subset, target=config.target_subset,
            variant=label or config.variant, seeds=tuple(config.seeds),
            n_test_engines=len(target.test_windows),
        )
        payloads = [
            {
                "config": config.to_dict(),
                "seed": seed,
                "run_dir": str(variant_dir / str(seed)),
                "data_dir": str(data_dir),
                "cache_dir": str(cache_dir) if cache_dir else None,
                "latents": latents,
            }
            for seed in config.seeds
        ]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for result in pool.map(_seed_worker, payloads):
                report.rmse_per_seed.append(result["rmse"])
                report.score_per_seed.append(result["score"])
                report.val_rmse_per_seed.append(result["val_rmse"])
                print(f"seed {result['seed']}: rmse {result['rmse']:.2f}")
        variant_dir.mkdir(parents=True, exist_ok=True)
        with open(variant_dir / "report.json", "w") as fh:
            json.dump(report.to_dict() | {"config_hash": config.hash}, fh, indent=2, sort_keys=True)
    if label is not None:
        report.variant = label
    return report


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config) if args.config else {}
    data_dir, out_dir, jobs = _resolve_paths(args, file_cfg)
    config = _build_run_config(args, file_cfg, args.source, args.target, args.variant)
    cache_dir = out_dir / "cache"
    try:
        source, target = provide_domain_pair(data_dir, cache_dir if cache_dir.exists() else None, config)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    report = _run_variant(
        config, source, target, out_dir, latents=not args.no_latents,
        jobs=jobs, data_dir=data_dir, cache_dir=cache_dir if cache_dir.exists() else None,
    )
    print(f"{report.pair} {report.variant}: "
          f"rmse {report.rmse_mean:.2f} +- {report.rmse_sd:.2f} over {len(report.rmse_per_seed)} seeds")
    if report.failures:
        for failure in report.failures:
            print(f"FAILED {failure}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# ablate

ABLATION_ROWS = (
    ("mmd", dict(lambda_r=0.0, lambda_s=0.0)),
    ("mmd_ae", dict(lambda_s=0.0)),
    ("full", dict()),
)


def cmd_ablate(args) -> int:
    file_cfg = _load_config_file(args.config) if args.config else {}
    data_dir, out_dir, jobs = _resolve_paths(args, file_cfg)
    base = _build_run_config(args, file_cfg, args.source, args.target, "lamanet")
    cache_dir = out_dir / "cache"
    try:
        source, target = provide_domain_pair(data_dir, cache_dir if cache_dir.exists() else None, base)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    reports = []
    failed = False
    for label, weight_overrides in ABLATION_ROWS:
        config = replace(base, weights=replace(base.weights, **weight_overrides))
        report = _run_variant(
            config, source, target, out_dir, latents=not args.no_latents,
            jobs=jobs, data_dir=data_dir, cache_dir=None, label=f"ablate-{label}",
        )
        report.variant = label
        reports.append(report)
        failed = failed or bool(report.failures)

    pair_dir = out_dir / f"{base.source_subset}-{base.target_subset}" / "ablate"
    write_aggregate(pair_dir, reports)
    with open(pair_dir / "ablate_points.csv", "w") as fh:
        fh.write("variant,seed,rmse,score\n")
        for report in reports:
            for i, seed in enumerate(report.seeds[: len(report.rmse_per_seed)]):
                fh.write(f"{report.variant},{seed},{report.rmse_per_seed[i]},{report.score_per_seed[i]}\n")
    for report in reports:
        print(f"{report.variant}: rmse {report.rmse_mean:.2f} +- {report.rmse_sd:.2f}")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# sweep

def _parse_grid(text: str | None) -> dict:
    if not text:
        return dict(SWEEP_GRID)
    grid = {}
    for clause in text.split(";"):
        key, _, values = clause.partition("=")
        key = key.strip()
        if key not in SWEEP_GRID:
            raise ValueError(f"unknown grid key {key!r}; options: {sorted(SWEEP_GRID)}")
        parsed = [v.strip() for v in values.split(",") if v.strip()]
        grid[key] = tuple(parsed if key == "autoencoder" else map(float, parsed))
    for key, default in SWEEP_GRID.items():
        grid.setdefault(key, default)
    return grid


def cmd_sweep(args) -> int:
    file_cfg = _load_config_file(args.config) if args.config else {}
    data_dir, out_dir, jobs = _resolve_paths(args, file_cfg)
    base = _build_run_config(args, file_cfg, args.source, args.target, "lamanet")
    try:
        grid = _parse_grid(args.grid)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    points = list(itertools.product(*(grid[k] for k in sorted(grid))))
    keys = sorted(grid)
    print(f"sweep grid: {len(points)} points x {len(base.seeds)} seeds")
    if not args.confirm:
        print("pass --confirm to launch", file=sys.stderr)
        return 2

    cache_dir = out_dir / "cache"
    try:
        source, target = provide_domain_pair(data_dir, cache_dir if cache_dir.exists() else None, base)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    rows = []
    failed = False
    for values in points:
        point = dict(zip(keys, values))
        tag = "_".join(f"{k}={point[k]}" for k in keys)
        weights = replace(
            base.weights,
            lambda_m=point["lambda_m"], lambda_r=point["lambda_r"],
            lambda_s=point["lambda_s"], gamma_noise=point["gamma_noise"],
        )
        model = replace(base.model, recon_cell=point["autoencoder"])
        config = replace(base, weights=weights, model=model)
        report = _run_variant(
            config, source, target, out_dir, latents=False, jobs=jobs,
            data_dir=data_dir, cache_dir=None, label=f"sweep-{tag}",
        )
        failed = failed or bool(report.failures)
        mean_val = (
            float(np.mean(report.val_rmse_per_seed)) if report.val_rmse_per_seed else math.inf
        )
        rows.append({**point, "val_rmse": mean_val, "tag": tag})
        print(f"{tag}: source-val rmse {mean_val:.2f}")

    rows.sort(key=lambda r: r["val_rmse"])  # ranking never touches target labels
    pair_dir = out_dir / f"{base.source_subset}-{base.target_subset}" / "sweep"
    pair_dir.mkdir(parents=True, exist_ok=True)
    with open(pair_dir / "sweep_results.csv", "w") as fh:
        fh.write(",".join(keys) + ",val_rmse\n")
        for row in rows:
            fh.write(",".join(str(row[k]) for k in keys) + f",{row['val_rmse']}\n")
    print(f"best point: {rows[0]['tag']} (source-val rmse {rows[0]['val_rmse']:.2f})")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# parser

def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML config file with defaults")
    parser.add_argument("--data-dir", help="directory with the flat data files")
    parser.add_argument("--out-dir", help="artifact root (default ./runs)")
    parser.add_argument("--jobs", type=int, help="parallel runs (default 1)")


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seeds", help="comma-separated seeds (default 1,123074,2457)")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", type=int, dest="batch_size")
    parser.add_argument("--lr", type=float)
    parser.add_argument("--window", type=int)
    parser.add_argument("--rc", type=float)
    parser.add_argument("--preset", choices=("full", "toy", "desk"))
    parser.add_argument("--toy", action="store_true", help="shorthand for --preset toy")
    parser.add_argument("--no-latents", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ruladapt",
        description="Domain-adaptive remaining-useful-life training and evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="parse and cache one subset")
    p_ingest.add_argument("--subset", required=True)
    p_ingest.add_argument("--window", type=int)
    p_ingest.add_argument("--rc", type=float)
    p_ingest.add_argument("--out", help="cache directory (default out_dir/cache)")
    _add_common(p_ingest)
    p_ingest.set_defaults(func=cmd_ingest)

    p_train = sub.add_parser("train", help="train one pair/variant across seeds")
    p_train.add_argument("--source", required=True)
    p_train.add_argument("--target", required=True)
    p_train.add_argument("--variant", default="lamanet", choices=VARIANTS)
    _add_common(p_train)
    _add_run_options(p_train)
    p_train.set_defaults(func=cmd_train)

    p_ablate = sub.add_parser("ablate", help="alignment / +reconstruction / full comparison")
    p_ablate.add_argument("--source", required=True)
    p_ablate.add_argument("--target", required=True)
    _add_common(p_ablate)
    _add_run_options(p_ablate)
    p_ablate.set_defaults(func=cmd_ablate)

    p_sweep = sub.add_parser("sweep", help="replay the tuning grid")
    p_sweep.add_argument("--source", required=True)
    p_sweep.add_argument("--target", required=True)
    p_sweep.add_argument("--grid", help='e.g. "lambda_m=0.1,0.5;autoencoder=gru"')
    p_sweep.add_argument("--confirm", action="store_true")
    _add_common(p_sweep)
    _add_run_options(p_sweep)
    p_sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
