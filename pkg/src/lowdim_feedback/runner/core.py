"""Experiment runner CLI.

Usage:
    uv run ldfa run configs/linear_full_rank_fa.toml               # run every repeat
    uv run ldfa run configs/rank_sweep_d8.toml --jobs 4 --out runs/ # parallel repeats
    uv run ldfa validate configs/linear_normative.toml             # schema check only
    uv run ldfa compare sim.csv theory.csv --tol 0.05              # overlap deviation

Exit codes: 0 success, 2 config error, 3 divergence, 4 comparison failure.
"""

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path

import torch

from lowdim_feedback import __version__
from lowdim_feedback.config import get_output_root
from lowdim_feedback.errors import ComparisonError, ConfigError, DivergenceError
from lowdim_feedback.log import attach_run_log, detach_run_log, setup_logging
from lowdim_feedback.runner.experiments import RunResult, run_single
from lowdim_feedback.runner.schema import ExperimentConfig, parse_config
from lowdim_feedback.trajectory import compare_overlaps, read_csv

logger = logging.getLogger(__name__)

# === CONFIG ===

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_COMPARISON = 4


@dataclass
class RunManifest:
    config_hash: str
    kind: str
    seeds: list[int]
    files: list[str] = field(default_factory=list)
    version: str = __version__
    started: str = ""
    finished: str = ""
    config: dict = field(default_factory=dict)
    diverged: dict[str, str] = field(default_factory=dict)
    comparison_failures: list[int] = field(default_factory=list)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=2), encoding="utf-8")
        return path


def aggregate(results: list[RunResult]) -> dict[str, dict]:
    """Mean and population std of every terminal metric across repeats."""
    names = sorted({name for r in results for name in r.terminal})
    out = {}
    for name in names:
        values = torch.tensor([r.terminal[name] for r in results if name in r.terminal], dtype=torch.float64)
        out[name] = {
            "mean": float(values.mean()),
            "std": float(values.std(correction=0)),
            "n": values.numel(),
        }
    return out


def _now() -> str:
    return datetime.now().isoformat(timespec="seconds")


def run(config: ExperimentConfig, out_dir: str | Path, seed_offset: int = 0, jobs: int = 1) -> RunManifest:
    """Execute every repeat, then write aggregate.json and manifest.json.

    Raises DivergenceError if any repeat diverged and ComparisonError if any
    simulation-vs-theory comparison failed; both only after the manifest is written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = [config.seed + seed_offset + i for i in range(config.repeats)]
    manifest = RunManifest(
        config_hash=config.config_hash, kind=config.kind, seeds=seeds,
        started=_now(), config=config.resolved(),
    )

    results: list[RunResult] = []
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {seed: pool.submit(run_single, config, seed, out_dir) for seed in seeds}
            for seed, future in futures.items():
                try:
                    results.append(future.result())
                except DivergenceError as e:
                    manifest.diverged[str(seed)] = str(e)
    else:
        for seed in seeds:
            try:
                results.append(run_single(config, seed, out_dir))
            except DivergenceError as e:
                manifest.diverged[str(seed)] = str(e)

    for seed, message in manifest.diverged.items():
        logger.error(f"Seed {seed} diverged: {message}")

    for r in results:
        manifest.files.extend(r.files)
        if r.comparison_failed:
            manifest.comparison_failures.append(r.seed)
    if results:
        agg_path = out_dir / "aggregate.json"
        agg_path.write_text(json.dumps(aggregate(results), indent=2), encoding="utf-8")
        manifest.files.append(str(agg_path))

    manifest.finished = _now()
    manifest.write(out_dir / "manifest.json")

    if manifest.diverged:
        raise DivergenceError(f"{len(manifest.diverged)} of {len(seeds)} runs diverged")
    if manifest.comparison_failures:
        raise ComparisonError(f"theory comparison failed for seeds {manifest.comparison_failures}")
    return manifest


# === OUTPUT ===

def print_header(config: ExperimentConfig, out_dir: Path, seeds: list[int]):
    print()
    print("=" * 60)
    print("  EXPERIMENT")
    print("=" * 60)
    print()
    print(f"  Config:  {config.source}")
    print(f"  Kind:    {config.kind}")
    print(f"  Hash:    {config.config_hash[:16]}")
    print(f"  Seeds:   {seeds}")
    print(f"  Output:  {out_dir}")
    print()


def print_summary(manifest: RunManifest, elapsed: float):
    print()
    print("=" * 60)
    print("  COMPLETE" if not manifest.diverged and not manifest.comparison_failures else "  FAILED")
    print("=" * 60)
    print()
    print(f"  Runs:    {len(manifest.seeds)}")
    print(f"  Time:    {elapsed:.0f}s")
    if manifest.diverged:
        print(f"  Diverged seeds: {', '.join(manifest.diverged)}")
    if manifest.comparison_failures:
        print(f"  Theory mismatch seeds: {manifest.comparison_failures}")
    print()
    print("  Files:")
    for path in manifest.files:
        print(f"    {path}")
    print()


def print_config_errors(err: ConfigError):
    print()
    print(f"  Config invalid ({len(err.errors)} problems):")
    for msg in err.errors:
        print(f"    - {msg}")
    print()


# === COMMANDS ===

def cmd_run(args) -> int:
    try:
        config = parse_config(args.config)
    except ConfigError as e:
        print_config_errors(e)
        return EXIT_CONFIG

    name = config.output_dir or Path(args.config).stem
    out_dir = Path(get_output_root(args.out)) / name
    seeds = [config.seed + args.seed_offset + i for i in range(config.repeats)]

    setup_logging("ldfa")
    handler = attach_run_log(str(out_dir))
    print_header(config, out_dir, seeds)
    start = time.time()
    manifest = None
    try:
        manifest = run(config, out_dir, seed_offset=args.seed_offset, jobs=args.jobs)
        code = EXIT_OK
    except DivergenceError as e:
        logger.error(str(e))
        code = EXIT_DIVERGENCE
    except ComparisonError as e:
        logger.error(str(e))
        code = EXIT_COMPARISON
    finally:
        detach_run_log(handler)

    if manifest is None:
        manifest_path = out_dir / "manifest.json"
        manifest = RunManifest(**json.loads(manifest_path.read_text(encoding="utf-8")))
    print_summary(manifest, time.time() - start)
    return code


def cmd_validate(args) -> int:
    try:
        config = parse_config(args.config)
    except ConfigError as e:
        print_config_errors(e)
        return EXIT_CONFIG
    print(f"  OK: {config.kind}, {config.repeats} repeat(s), hash {config.config_hash[:16]}")
    return EXIT_OK


def cmd_compare(args) -> int:
    for path in (args.sim, args.theory):
        if not Path(path).is_file():
            print(f"  File not found: {path}")
            return EXIT_CONFIG
    try:
        report = compare_overlaps(read_csv(args.sim), read_csv(args.theory))
    except ComparisonError as e:
        print(f"  Cannot compare: {e}")
        return EXIT_COMPARISON

    worst = report["max_deviation"]
    print(f"  Points compared: {report['n_points']}")
    for i, dev in enumerate(report["per_mode"]):
        print(f"    lambda_{i + 1}: {'-' if dev is None else f'{dev:.6f}'}")
    print(f"  Max deviation:   {'-' if worst is None else f'{worst:.6f}'} (tolerance {args.tol})")
    if worst is None or worst > args.tol:
        return EXIT_COMPARISON
    return EXIT_OK


def main(argv: list[str] | None = None):
    parser = argparse.ArgumentParser(prog="ldfa", description="Low-dimensional feedback experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="Run an experiment file")
    p_run.add_argument("config", help="Path to a TOML experiment file")
    p_run.add_argument("--out", default=None, help="Output root (default: $LDFA_OUTPUT_ROOT or ./runs)")
    p_run.add_argument("--seed-offset", type=int, default=0, help="Added to every repeat's seed (default: 0)")
    p_run.add_argument("--jobs", type=int, default=1, help="Worker processes for repeats (default: 1)")
    p_run.set_defaults(func=cmd_run)

    p_val = sub.add_parser("validate", help="Check an experiment file without running it")
    p_val.add_argument("config", help="Path to a TOML experiment file")
    p_val.set_defaults(func=cmd_validate)

    p_cmp = sub.add_parser("compare", help="Compare simulated and theoretical mode overlaps")
    p_cmp.add_argument("sim", help="Simulation trajectory CSV")
    p_cmp.add_argument("theory", help="Theory trajectory CSV")
    p_cmp.add_argument("--tol", type=float, default=0.05, help="Max allowed |deviation| (default: 0.05)")
    p_cmp.set_defaults(func=cmd_compare)

    args = parser.parse_args(argv)
    sys.exit(args.func(args))


if __name__ == "__main__":
    main()
