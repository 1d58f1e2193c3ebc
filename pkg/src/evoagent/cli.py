"""Command-line entry points.

Subcommands:

* ``run``        one or more seeded experiment runs
* ``ablate``     the base-plus-nine single-change grid
* ``baselines``  the four reference allocators over the test split
* ``synth-data`` write the configured synthetic price series to CSV
* ``metrics``    the seven-metric report for a saved return series
* ``plot-data``  sharpe mean/std rows (bar chart input) from aggregates

Result and aggregate files contain no timing information, so rerunning a
command with the same config and seeds reproduces them byte for byte; wall
clock and environment details live only in ``manifest.json``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from .canonical import canonical_json, state_hash
from .config import RunConfig, ablation_spec, load_config
from .errors import ConfigError, DataError, EvoAgentError
from .harness import (
    aggregate_seed_metrics,
    build_series,
    run,
    run_ablation,
    run_baselines,
)
from .market import compute_metrics, write_csv

logger = logging.getLogger(__name__)

ABLATION_COLUMNS = ("configuration", "sharpe", "sortino", "delta_sharpe")
BASELINE_COLUMNS = (
    "baseline",
    "return_pct",
    "sharpe",
    "sortino",
    "calmar",
    "max_dd_pct",
    "win_rate",
    "tail_ratio",
)


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"seeds must be comma-separated integers: {text!r}") from exc
    if not seeds:
        raise ConfigError("empty seed list")
    return seeds


def _load(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for name in ("seed", "cost_bp", "backend"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return replace(config, **overrides) if overrides else config


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text + "\n")


def _write_json(path: Path, doc) -> None:
    _write_text(path, canonical_json(doc))


def _cell(value) -> str:
    """CSV cell rendering that round-trips to the same float as the JSON."""
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv_rows(path: Path, columns, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row[c]) for c in columns])


def _data_hash(config: RunConfig) -> str:
    series = build_series(config)
    return state_hash(
        {
            "tickers": list(series.tickers),
            "timestamps": [ts.isoformat() for ts in series.timestamps],
            "close": series.close.tolist(),
            "volume": series.volume.tolist(),
        }
    )


def _manifest(outdir: Path, command: str, config: RunConfig, seeds: list[int],
              started: float) -> None:
    doc = {
        "command": command,
        "config": config.to_dict(),
        "seeds": seeds,
        "code_version": __version__,
        "data_hashes": {
            str(seed): _data_hash(replace(config, seed=seed)) for seed in seeds
        },
        "wall_clock_seconds": time.time() - started,
    }
    _write_json(outdir / "manifest.json", doc)


# --------------------------------------------------------------- commands


def cmd_run(args: argparse.Namespace) -> int:
    started = time.time()
    config = _load(args)
    seeds = _parse_seeds(args.seeds) if args.seeds else [config.seed]
    outdir = Path(args.output_dir)
    per_seed = {}
    for seed in seeds:
        result = run(replace(config, seed=seed))
        per_seed[str(seed)] = result.test_metrics
        _write_json(outdir / f"result_{seed}.json", result.to_dict())
        print(f"seed {seed}: sharpe={_cell(result.test_metrics['sharpe'])} "
              f"return_pct={_cell(result.test_metrics['return_pct'])}")
    mean, std = aggregate_seed_metrics(per_seed)
    _write_json(
        outdir / "aggregate.json",
        {"seeds": seeds, "per_seed": per_seed, "mean": mean, "std": std},
    )
    _manifest(outdir, "run", config, seeds, started)
    print(f"mean sharpe={_cell(mean['sharpe'])} (std {_cell(std['sharpe'])}) "
          f"over {len(seeds)} seed(s); results in {outdir}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    started = time.time()
    config = _load(args)
    seeds = _parse_seeds(args.seeds) if args.seeds else [config.seed]
    outdir = Path(args.output_dir)
    rows = run_ablation(ablation_spec(config), seeds)
    _write_json(outdir / "ablation.json", rows)
    _write_csv_rows(outdir / "ablation.csv", ABLATION_COLUMNS, rows)
    _manifest(outdir, "ablate", config, seeds, started)
    for row in rows:
        print(f"{row['configuration']:>22s}  sharpe={_cell(row['sharpe'])} "
              f"delta={_cell(row['delta_sharpe'])}")
    return 0


def cmd_baselines(args: argparse.Namespace) -> int:
    started = time.time()
    config = _load(args)
    outdir = Path(args.output_dir)
    out = run_baselines(config)
    rows = [{"baseline": kind, **doc} for kind, doc in out.items()]
    for row in rows:
        row.pop("undefined", None)
    _write_json(outdir / "baselines.json", out)
    _write_csv_rows(outdir / "baselines.csv", BASELINE_COLUMNS, rows)
    _manifest(outdir, "baselines", config, [config.seed], started)
    for row in rows:
        print(f"{row['baseline']:>5s}  sharpe={_cell(row['sharpe'])} "
              f"return_pct={_cell(row['return_pct'])}")
    return 0


def cmd_synth_data(args: argparse.Namespace) -> int:
    config = _load(args)
    if config.synth is None:
        raise ConfigError("config reads prices from csv_path; nothing to synthesize")
    series = build_series(config)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    write_csv(series, args.output)
    print(f"wrote {series.n_bars} bars x {len(series.tickers)} tickers to {args.output}")
    return 0


def cmd_metrics(args: argparse.Namespace) -> int:
    path = Path(args.input)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON in {path}: {exc}") from exc
    returns = doc.get("test_returns") if isinstance(doc, dict) else doc
    ok = isinstance(returns, list) and returns and all(
        isinstance(x, (int, float)) and not isinstance(x, bool) for x in returns
    )
    if not ok:
        raise DataError(
            f"{path} must be a JSON list of returns or a result file "
            "with a test_returns field"
        )
    report = compute_metrics(returns).to_dict()
    text = canonical_json(report)
    if args.output:
        _write_text(Path(args.output), text)
    print(text)
    return 0


def cmd_plot_data(args: argparse.Namespace) -> int:
    labels = args.labels.split(",") if args.labels else None
    if labels is not None and len(labels) != len(args.aggregates):
        raise ConfigError(
            f"{len(labels)} labels for {len(args.aggregates)} aggregate files"
        )
    rows = []
    for k, raw in enumerate(args.aggregates):
        path = Path(raw)
        if not path.exists():
            raise DataError(f"aggregate file not found: {path}")
        doc = json.loads(path.read_text())
        if "mean" not in doc or "std" not in doc:
            raise DataError(f"{path} is not an aggregate file (missing mean/std)")
        rows.append(
            {
                "label": labels[k] if labels else path.stem,
                "sharpe_mean": doc["mean"].get("sharpe"),
                "sharpe_std": doc["std"].get("sharpe"),
            }
        )
    _write_csv_rows(Path(args.output), ("label", "sharpe_mean", "sharpe_std"), rows)
    print(f"wrote {len(rows)} row(s) to {args.output}")
    return 0


# ----------------------------------------------------------------- parser


def _add_common(parser: argparse.ArgumentParser, *, seeds: bool = False,
                output_dir: bool = False) -> None:
    parser.add_argument("--config", help="TOML run configuration file")
    parser.add_argument("--seed", type=int, help="run seed (overrides the config)")
    if seeds:
        parser.add_argument(
            "--seeds", help="comma-separated seed list (overrides --seed)"
        )
    parser.add_argument(
        "--cost-bp", type=float, dest="cost_bp",
        help="transaction cost in basis points per unit turnover",
    )
    parser.add_argument(
        "--backend", choices=("stub", "http"), help="completion backend kind"
    )
    if output_dir:
        parser.add_argument(
            "--output-dir", default="results", help="directory for result files"
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evoagent",
        description="Two-timescale evolving portfolio agent",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument(
        "-v", "--verbose", action="store_true",
        help="show per-module warnings (neutral tool fallbacks etc.)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train, validate, and test one configuration")
    _add_common(p, seeds=True, output_dir=True)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("ablate", help="base plus nine single-change variants")
    _add_common(p, seeds=True, output_dir=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("baselines", help="reference allocators on the test split")
    _add_common(p, output_dir=True)
    p.set_defaults(fn=cmd_baselines)

    p = sub.add_parser("synth-data", help="write the synthetic price series")
    _add_common(p)
    p.add_argument("--output", default="prices.csv", help="CSV path to write")
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("metrics", help="seven-metric report for saved returns")
    p.add_argument("--input", required=True,
                   help="JSON list of returns, or a result_<seed>.json")
    p.add_argument("--output", help="optional path for the JSON report")
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("plot-data", help="sharpe bar/whisker rows from aggregates")
    p.add_argument("aggregates", nargs="+", help="aggregate.json files")
    p.add_argument("--labels", help="comma-separated labels, one per file")
    p.add_argument("--output", default="plot_data.csv", help="CSV path to write")
    p.set_defaults(fn=cmd_plot_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR)
    try:
        return args.fn(args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EvoAgentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
