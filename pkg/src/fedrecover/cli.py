"""Command-line driver: ``fedrecover run | sweep | gen-data``.

Exit codes: 0 on success, 1 on runtime failure, 2 on configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from fedrecover import __version__
from fedrecover.config import PRESETS, ExperimentConfig, load_file, parse_assignments, parse_value, resolve
from fedrecover.data import save_csv, save_truth
from fedrecover.errors import ConfigError, FedRecoverError
from fedrecover.experiments import RunOutcome, run_algorithm, synthetic_data

OUTPUT_ENV = "FEDRECOVER_OUTPUT_DIR"
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("fedrecover")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="config file (key = value) or a run .json sidecar")
    common.add_argument("--preset", metavar="NAME", choices=sorted(PRESETS), help="start from a named preset")
    common.add_argument("--seed", type=int, metavar="N", help="run a single seed (overrides run.seeds)")
    common.add_argument("--out", metavar="DIR", help=f"output directory (overrides ${OUTPUT_ENV} and run.output)")
    common.add_argument("--algo", metavar="NAME", help="algorithm name or comma list (overrides algo.name)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fedrecover", description="Federated dual averaging experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run every algorithm for every seed")
    sw = sub.add_parser("sweep", parents=[common], help="run the Cartesian product of --vary values")
    sw.add_argument("--vary", action="append", default=[], metavar="KEY=V1,V2,...",
                    help="values for one config key; repeatable")
    sub.add_parser("gen-data", parents=[common], help="write synthetic client CSVs and truth.csv")
    return parser


def load_config(args) -> ExperimentConfig:
    file_values = load_file(args.config) if args.config else None
    flags: Dict[str, object] = {}
    if args.algo:
        flags["algo.name"] = args.algo
    if args.seed is not None:
        flags["run.seeds"] = str(args.seed)
    flags.update(parse_assignments(args.overrides))
    return resolve(preset=args.preset, file_values=file_values, overrides=flags)


def output_dir(args, cfg: ExperimentConfig) -> Path:
    if args.out:
        return Path(args.out)
    if os.environ.get(OUTPUT_ENV):
        return Path(os.environ[OUTPUT_ENV])
    return Path(cfg["run.output"])


def _finals(outcome: RunOutcome) -> Dict[str, float]:
    rows = outcome.result.record.rows
    return {r.metric: r.value for r in rows}


def write_run(out: Path, cfg: ExperimentConfig, outcome: RunOutcome) -> Path:
    """Write the metrics CSV and its JSON sidecar; returns the CSV path."""
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{outcome.algorithm}_seed{outcome.seed}"
    csv_path = out / f"{stem}.csv"
    outcome.result.record.write_csv(csv_path)
    run_cfg = cfg.updated({"algo.name": [outcome.algorithm], "run.seeds": [outcome.seed]})
    sidecar = {
        "algorithm": outcome.algorithm,
        "seed": outcome.seed,
        "version": __version__,
        "wall_time_s": outcome.wall_time,
        "metrics_csv": csv_path.name,
        "final": _finals(outcome),
        "config": run_cfg.to_json_dict(),
        "config_text": run_cfg.to_text(),
    }
    with (out / f"{stem}.json").open("w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=False)
        fh.write("\n")
    return csv_path


def _run_all(cfg: ExperimentConfig, out: Path) -> List[RunOutcome]:
    outcomes = []
    for algo in cfg.algorithms:
        for seed in cfg.seeds:
            outcome = run_algorithm(cfg, algo, seed)
            path = write_run(out, cfg, outcome)
            log.info("%s seed %d done in %.2fs -> %s", algo, seed, outcome.wall_time, path)
            outcomes.append(outcome)
    return outcomes


def cmd_run(args, cfg: ExperimentConfig) -> int:
    out = output_dir(args, cfg)
    for o in _run_all(cfg, out):
        print(f"{o.algorithm} seed={o.seed} time={o.wall_time:.2f}s")
    return EXIT_OK


def parse_vary(items: Sequence[str]) -> Dict[str, list]:
    vary: Dict[str, list] = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--vary expects key=v1,v2,..., got {item!r}")
        key, values = (part.strip() for part in item.split("=", 1))
        if key in vary:
            raise ConfigError(f"--vary repeats key {key!r}")
        texts = [v.strip() for v in values.split(",") if v.strip()]
        if not texts:
            raise ConfigError(f"--vary {key} has no values")
        for t in texts:
            parse_value(key, t)  # validate every value before any run starts
        vary[key] = texts
    return vary


def sweep_cells(cfg: ExperimentConfig, vary: Dict[str, list]) -> List[tuple]:
    """Resolved configs for the Cartesian product of ``vary`` values, in key order."""
    keys = list(vary)
    cells = []
    for combo in itertools.product(*(vary[k] for k in keys)):
        assignment = dict(zip(keys, combo))
        cells.append((assignment, cfg.updated(assignment)))
    return cells


def cmd_sweep(args, cfg: ExperimentConfig) -> int:
    vary = parse_vary(args.vary)
    cells = sweep_cells(cfg, vary)
    out = output_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    rows, metric_names, failed = [], set(), 0
    for i, (assignment, cell_cfg) in enumerate(cells):
        cell_out = out / f"cell{i:03d}" if vary else out
        for algo in cell_cfg.algorithms:
            finals: Dict[str, list] = {}
            status = "ok"
            for seed in cell_cfg.seeds:
                try:
                    outcome = run_algorithm(cell_cfg, algo, seed)
                except FedRecoverError as exc:
                    status = f"failed: {exc}"
                    failed += 1
                    print(f"cell {i} {algo} seed={seed}: {exc}", file=sys.stderr)
                    break
                write_run(cell_out, cell_cfg, outcome)
                for k, v in _finals(outcome).items():
                    finals.setdefault(k, []).append(v)
            means = {k: float(np.mean(v)) for k, v in finals.items()} if status == "ok" else {}
            metric_names.update(means)
            rows.append((i, assignment, algo, status, means))
    metric_cols = sorted(metric_names)
    with (out / "sweep_summary.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["cell", *vary, "algorithm", "seeds", "status", *metric_cols])
        for i, assignment, algo, status, means in rows:
            writer.writerow([i, *(assignment[k] for k in vary), algo, len(cells[i][1].seeds), status,
                             *(repr(means[m]) if m in means else "" for m in metric_cols)])
    print(f"{len(rows)} summary rows -> {out / 'sweep_summary.csv'}")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_gen_data(args, cfg: ExperimentConfig) -> int:
    if cfg["experiment"] == "logistic_csv":
        raise ConfigError("gen-data needs a synthetic experiment (sparse_linear or low_rank)")
    seed = cfg.seeds[0]
    out = output_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    datasets, truth = synthetic_data(cfg, seed)
    for k, ds in enumerate(datasets):
        save_csv(ds, out / f"client_{k:03d}.csv")
    save_truth(truth, out / "truth.csv")
    print(f"wrote {len(datasets)} client files and truth.csv to {out}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "gen-data": cmd_gen_data}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FedRecoverError, OSError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
