"""Experiment runner CLI.

Subcommands:

* ``run``              one method, one or more seeds, metrics + summary
* ``compare``          several methods under shared seeds, comparison table
* ``schedsim``         sequential vs parallel round-time simulation
* ``partition-stats``  Dirichlet partition histograms and heterogeneity

Every run directory is self-describing: it contains the canonical config,
a manifest, and per-seed JSONL metrics from which the summary can be
regenerated.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .config import (ConfigError, FullConfig, config_hash, load_config,
                     parse_trace_file, serialize_config)
from .data import DataBundle, dirichlet_partition, heterogeneity, make_bundle, partition_rows
from .orchestrators import RunState, run_experiment
from .schedsim import AvailabilityTrace, CostModel, simulate_fedsdd_parallel, simulate_sequential
from .seeding import derive_seed


def _parse_seeds(raw: str | None, default: int) -> list[int]:
    if not raw:
        return [default]
    try:
        seeds = [int(part) for part in raw.split(",") if part.strip()]
    except ValueError as err:
        raise ConfigError(f"bad --seed list {raw!r}: {err}") from err
    if not seeds:
        raise ConfigError("empty --seed list")
    return seeds


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _partition_checksum(bundle: DataBundle, total_clients: int, alpha: float,
                        seed: int) -> str:
    part = dirichlet_partition(bundle.train, total_clients, alpha,
                               derive_seed(seed, "partition"))
    h = hashlib.sha256()
    for idx in part.client_indices:
        h.update(idx.tobytes())
        h.update(b"|")
    return h.hexdigest()


def _run_one(full: FullConfig, method: str, seed: int, deterministic: bool,
             bundle: DataBundle) -> RunState:
    cfg = dataclasses.replace(full.experiment, method=method, seed=seed)
    if deterministic:
        cfg = dataclasses.replace(cfg, deterministic=True)
    return run_experiment(cfg, bundle)


def _summarize(method: str, states: list[RunState]) -> dict:
    accs = [s.final_accuracy() for s in states]
    ens = [s.metrics[-1].ensemble_accuracy for s in states]
    return {
        "method": method,
        "seed_count": len(states),
        "acc_mean": float(np.mean(accs)),
        "acc_std": float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0,
        "ensemble_acc_mean": float(np.mean(ens)),
        "kd_cost_counter": states[0].metrics[-1].teacher_cost_per_batch,
    }


_SUMMARY_COLUMNS = ["method", "seed_count", "acc_mean", "acc_std",
                    "ensemble_acc_mean", "kd_cost_counter"]


def _write_summary(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_SUMMARY_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def _print_summary(rows: list[dict]) -> None:
    header = f"{'method':<16} {'seeds':>5} {'acc':>8} {'std':>8} {'ens_acc':>8} {'kd_cost':>8}"
    print(header)
    for row in rows:
        print(f"{row['method']:<16} {row['seed_count']:>5d} "
              f"{row['acc_mean']:>8.4f} {row['acc_std']:>8.4f} "
              f"{row['ensemble_acc_mean']:>8.4f} {row['kd_cost_counter']:>8d}")


def cmd_run(args: argparse.Namespace) -> int:
    full = load_config(args.config)
    seeds = _parse_seeds(args.seed, full.experiment.seed)
    method = full.experiment.method
    out = Path(args.out or f"runs/{method}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(serialize_config(full))

    states = []
    metrics_files = {}
    for seed in seeds:
        bundle = make_bundle(full.data, seed)
        state = _run_one(full, method, seed, args.deterministic, bundle)
        states.append(state)
        metrics_path = out / f"metrics_seed{seed}.jsonl"
        _write_jsonl(metrics_path, [m.to_json() for m in state.metrics])
        _write_jsonl(out / f"plans_seed{seed}.jsonl",
                     [p.to_json() for p in state.plans])
        metrics_files[str(seed)] = metrics_path.name
        print(f"seed {seed}: final accuracy {state.final_accuracy():.4f}, "
              f"ensemble {state.metrics[-1].ensemble_accuracy:.4f}")

    summary = [_summarize(method, states)]
    _write_summary(out / "summary.csv", summary)
    manifest = {
        "config_hash": config_hash(full),
        "method": method,
        "seeds": seeds,
        "out_dir": str(out),
        "metrics_files": metrics_files,
        "summary_file": "summary.csv",
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    _print_summary(summary)
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    full = load_config(args.config)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if not methods:
        raise ConfigError("no methods given")
    seeds = _parse_seeds(args.seed, full.experiment.seed)
    out = Path(args.out or "runs/compare")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(serialize_config(full))

    bundles = {seed: make_bundle(full.data, seed) for seed in seeds}
    checksums = {
        str(seed): _partition_checksum(bundles[seed], full.experiment.total_clients,
                                       full.experiment.alpha, seed)
        for seed in seeds
    }

    rows = []
    metrics_files: dict[str, dict[str, str]] = {}
    for pos, method in enumerate(methods):
        states = []
        metrics_files[f"{pos}:{method}"] = {}
        for seed in seeds:
            state = _run_one(full, method, seed, args.deterministic, bundles[seed])
            states.append(state)
            name = f"metrics_{pos}_{method}_seed{seed}.jsonl"
            _write_jsonl(out / name, [m.to_json() for m in state.metrics])
            metrics_files[f"{pos}:{method}"][str(seed)] = name
        rows.append(_summarize(method, states))

    _write_summary(out / "comparison.csv", rows)
    manifest = {
        "config_hash": config_hash(full),
        "methods": methods,
        "seeds": seeds,
        "out_dir": str(out),
        "metrics_files": metrics_files,
        "partition_checksums": checksums,
        "summary_file": "comparison.csv",
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    _print_summary(rows)
    if len(rows) > 1:
        gap = rows[-1]["acc_mean"] - rows[0]["acc_mean"]
        print(f"gap {methods[-1]} - {methods[0]}: {gap:+.4f}")
    return 0


def cmd_schedsim(args: argparse.Namespace) -> int:
    full = load_config(args.config)
    sim = full.schedsim
    if sim.trace == "rotation":
        trace = AvailabilityTrace.rotation(sim.clients)
    else:
        trace = parse_trace_file(sim.trace_file)
        if trace.n_clients != sim.clients:
            raise ConfigError(
                f"trace file has {trace.n_clients} clients, config says {sim.clients}")
    cost = CostModel(train_cost=sim.train_cost, kd_cost=sim.kd_cost)
    sequential = simulate_sequential(sim.rounds, sim.clients, trace, cost)
    parallel = simulate_fedsdd_parallel(sim.rounds, sim.num_models, trace, cost)

    out = Path(args.out or "runs/schedsim")
    out.mkdir(parents=True, exist_ok=True)
    sequential.to_csv(out / "gantt_sequential.csv")
    parallel.to_csv(out / "gantt_parallel.csv")

    seq_steady = sequential.round_makespans[-1]
    par_steady = parallel.round_makespans[-1]
    ratio = parallel.makespan / sequential.makespan if sequential.makespan else 1.0
    print(f"sequential: makespan {sequential.makespan}, "
          f"round times {sequential.round_makespans}, steady state {seq_steady}")
    print(f"parallel:   makespan {parallel.makespan}, "
          f"round times {parallel.round_makespans}, steady state {par_steady}")
    print(f"parallel/sequential makespan ratio: {ratio:.4f}")
    return 0


def cmd_partition_stats(args: argparse.Namespace) -> int:
    full = load_config(args.config)
    seeds = _parse_seeds(args.seed, full.experiment.seed)
    out = Path(args.out or "runs/partition_stats")
    out.mkdir(parents=True, exist_ok=True)
    for seed in seeds:
        bundle = make_bundle(full.data, seed)
        part = dirichlet_partition(bundle.train, full.experiment.total_clients,
                                   full.experiment.alpha,
                                   derive_seed(seed, "partition"))
        path = out / f"partition_seed{seed}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["client_id", "class_id", "count"])
            writer.writerows(partition_rows(bundle.train, part))
        tv = heterogeneity(bundle.train, part)
        print(f"seed {seed}: alpha={full.experiment.alpha}, "
              f"mean TV distance to global histogram {tv:.4f}, wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsdd",
        description="Federated distillation simulator: runs, comparisons, scheduling")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="path to the config file")
        p.add_argument("--seed", help="comma-separated seed list, e.g. 1,2,3")
        p.add_argument("--out", help="output directory")
        p.add_argument("--deterministic", action="store_true",
                       help="force deterministic mode (zeroed timings, serial clients)")

    p_run = sub.add_parser("run", help="run the configured method")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="run several methods with shared seeds")
    common(p_cmp)
    p_cmp.add_argument("--methods", required=True,
                       help="comma-separated method list, e.g. fedavg,fedsdd")
    p_cmp.set_defaults(func=cmd_compare)

    p_sim = sub.add_parser("schedsim", help="round-time scheduling comparison")
    common(p_sim)
    p_sim.set_defaults(func=cmd_schedsim)

    p_part = sub.add_parser("partition-stats", help="partition histograms and heterogeneity")
    common(p_part)
    p_part.set_defaults(func=cmd_partition_stats)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
