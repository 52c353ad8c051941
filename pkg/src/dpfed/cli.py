"""Command-line interface: ``dpfed run | bound | partition | audit``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from dpfed import kernels
from dpfed.config import ConfigError, FederationConfig, load_config
from dpfed.errors import DpfedError, PrivacyError, TrainingAborted
from dpfed.federation import TRACE_SCHEMA_VERSION, RoundRecord, prepare_federation, run_training
from dpfed.mechanism import Clipped, noise_audit, risk_bound
from dpfed.seeding import derive_rng

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

CSV_COLUMNS = [
    "round", "epsilon_round", "progress", "global_loss", "accuracy", "precision", "recall", "f1",
    "lr", "wall_time_ms", "budget_remaining", "sensitivity_per_client", "noise_l2_per_client",
]


def _err(msg: str) -> None:
    print(f"dpfed: {msg}", file=sys.stderr)


def _trace_line(record: RoundRecord) -> str:
    return json.dumps(record.to_dict(), sort_keys=True) + "\n"


def _csv_row(record: RoundRecord) -> list:
    d = record.to_dict()
    m = d.pop("metrics")
    return [
        d["round"], d["epsilon_round"], d["progress"], d["global_loss"], m["accuracy"], m["precision"],
        m["recall"], m["f1"], d["lr"], d["wall_time_ms"], d["budget_remaining"],
        ";".join(repr(v) for v in d["sensitivity_per_client"]),
        ";".join(repr(v) for v in d["noise_l2_per_client"]),
    ]


def summarize(config: FederationConfig, trace: list[RoundRecord], offline: list[float] | None) -> dict:
    privacy = config.privacy
    summary = {
        "schema_version": TRACE_SCHEMA_VERSION,
        "status": "ok",
        "rounds_planned": config.training.rounds,
        "rounds_executed": len(trace),
        "final_metrics": trace[-1].metrics.as_dict() if trace else None,
        "final_loss": trace[-1].global_loss if trace else None,
        "privacy_enabled": privacy.enabled,
        "epsilon_total": None,
        "epsilon_spent": None,
        "delta": None,
        "risk_bound": None,
        "risk_bound_sensitivity": None,
        "offline_allocations": None,
        "backend": kernels.BACKEND,
    }
    if privacy.enabled and trace:
        if privacy.policy == "clipped":
            sensitivity = privacy.clip_norm
        else:
            sensitivity = max(max(r.sensitivity_per_client) for r in trace)
        summary.update(
            epsilon_total=privacy.epsilon,
            epsilon_spent=math.fsum(r.epsilon_round for r in trace),
            delta=privacy.delta,
            risk_bound=risk_bound(sensitivity, privacy.epsilon, privacy.delta, len(trace)),
            risk_bound_sensitivity=sensitivity,
            offline_allocations=offline,
        )
    return summary


def cmd_run(args) -> int:
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        _err(f"config error in {args.config}: {exc}")
        return EXIT_USAGE
    trace_path = config.resolve(config.output.trace)
    summary_path = config.resolve(config.output.summary)
    csv_path = config.resolve(config.output.csv) if config.output.csv else None
    started = time.perf_counter()
    trace: list[RoundRecord] = []
    for p in (trace_path, summary_path, csv_path):
        if p is not None:
            p.parent.mkdir(parents=True, exist_ok=True)
    with trace_path.open("w", newline="\n") as trace_fh:
        csv_fh = csv_path.open("w", newline="") if csv_path else None
        writer = csv.writer(csv_fh, lineterminator="\n") if csv_fh else None
        if writer:
            writer.writerow(CSV_COLUMNS)

        def on_round(record, _params):
            trace.append(record)
            trace_fh.write(_trace_line(record))
            trace_fh.flush()
            if writer:
                writer.writerow(_csv_row(record))

        try:
            result = run_training(config, on_round=on_round)
        except (TrainingAborted, DpfedError, ValueError, OSError) as exc:
            summary = summarize(config, trace, None)
            summary.update(
                status="failed",
                error=str(exc),
                failed_round=getattr(exc, "round_index", None),
                wall_time_ms=int((time.perf_counter() - started) * 1000),
            )
            summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
            _err(f"run failed: {exc} (partial trace with {len(trace)} rounds kept in {trace_path})")
            return EXIT_RUNTIME
        finally:
            if csv_fh:
                csv_fh.close()

    offline = result.schedule.offline_allocations() if result.schedule and result.schedule.progress_trace else None
    summary = summarize(config, trace, offline)
    summary["wall_time_ms"] = int((time.perf_counter() - started) * 1000)
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    final = summary["final_metrics"] or {}
    print(f"rounds: {len(trace)}  accuracy: {final.get('accuracy', float('nan')):.4f}  trace: {trace_path}")
    return EXIT_OK


def cmd_bound(args) -> int:
    try:
        value = risk_bound(args.sensitivity, args.epsilon, args.delta, args.rounds)
    except PrivacyError as exc:
        _err(str(exc))
        return EXIT_USAGE
    print(f"{value:.6g}")
    return EXIT_OK


def partition_table(fed) -> list[list]:
    k = fed.dataset.class_count
    rows = []
    totals = np.zeros(k, dtype=np.int64)
    for cid, shard in enumerate(fed.shards):
        counts = np.bincount(fed.dataset.labels[shard], minlength=k)
        totals += counts
        rows.append([str(cid), int(shard.size), *(int(c) for c in counts)])
    rows.append(["total", int(totals.sum()), *(int(c) for c in totals)])
    return rows


def cmd_partition(args) -> int:
    try:
        config = load_config(args.config)
        fed = prepare_federation(config)
    except ConfigError as exc:
        _err(f"config error in {args.config}: {exc}")
        return EXIT_USAGE
    except (DpfedError, ValueError, OSError) as exc:
        _err(str(exc))
        return EXIT_RUNTIME
    if not args.preview:
        for cid, shard in enumerate(fed.shards):
            print(json.dumps({"client_id": cid, "indices": [int(i) for i in shard]}))
        return EXIT_OK
    header = ["client", "samples"] + [f"class_{name}" for name in fed.dataset.label_names]
    rows = [header] + [[str(c) for c in row] for row in partition_table(fed)]
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    for row in rows:
        print("  ".join(cell.rjust(w) for cell, w in zip(row, widths)))
    return EXIT_OK


def cmd_audit(args) -> int:
    if args.draws < 1000:
        _err(f"--draws must be at least 1000, got {args.draws}")
        return EXIT_USAGE
    if not args.scale > 0 or not math.isfinite(args.scale):
        _err(f"--scale must be positive, got {args.scale}")
        return EXIT_USAGE
    if args.seed < 0:
        _err("--seed must be non-negative")
        return EXIT_USAGE
    report = noise_audit(args.scale, args.draws, derive_rng(args.seed, "audit"))
    print("\n".join(report.lines()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpfed", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a federated training experiment from a TOML config")
    p.add_argument("config", type=Path)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bound", help="print the excess empirical risk bound")
    p.add_argument("--sensitivity", type=float, required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--rounds", type=int, required=True)
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("partition", help="show how a config splits data across clients")
    p.add_argument("config", type=Path)
    p.add_argument("--preview", action="store_true", help="print per-client class histograms")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("audit", help="check Laplace sampler statistics")
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--draws", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_audit)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
