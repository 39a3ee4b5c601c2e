"""Command line interface: run / eval / dump-features / compare.

Flags mirror configuration keys (underscores become dashes); values given on
the command line override the config file, which overrides defaults. The
metrics CSV written by ``run`` is deterministic for a given config and seed;
wall-clock timings go to a separate ``timing.csv`` sidecar so reruns stay
byte-identical.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .checkpoints import SnapshotStore, load_checkpoint
from .config import _KEYS, ConfigError, ExperimentConfig, parse_config, write_config
from .data import rng_stream
from .eval import evaluate, dump_features, write_features_csv
from .experiments import run_single
from .fsl import InnerLoopConfig

METRICS_SCHEMA = "#schema=1"
METRICS_HEADER = ("run_id", "seed", "round", "algorithm", "train_loss",
                  "eval_accuracy", "eval_ci95")
OUTPUT_ROOT_ENV = "FEDFSL_OUTPUT_ROOT"


def _fmt(value: float | None) -> str:
    return "" if value is None else format(value, ".10g")


def output_root(cfg: ExperimentConfig) -> Path:
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def run_experiment(cfg: ExperimentConfig) -> int:
    """Execute every configured seed, persisting metrics and artifacts."""
    torch.set_num_threads(1)
    run_id = cfg.run_id()
    run_dir = output_root(cfg) / (cfg.run_name or run_id)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_config(cfg, run_dir / "config.ini")
    dataset = cfg.make_dataset()
    spec = cfg.model_spec(dataset)

    metric_lines = [METRICS_SCHEMA, ",".join(METRICS_HEADER)]
    timing_lines = ["seed,wall_time_s"]
    for seed in cfg.seeds:
        started = time.perf_counter()
        store = SnapshotStore(run_dir / "checkpoints" / f"seed_{seed}") \
            if cfg.save_checkpoints else None
        result = run_single(cfg, seed, dataset=dataset, store=store)
        wall = time.perf_counter() - started
        timing_lines.append(f"{seed},{wall:.3f}")
        for record in result.records:
            report = record.eval_report
            metric_lines.append(",".join([
                run_id,
                str(seed),
                str(record.round_index + 1),
                str(cfg.algorithm),
                _fmt(record.train_loss),
                _fmt(report.mean_accuracy if report else None),
                _fmt(report.ci95_halfwidth if report else None),
            ]))
        report = result.final_report
        if report is not None:
            payload = {
                "run_id": run_id,
                "seed": seed,
                "algorithm": str(cfg.algorithm),
                "mean_accuracy": report.mean_accuracy,
                "ci95_halfwidth": report.ci95_halfwidth,
                "episodes": report.episodes_evaluated,
                "per_class_accuracy": {
                    str(k): v for k, v in report.per_class_accuracy.items()
                },
            }
            (run_dir / f"eval_seed_{seed}.json").write_text(
                json.dumps(payload, indent=2, sort_keys=True) + "\n"
            )
        if cfg.save_features:
            final = result.store.get(result.records[-1].snapshot_id) \
                if result.records else result.store.get("init")
            pool = dataset.novel_indices
            dump = dump_features(spec, final, dataset.inputs[pool], dataset.labels[pool])
            write_features_csv(dump, run_dir / f"features_seed_{seed}.csv")
        print(f"[{run_id}] seed {seed}: "
              + (f"accuracy {report.mean_accuracy:.4f} ± {report.ci95_halfwidth:.4f}"
                 if report else "no evaluation scheduled"))
    (run_dir / "metrics.csv").write_text("\n".join(metric_lines) + "\n")
    (run_dir / "timing.csv").write_text("\n".join(timing_lines) + "\n")
    print(f"[{run_id}] wrote {run_dir / 'metrics.csv'}")
    return 0


# ---------------------------------------------------------------------------
# compare


def read_metrics(path: str | Path) -> list[dict[str, str]]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != METRICS_SCHEMA:
        raise ConfigError(f"{path}: missing schema marker {METRICS_SCHEMA!r}")
    reader = csv.DictReader(lines[1:])
    if tuple(reader.fieldnames or ()) != METRICS_HEADER:
        raise ConfigError(f"{path}: unexpected columns {reader.fieldnames}")
    return list(reader)


def compare_runs(paths: list[str | Path]) -> list[dict[str, str]]:
    """Per-algorithm mean and ci95 of final-round accuracy across seeds."""
    if not paths:
        raise ConfigError("compare needs at least one metrics file")
    final: dict[tuple[str, str, str], dict[str, str]] = {}
    for path in paths:
        for row in read_metrics(path):
            if not row["eval_accuracy"]:
                continue
            key = (row["algorithm"], row["run_id"], row["seed"])
            prev = final.get(key)
            if prev is None or int(row["round"]) > int(prev["round"]):
                final[key] = row
    grouped: dict[str, list[float]] = {}
    for (algorithm, _, _), row in final.items():
        grouped.setdefault(algorithm, []).append(float(row["eval_accuracy"]))
    summary = []
    for algorithm in sorted(grouped):
        accs = np.array(grouped[algorithm])
        ci = float(1.96 * np.std(accs, ddof=1) / np.sqrt(accs.size)) if accs.size > 1 else 0.0
        summary.append({
            "algorithm": algorithm,
            "n_runs": str(accs.size),
            "mean_accuracy": _fmt(float(accs.mean())),
            "ci95": _fmt(ci),
        })
    return summary


def _print_summary(summary: list[dict[str, str]]) -> None:
    widths = {k: max(len(k), *(len(row[k]) for row in summary)) for k in summary[0]}
    header = "  ".join(k.ljust(widths[k]) for k in summary[0])
    print(header)
    print("-" * len(header))
    for row in summary:
        print("  ".join(row[k].ljust(widths[k]) for k in row))


# ---------------------------------------------------------------------------
# argument parsing


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None, help="config file (INI)")
    for key in _KEYS:
        parser.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}",
                            type=str, default=None, metavar="V")


def _collect_overrides(args: argparse.Namespace) -> dict[str, str]:
    return {
        key: getattr(args, f"cfg_{key}")
        for key in _KEYS
        if getattr(args, f"cfg_{key}", None) is not None
    }


def _load_cfg(args: argparse.Namespace) -> ExperimentConfig:
    return parse_config(args.config, _collect_overrides(args))


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="fedfsl",
        description="Federated few-shot learning simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train per configured seed and persist metrics")
    _add_config_flags(p_run)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the novel pool")
    _add_config_flags(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--eval-seed", type=int, default=0)
    p_eval.add_argument("--out", type=str, default=None, help="write report JSON here")

    p_dump = sub.add_parser("dump-features", help="export generator features as CSV")
    _add_config_flags(p_dump)
    p_dump.add_argument("--checkpoint", required=True)
    p_dump.add_argument("--out", required=True)
    p_dump.add_argument("--pool", choices=("novel", "base", "all"), default="novel")

    p_cmp = sub.add_parser("compare", help="summarize metrics files per algorithm")
    p_cmp.add_argument("metrics", nargs="+")
    p_cmp.add_argument("--out", type=str, default=None, help="write summary CSV here")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return run_experiment(_load_cfg(args))
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "dump-features":
            return _cmd_dump(args)
        if args.command == "compare":
            summary = compare_runs(args.metrics)
            _print_summary(summary)
            if args.out:
                with open(args.out, "w", newline="") as fh:
                    writer = csv.DictWriter(fh, fieldnames=list(summary[0]))
                    writer.writeheader()
                    writer.writerows(summary)
            return 0
    except (ConfigError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 2


def _cmd_eval(args: argparse.Namespace) -> int:
    torch.set_num_threads(1)
    cfg = _load_cfg(args)
    spec, round_index, algorithm, w = load_checkpoint(args.checkpoint)
    dataset = cfg.make_dataset()
    report = evaluate(
        spec, w, dataset, dataset.novel_indices,
        cfg.eval_n_way, cfg.eval_n_shot, cfg.eval_n_query, cfg.eval_episodes,
        InnerLoopConfig(cfg.alpha, cfg.inner_steps, cfg.meta_mode),
        rng_stream(args.eval_seed),
    )
    print(f"checkpoint: {args.checkpoint} (round {round_index}, {algorithm})")
    print(f"accuracy: {report.mean_accuracy:.4f} ± {report.ci95_halfwidth:.4f} "
          f"over {report.episodes_evaluated} episodes")
    for class_id in report.class_ids:
        if class_id in report.per_class_accuracy:
            print(f"  class {class_id}: {report.per_class_accuracy[class_id]:.4f}")
    if args.out:
        payload = {
            "mean_accuracy": report.mean_accuracy,
            "ci95_halfwidth": report.ci95_halfwidth,
            "episodes": report.episodes_evaluated,
            "per_class_accuracy": {str(k): v for k, v in report.per_class_accuracy.items()},
            "confusion": report.confusion.tolist(),
            "class_ids": list(report.class_ids),
        }
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return 0


def _cmd_dump(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    spec, _, _, w = load_checkpoint(args.checkpoint)
    dataset = cfg.make_dataset()
    if args.pool == "novel":
        idx = dataset.novel_indices
    elif args.pool == "base":
        idx = dataset.base_indices
    else:
        idx = np.arange(len(dataset))
    dump = dump_features(spec, w, dataset.inputs[idx], dataset.labels[idx])
    write_features_csv(dump, args.out)
    print(f"wrote {len(idx)} feature rows to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
