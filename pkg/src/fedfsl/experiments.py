"""In-memory experiment drivers shared by the CLI and the test suites."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .checkpoints import SnapshotStore
from .config import ExperimentConfig
from .data import Dataset, partition
from .eval import EvalReport
from .federation import Algorithm, RoundRecord, run_training


@dataclass(frozen=True, eq=False)
class RunResult:
    algorithm: str
    seed: int
    records: list[RoundRecord]
    store: SnapshotStore

    @property
    def final_report(self) -> EvalReport | None:
        for record in reversed(self.records):
            if record.eval_report is not None:
                return record.eval_report
        return None

    @property
    def final_accuracy(self) -> float:
        report = self.final_report
        return float("nan") if report is None else report.mean_accuracy


def run_single(
    cfg: ExperimentConfig,
    seed: int,
    dataset: Dataset | None = None,
    store: SnapshotStore | None = None,
) -> RunResult:
    """One full training run for one seed; partition varies with the seed."""
    dataset = dataset if dataset is not None else cfg.make_dataset()
    plan = partition(dataset, cfg.clients, cfg.scheme, seed, cfg.concentration)
    spec = cfg.model_spec(dataset)
    store = store if store is not None else SnapshotStore()
    records = run_training(
        spec,
        dataset,
        plan,
        cfg.federation_config(),
        cfg.episode_shape(),
        cfg.inner_config(),
        cfg.outer_config(),
        adv=cfg.adv_config(),
        eval_plan=cfg.eval_plan(),
        seed=seed,
        store=store,
    )
    return RunResult(str(cfg.algorithm), seed, records, store)


def run_sweep(
    cfg: ExperimentConfig,
    algorithms: Iterable[str | Algorithm],
    seeds: Sequence[int],
    dataset: Dataset | None = None,
) -> list[RunResult]:
    """Cross product of algorithms and seeds on a shared dataset."""
    dataset = dataset if dataset is not None else cfg.make_dataset()
    results = []
    for algorithm in algorithms:
        alg_cfg = dataclasses.replace(cfg, algorithm=str(Algorithm(algorithm).value))
        for seed in seeds:
            results.append(run_single(alg_cfg, seed, dataset=dataset))
    return results


def accuracy_by_algorithm(
    results: Sequence[RunResult],
) -> dict[str, tuple[float, float, list[float]]]:
    """Per-algorithm (mean, ci95 halfwidth, per-seed accuracies) at the end."""
    grouped: dict[str, list[float]] = {}
    for result in results:
        grouped.setdefault(result.algorithm, []).append(result.final_accuracy)
    out = {}
    for algorithm, accs in grouped.items():
        arr = np.array(accs, dtype=np.float64)
        ci = 0.0
        if arr.size > 1:
            ci = float(1.96 * np.std(arr, ddof=1) / np.sqrt(arr.size))
        out[algorithm] = (float(arr.mean()), ci, accs)
    return out
