"""Few-shot evaluation on novel classes and feature-space export."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, sample_episode
from .diffcore import (
    CLASSIFIER,
    ModelSpec,
    ParamVector,
    classifier_matrices,
    forward_features,
    forward_logits,
)
from .fsl import InnerLoopConfig, adapt


@dataclass(frozen=True)
class EvalPlan:
    """When and how to evaluate during training.

    ``every=0`` evaluates at the final round only; ``episodes=0`` disables
    evaluation entirely.
    """

    n_way: int = 5
    n_shot: int = 1
    n_query: int = 15
    episodes: int = 600
    every: int = 0

    def due(self, round_index: int, total_rounds: int) -> bool:
        if self.episodes <= 0:
            return False
        if round_index == total_rounds - 1:
            return True
        return self.every > 0 and (round_index + 1) % self.every == 0


@dataclass(frozen=True, eq=False)
class EvalReport:
    """Accuracy statistics over a set of test episodes.

    The confusion matrix is indexed by original class ids (``class_ids``),
    with predictions mapped back through each episode's class map.
    """

    mean_accuracy: float
    ci95_halfwidth: float
    per_class_accuracy: dict[int, float]
    confusion: np.ndarray
    class_ids: tuple[int, ...]
    episodes_evaluated: int
    episode_accuracies: np.ndarray


def predict_labels(logits: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest class index."""
    return np.argmax(logits, axis=-1)


_EVAL_CHUNK = 128


def _predict_chunk(spec, w, episodes, inner_cfg) -> np.ndarray:
    """Adapt one batch of test episodes and predict their query labels.

    The adaptation runs on per-episode parameter rows in a single graph;
    the global model itself is never touched.
    """
    import torch

    from .diffcore import adapt_rows, stacked_episode_tensors, t_logits_rows

    s_in, s_y, q_in, _ = stacked_episode_tensors(episodes)
    wt = torch.tensor(w.values, dtype=torch.float64, requires_grad=True)
    rows = adapt_rows(
        spec, wt, s_in, s_y, inner_cfg.alpha, inner_cfg.inner_steps,
        mode="first_order", track=False,
    )
    logits = t_logits_rows(spec, rows.detach(), q_in)
    return predict_labels(logits.numpy())


def evaluate(
    spec: ModelSpec,
    w: ParamVector,
    dataset: Dataset,
    pool_indices: np.ndarray,
    n_way: int,
    n_shot: int,
    n_query: int,
    episodes: int,
    inner_cfg: InnerLoopConfig,
    seed: int | np.random.Generator,
) -> EvalReport:
    """Sample test episodes, adapt a copy on each support set, score the query.

    The global model ``w`` is never modified; adaptation operates on fresh
    copies per episode.
    """
    if episodes <= 0:
        raise ValueError("no episodes")
    rng = np.random.default_rng(seed)
    class_ids = tuple(sorted(np.unique(dataset.labels[pool_indices]).tolist()))
    index_of = {c: i for i, c in enumerate(class_ids)}
    confusion = np.zeros((len(class_ids), len(class_ids)), dtype=np.int64)
    episode_accuracies = np.empty(episodes, dtype=np.float64)
    drawn = [
        sample_episode(dataset, pool_indices, n_way, n_shot, n_query, rng)
        for _ in range(episodes)
    ]
    for start in range(0, episodes, _EVAL_CHUNK):
        chunk = drawn[start : start + _EVAL_CHUNK]
        for e, (ep, preds) in enumerate(zip(chunk, _predict_chunk(spec, w, chunk, inner_cfg)),
                                        start=start):
            truth = ep.query.labels
            episode_accuracies[e] = float(np.mean(preds == truth))
            class_map = np.array(ep.class_map)
            for true_label, pred_label in zip(truth, preds):
                confusion[index_of[int(class_map[true_label])],
                          index_of[int(class_map[pred_label])]] += 1
    total = int(confusion.sum())
    mean_accuracy = float(np.trace(confusion) / total)
    if episodes > 1:
        ci95 = float(1.96 * np.std(episode_accuracies, ddof=1) / np.sqrt(episodes))
    else:
        ci95 = 0.0
    row_sums = confusion.sum(axis=1)
    per_class = {
        c: float(confusion[i, i] / row_sums[i])
        for i, c in enumerate(class_ids)
        if row_sums[i] > 0
    }
    return EvalReport(
        mean_accuracy=mean_accuracy,
        ci95_halfwidth=ci95,
        per_class_accuracy=per_class,
        confusion=confusion,
        class_ids=class_ids,
        episodes_evaluated=episodes,
        episode_accuracies=episode_accuracies,
    )


def pool_reports(reports: list[EvalReport]) -> EvalReport:
    """Merge reports of several models scored on identical episode streams
    (the no-aggregation baseline averages client results this way)."""
    if not reports:
        raise ValueError("no reports to pool")
    if len(reports) == 1:
        return reports[0]
    class_ids = reports[0].class_ids
    confusion = np.sum([r.confusion for r in reports], axis=0)
    accs = np.concatenate([r.episode_accuracies for r in reports])
    total = int(confusion.sum())
    row_sums = confusion.sum(axis=1)
    per_class = {
        c: float(confusion[i, i] / row_sums[i])
        for i, c in enumerate(class_ids)
        if row_sums[i] > 0
    }
    return EvalReport(
        mean_accuracy=float(np.trace(confusion) / total),
        ci95_halfwidth=float(1.96 * np.std(accs, ddof=1) / np.sqrt(accs.size)),
        per_class_accuracy=per_class,
        confusion=confusion,
        class_ids=class_ids,
        episodes_evaluated=int(accs.size),
        episode_accuracies=accs,
    )


# ---------------------------------------------------------------------------
# Feature export


@dataclass(frozen=True, eq=False)
class FeatureDump:
    """Per-sample generator features plus the classifier decision parameters."""

    labels: np.ndarray
    features: np.ndarray
    classifier_weight: np.ndarray
    classifier_bias: np.ndarray


def dump_features(
    spec: ModelSpec, w: ParamVector, inputs: np.ndarray, labels: np.ndarray
) -> FeatureDump:
    feats = forward_features(spec, w, np.asarray(inputs, dtype=np.float64))
    W, b = classifier_matrices(spec, w, CLASSIFIER)
    return FeatureDump(
        labels=np.asarray(labels, dtype=np.int64).copy(),
        features=feats,
        classifier_weight=W.copy(),
        classifier_bias=b.copy(),
    )


def write_features_csv(dump: FeatureDump, path: str | Path) -> None:
    """CSV rows ``class,f1,...,fD``; classifier parameters go in # comments."""
    dim = dump.features.shape[1]
    lines = []
    for j in range(dump.classifier_weight.shape[1]):
        col = ",".join(format(v, ".10g") for v in dump.classifier_weight[:, j])
        lines.append(f"# classifier_weight[{j}]={col}")
    bias = ",".join(format(v, ".10g") for v in dump.classifier_bias)
    lines.append(f"# classifier_bias={bias}")
    lines.append("class," + ",".join(f"f{i + 1}" for i in range(dim)))
    for y, row in zip(dump.labels, dump.features):
        lines.append(f"{int(y)}," + ",".join(format(v, ".10g") for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def separation_ratio(dump: FeatureDump) -> float:
    """Mean inter-class centroid distance over mean intra-class spread."""
    classes = np.unique(dump.labels)
    centroids = np.stack(
        [dump.features[dump.labels == c].mean(axis=0) for c in classes]
    )
    spreads = [
        float(np.linalg.norm(dump.features[dump.labels == c] - centroids[i], axis=1).mean())
        for i, c in enumerate(classes)
    ]
    inter = [
        float(np.linalg.norm(centroids[i] - centroids[j]))
        for i in range(len(classes))
        for j in range(i + 1, len(classes))
    ]
    if not inter:
        raise ValueError("separation ratio needs at least two classes")
    intra = float(np.mean(spreads))
    return float(np.mean(inter) / max(intra, 1e-12))
