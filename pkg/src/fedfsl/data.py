"""Datasets, base/novel class splits, client partitioning, episode sampling."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffcore import Batch

RETRY_LIMIT = 20


class DataFormatError(ValueError):
    """A dataset file violates the documented text format."""


class EpisodeInfeasibleError(RuntimeError):
    """The shard cannot supply the requested N-way P-shot Q-query task."""


def rng_stream(*key: int) -> np.random.Generator:
    """Independent, reproducible generator keyed by a tuple of integers."""
    return np.random.default_rng(np.random.SeedSequence(tuple(int(k) for k in key)))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Sample matrix plus the base/novel class split.

    Base classes feed meta-training (and are the only ones partitioned across
    clients); novel classes form the shared held-out evaluation pool.
    """

    inputs: np.ndarray
    labels: np.ndarray
    base_classes: tuple[int, ...]
    novel_classes: tuple[int, ...]

    def __post_init__(self) -> None:
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ValueError(f"inputs {x.shape} and labels {y.shape} do not align")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)
        base = tuple(sorted(int(c) for c in self.base_classes))
        novel = tuple(sorted(int(c) for c in self.novel_classes))
        object.__setattr__(self, "base_classes", base)
        object.__setattr__(self, "novel_classes", novel)
        if set(base) & set(novel):
            raise ValueError(f"base and novel classes overlap: {set(base) & set(novel)}")
        present = set(np.unique(y).tolist())
        unsplit = present - set(base) - set(novel)
        if unsplit:
            raise ValueError(f"classes {sorted(unsplit)} appear in samples but in no split")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.inputs.shape[1])

    def class_indices(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == class_id)

    @property
    def base_indices(self) -> np.ndarray:
        return np.flatnonzero(np.isin(self.labels, self.base_classes))

    @property
    def novel_indices(self) -> np.ndarray:
        return np.flatnonzero(np.isin(self.labels, self.novel_classes))


def make_synthetic_blobs(
    n_classes: int,
    per_class: int,
    input_dim: int,
    spread: float,
    seed: int,
    *,
    n_novel: int = 0,
    subspace_dim: int | None = None,
    mean_scale: float = 2.0,
) -> Dataset:
    """Gaussian clusters, one mean per class, deterministic under ``seed``.

    With ``subspace_dim`` the class means live in a shared random
    ``subspace_dim``-dimensional subspace while the noise stays isotropic in
    the full input space, so a projection learned on base classes transfers to
    novel ones. The last ``n_novel`` class ids form the novel split.
    """
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    if not 0 <= n_novel <= n_classes:
        raise ValueError(f"n_novel must be in [0, n_classes], got {n_novel}")
    if spread < 0:
        raise ValueError("spread must be >= 0")
    rng = rng_stream(seed)
    rank = input_dim if subspace_dim is None else int(subspace_dim)
    if not 1 <= rank <= input_dim:
        raise ValueError(f"subspace_dim must be in [1, {input_dim}], got {rank}")
    basis, _ = np.linalg.qr(rng.normal(size=(input_dim, rank)))
    means = rng.normal(0.0, mean_scale, size=(n_classes, rank)) @ basis.T
    inputs = np.repeat(means, per_class, axis=0)
    inputs = inputs + rng.normal(0.0, 1.0, size=inputs.shape) * spread
    labels = np.repeat(np.arange(n_classes), per_class)
    split = n_classes - n_novel
    return Dataset(inputs, labels, tuple(range(split)), tuple(range(split, n_classes)))


def load_digits_like(
    path: str | Path,
    resolution: int,
    base_classes: Sequence[int],
    novel_classes: Sequence[int],
) -> Dataset:
    """Load the text format ``label,v1,...,vD`` (D = resolution^2, ``#`` comments)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    if len(tuple(novel_classes)) == 0:
        raise DataFormatError("novel split empty")
    dim = resolution * resolution
    known = set(int(c) for c in base_classes) | set(int(c) for c in novel_classes)
    rows: list[np.ndarray] = []
    labels: list[int] = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != dim + 1:
                raise DataFormatError(
                    f"{path}:{lineno}: expected {dim + 1} comma-separated fields, "
                    f"got {len(parts)}"
                )
            try:
                label = int(parts[0])
                values = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
            if label not in known:
                raise DataFormatError(f"{path}:{lineno}: unknown class id {label}")
            rows.append(values)
            labels.append(label)
    if not rows:
        raise DataFormatError(f"{path}: no samples")
    return Dataset(np.stack(rows), np.array(labels), tuple(base_classes), tuple(novel_classes))


def save_digits_like(path: str | Path, dataset: Dataset, comment: str = "") -> None:
    """Write a Dataset in the text format read by :func:`load_digits_like`."""
    path = Path(path)
    with path.open("w") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        for x, y in zip(dataset.inputs, dataset.labels):
            fh.write(f"{int(y)}," + ",".join(format(v, ".10g") for v in x) + "\n")


# ---------------------------------------------------------------------------
# Partitioning


@dataclass(frozen=True, eq=False)
class PartitionPlan:
    """Client id per sample index; novel samples stay unassigned (-1)."""

    assignments: np.ndarray
    scheme: str
    concentration: float | None
    num_clients: int

    def __post_init__(self) -> None:
        a = np.asarray(self.assignments, dtype=np.int64).reshape(-1)
        a.setflags(write=False)
        object.__setattr__(self, "assignments", a)

    def client_indices(self, client_id: int) -> np.ndarray:
        if not 0 <= client_id < self.num_clients:
            raise ValueError(f"client id {client_id} outside [0, {self.num_clients})")
        return np.flatnonzero(self.assignments == client_id)


def _largest_remainder_counts(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total``, closest to ``proportions * total``."""
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort keeps lower client ids first on remainder ties
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition(
    dataset: Dataset,
    num_clients: int,
    scheme: str,
    seed: int,
    concentration: float = 1.0,
) -> PartitionPlan:
    """Assign base-class samples to clients, class by class.

    ``iid`` deals each class round-robin after a seeded shuffle; ``dirichlet``
    draws per-class client proportions from Dirichlet(concentration * 1_K) and
    converts them to counts with the largest-remainder method so every class
    count is conserved exactly.
    """
    if num_clients < 1:
        raise ValueError(f"need at least one client, got {num_clients}")
    if scheme not in ("iid", "dirichlet"):
        raise ValueError(f"unknown partition scheme {scheme!r}")
    base_total = dataset.base_indices.size
    if num_clients > base_total:
        raise ValueError(
            f"{num_clients} clients exceed the {base_total} partitionable samples"
        )
    rng = rng_stream(seed)
    assignments = np.full(len(dataset), -1, dtype=np.int64)
    for class_id in dataset.base_classes:
        idx = dataset.class_indices(class_id)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        if scheme == "iid":
            assignments[idx] = np.arange(idx.size) % num_clients
        else:
            props = rng.dirichlet(np.full(num_clients, float(concentration)))
            counts = _largest_remainder_counts(props, idx.size)
            assignments[idx] = np.repeat(np.arange(num_clients), counts)
    return PartitionPlan(
        assignments,
        scheme,
        float(concentration) if scheme == "dirichlet" else None,
        num_clients,
    )


# ---------------------------------------------------------------------------
# Episodes


@dataclass(frozen=True, eq=False)
class Episode:
    """One N-way P-shot Q-query task with episode labels 0..N-1.

    ``class_map[j]`` is the original class id behind episode label ``j``;
    support and query index disjoint samples of the source dataset.
    """

    support: Batch
    query: Batch
    class_map: tuple[int, ...]
    support_indices: np.ndarray
    query_indices: np.ndarray

    @property
    def n_way(self) -> int:
        return len(self.class_map)

    def all_inputs(self) -> np.ndarray:
        return np.concatenate([self.support.inputs, self.query.inputs], axis=0)


def sample_episode(
    dataset: Dataset,
    shard_indices: np.ndarray,
    n_way: int,
    n_shot: int,
    n_query: int,
    rng: np.random.Generator,
    ordered: bool = False,
) -> Episode:
    """Draw an episode from a shard, classes and samples without replacement.

    Classes are drawn among those present in the shard; a draw containing a
    class with fewer than ``n_shot + n_query`` samples is rejected, the
    offenders are excluded, and the draw is retried up to ``RETRY_LIMIT``
    times before the episode is declared infeasible.

    ``ordered`` assigns episode labels in increasing original-class order
    instead of the random draw order, pinning a consistent labeling for
    supervised-style convergence studies.
    """
    shard_indices = np.asarray(shard_indices, dtype=np.int64)
    shard_labels = dataset.labels[shard_indices]
    classes, counts = np.unique(shard_labels, return_counts=True)
    if classes.size < n_way:
        raise EpisodeInfeasibleError(
            f"episode infeasible: classes ({classes.size} present, {n_way} needed)"
        )
    need = n_shot + n_query
    count_of = dict(zip(classes.tolist(), counts.tolist()))
    candidates = classes.copy()
    chosen: np.ndarray | None = None
    for _ in range(RETRY_LIMIT):
        if candidates.size < n_way:
            break
        draw = rng.choice(candidates, size=n_way, replace=False)
        short = [c for c in draw.tolist() if count_of[c] < need]
        if not short:
            chosen = draw
            break
        candidates = candidates[~np.isin(candidates, short)]
    if chosen is None:
        raise EpisodeInfeasibleError(
            f"episode infeasible: samples ({need} per class needed for {n_way}-way)"
        )
    if ordered:
        chosen = np.sort(chosen)
    support_idx: list[np.ndarray] = []
    query_idx: list[np.ndarray] = []
    for class_id in chosen.tolist():
        pool = shard_indices[shard_labels == class_id]
        picked = rng.choice(pool, size=need, replace=False)
        support_idx.append(picked[:n_shot])
        query_idx.append(picked[n_shot:])
    s_idx = np.concatenate(support_idx)
    q_idx = np.concatenate(query_idx)
    s_labels = np.repeat(np.arange(n_way), n_shot)
    q_labels = np.repeat(np.arange(n_way), n_query)
    return Episode(
        support=Batch(dataset.inputs[s_idx], s_labels),
        query=Batch(dataset.inputs[q_idx], q_labels),
        class_map=tuple(int(c) for c in chosen),
        support_indices=s_idx,
        query_indices=q_idx,
    )


def sample_batch(
    dataset: Dataset,
    shard_indices: np.ndarray,
    batch_size: int,
    n_way: int,
    n_shot: int,
    n_query: int,
    rng: np.random.Generator,
    ordered: bool = False,
) -> list[Episode]:
    """A list of ``batch_size`` independent episodes from one shard."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    return [
        sample_episode(dataset, shard_indices, n_way, n_shot, n_query, rng, ordered)
        for _ in range(batch_size)
    ]
