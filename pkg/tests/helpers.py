"""Shared test utilities: finite differences and small fixtures."""
from __future__ import annotations

from typing import Callable

import numpy as np

from fedfsl.data import Dataset, make_synthetic_blobs, sample_episode
from fedfsl.diffcore import Batch, ModelSpec, ParamVector, init_params


def fd_grad(f: Callable[[np.ndarray], float], w0: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences, one coordinate at a time."""
    w0 = np.asarray(w0, dtype=np.float64)
    g = np.zeros_like(w0)
    for i in range(w0.size):
        up = w0.copy()
        up[i] += h
        down = w0.copy()
        down[i] -= h
        g[i] = (f(up) - f(down)) / (2 * h)
    return g


def rel_err(approx: np.ndarray, exact: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(exact)), 1e-12)
    return float(np.linalg.norm(np.asarray(approx) - np.asarray(exact)) / scale)


def small_spec(n_way: int = 3, hidden: tuple[int, ...] = (4,)) -> ModelSpec:
    return ModelSpec(input_dim=2, feature_dim=3, n_way=n_way, hidden_layers=hidden)


def random_batch(spec: ModelSpec, count: int, rng: np.random.Generator) -> Batch:
    return Batch(
        rng.normal(size=(count, spec.input_dim)),
        rng.integers(0, spec.n_way, size=count),
    )


def random_model(spec: ModelSpec, seed: int) -> ParamVector:
    return init_params(spec, np.random.default_rng(seed))


def tiny_dataset(seed: int = 0, n_classes: int = 8, n_novel: int = 0,
                 per_class: int = 30, input_dim: int = 4) -> Dataset:
    return make_synthetic_blobs(
        n_classes, per_class, input_dim, spread=0.5, seed=seed, n_novel=n_novel
    )


def episode_from(dataset: Dataset, seed: int, n_way: int = 3, n_shot: int = 2,
                 n_query: int = 3):
    rng = np.random.default_rng(seed)
    return sample_episode(
        dataset, np.arange(len(dataset)), n_way, n_shot, n_query, rng
    )


# Probe losses over the raw parameter tensor (batches ignored): closed-form
# behavior under the adaptation and meta steps.
def quadratic_probe(spec, wt, tb):
    return (wt**2).sum()


def half_quadratic_probe(spec, wt, tb):
    return 0.5 * (wt**2).sum()
