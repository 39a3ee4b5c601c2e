"""Episodic meta-learning primitives: adapt on support, optimize on query."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from . import diffcore
from .data import Episode
from .diffcore import (
    Batch,
    ConfigurationError,
    LossKind,
    ModelSpec,
    ParamVector,
    batch_tensors,
    meta_loss_tensor,
    resolve_loss,
    value_and_grad,
)


@dataclass(frozen=True)
class InnerLoopConfig:
    """Adaptation-step settings. ``alpha=0`` disables the inner loop, reducing
    episode losses to plain supervised evaluation."""

    alpha: float = 0.01
    inner_steps: int = 1
    meta_mode: str = "exact"

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")
        if self.inner_steps < 1:
            raise ConfigurationError(f"inner_steps must be >= 1, got {self.inner_steps}")
        if self.meta_mode not in ("exact", "first_order"):
            raise ConfigurationError(f"unknown meta_mode {self.meta_mode!r}")
        if self.meta_mode == "exact" and self.inner_steps != 1:
            raise ConfigurationError("meta_mode='exact' requires inner_steps == 1")


@dataclass(frozen=True)
class OuterLoopConfig:
    """Outer optimization settings for the per-episode-batch update."""

    beta: float = 1e-3
    optimizer: str = "sgd"
    clip_norm: float | None = None

    def __post_init__(self) -> None:
        if self.beta <= 0:
            raise ConfigurationError(f"beta must be > 0, got {self.beta}")
        if self.optimizer not in ("sgd", "adaptive"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigurationError("clip_norm must be positive when set")


class SgdOptimizer:
    def __init__(self, cfg: OuterLoopConfig):
        self.cfg = cfg

    def update(self, values: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return values - self.cfg.beta * _clipped(grad, self.cfg.clip_norm)


class AdamOptimizer:
    """Adaptive-moment estimation with bias correction."""

    def __init__(self, cfg: OuterLoopConfig, dim: int,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.cfg = cfg
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0

    def update(self, values: np.ndarray, grad: np.ndarray) -> np.ndarray:
        g = _clipped(grad, self.cfg.clip_norm)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return values - self.cfg.beta * m_hat / (np.sqrt(v_hat) + self.eps)


def _clipped(grad: np.ndarray, clip_norm: float | None) -> np.ndarray:
    if clip_norm is None:
        return grad
    norm = float(np.linalg.norm(grad))
    if norm <= clip_norm:
        return grad
    return grad * (clip_norm / norm)


def make_optimizer(cfg: OuterLoopConfig, dim: int):
    if cfg.optimizer == "adaptive":
        return AdamOptimizer(cfg, dim)
    return SgdOptimizer(cfg)


# ---------------------------------------------------------------------------
# Losses


def adapt(
    spec: ModelSpec,
    w: ParamVector,
    support: Batch,
    cfg: InnerLoopConfig,
    loss_kind: LossKind = "cross_entropy",
) -> ParamVector:
    """Inner-loop SGD on the support loss: ``inner_steps`` steps of size alpha."""
    current = w
    for _ in range(cfg.inner_steps):
        if cfg.alpha == 0.0:
            break
        g = diffcore.grad(spec, current, support, loss_kind)
        current = current.with_values(current.values - cfg.alpha * g.values)
    return current


def _batch_loss_value(
    spec: ModelSpec, w: ParamVector, batch: Batch, loss_kind: LossKind
) -> float:
    loss = resolve_loss(loss_kind)
    if loss is diffcore.cross_entropy_tloss:
        return diffcore.cross_entropy_loss(spec, w, batch)
    with torch.no_grad():
        wt = torch.tensor(w.values, dtype=torch.float64)
        return float(loss(spec, wt, batch_tensors(batch)))


def episode_loss(
    spec: ModelSpec,
    w: ParamVector,
    episode: Episode,
    cfg: InnerLoopConfig,
    loss_kind: LossKind = "cross_entropy",
) -> float:
    """Query loss at the support-adapted parameters."""
    adapted = adapt(spec, w, episode.support, cfg, loss_kind)
    return _batch_loss_value(spec, adapted, episode.query, loss_kind)


def local_fsl_loss(
    spec: ModelSpec,
    w: ParamVector,
    episodes: Sequence[Episode],
    cfg: InnerLoopConfig,
    loss_kind: LossKind = "cross_entropy",
) -> float:
    """Mean episode loss over a batch of tasks."""
    if len(episodes) == 0:
        raise ValueError("empty episode batch")
    return float(np.mean([episode_loss(spec, w, ep, cfg, loss_kind) for ep in episodes]))


# ---------------------------------------------------------------------------
# Outer step

ExtraTerm = Callable[[torch.Tensor], torch.Tensor]


def batch_meta_objective(
    spec: ModelSpec,
    episodes: Sequence[Episode],
    cfg: InnerLoopConfig,
    loss_kind: LossKind = "cross_entropy",
    extra_term: ExtraTerm | None = None,
    adapt_mask: np.ndarray | None = None,
) -> Callable[[torch.Tensor], torch.Tensor]:
    """Torch objective: mean episode meta-loss plus an optional extra term.

    The extra term (e.g. a divergence or proximal penalty) receives the
    unadapted flat parameter tensor.
    """
    if len(episodes) == 0:
        raise ValueError("empty episode batch")
    loss = resolve_loss(loss_kind)
    mask_t = None if adapt_mask is None else torch.tensor(adapt_mask, dtype=torch.float64)

    if loss is diffcore.cross_entropy_tloss:
        # fast path: the whole episode batch shares one graph
        stacked = diffcore.stacked_episode_tensors(episodes)

        def objective(wt: torch.Tensor) -> torch.Tensor:
            out = diffcore.batched_meta_ce(
                spec, wt, stacked, cfg.alpha, cfg.inner_steps, cfg.meta_mode,
                adapt_mask=mask_t,
            )
            if extra_term is not None:
                out = out + extra_term(wt)
            return out

        return objective

    tensors = [(batch_tensors(ep.support), batch_tensors(ep.query)) for ep in episodes]

    def objective(wt: torch.Tensor) -> torch.Tensor:
        total = None
        for stb, qtb in tensors:
            term = meta_loss_tensor(
                spec, wt, stb, qtb, cfg.alpha, cfg.inner_steps, cfg.meta_mode, loss,
                adapt_mask=mask_t,
            )
            total = term if total is None else total + term
        out = total / len(tensors)
        if extra_term is not None:
            out = out + extra_term(wt)
        return out

    return objective


def meta_step(
    spec: ModelSpec,
    w: ParamVector,
    episodes: Sequence[Episode],
    inner_cfg: InnerLoopConfig,
    outer_cfg: OuterLoopConfig,
    *,
    loss_kind: LossKind = "cross_entropy",
    extra_term: ExtraTerm | None = None,
    trainable_mask: np.ndarray | None = None,
    optimizer=None,
) -> ParamVector:
    """One outer update from the mean meta-gradient over the episode batch.

    Coordinates outside ``trainable_mask`` are left bitwise untouched. A
    stateful optimizer may be passed to keep adaptive moments across steps.
    """
    objective = batch_meta_objective(
        spec, episodes, inner_cfg, loss_kind, extra_term,
        adapt_mask=trainable_mask,
    )
    _, g = value_and_grad(objective, w.values, mask=trainable_mask)
    opt = optimizer if optimizer is not None else make_optimizer(outer_cfg, len(w))
    new_values = opt.update(w.values, g)
    if trainable_mask is not None:
        new_values = np.where(trainable_mask, new_values, w.values)
    return w.with_values(new_values)
