"""Simulated client-server training loop and its local update variants.

Clients within a round are independent (the loop body is pure given the
per-client seed streams) and are reduced in client-id order, so a run is
deterministic end to end. The server aggregation is the synchronization
barrier between rounds.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
import torch

from .checkpoints import SnapshotStore
from .data import Dataset, Episode, PartitionPlan, rng_stream, sample_batch
from .diffcore import (
    CLASSIFIER,
    ConfigurationError,
    LossKind,
    ModelSpec,
    ParamVector,
    adapt_tensor,
    batch_tensors,
    init_params,
    input_logits,
    kl_divergence,
    reference_kl_term,
    resolve_loss,
    softmax_probs,
    t_logits,
)
from .eval import EvalPlan, EvalReport, evaluate, pool_reports
from .fsl import ExtraTerm, InnerLoopConfig, OuterLoopConfig, local_fsl_loss, meta_step

# Sub-stream tags: episode sampling, initialization, evaluation, and the
# second-classifier init draw from independent streams per (seed, round, client).
TAG_INIT = 0
TAG_EPISODES = 1
TAG_ALT = 2
TAG_EVAL = 3
TAG_PARTITION = 4


class Algorithm(str, Enum):
    LOCAL = "local"
    NAIVE = "naive"
    PROX = "prox"
    MI = "mi"
    MI_ADV = "mi_adv"


@dataclass(frozen=True)
class EpisodeShape:
    """Task shape used for meta-training episodes.

    ``ordered`` pins episode labels to increasing original-class order, which
    turns episodic training into consistent supervised minibatching (used by
    the convex convergence study).
    """

    n_way: int = 5
    n_shot: int = 1
    n_query: int = 5
    ordered: bool = False

    def __post_init__(self) -> None:
        if min(self.n_way, self.n_shot, self.n_query) < 1:
            raise ConfigurationError(f"episode shape must be positive, got {self}")


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 2
    rounds: int = 10
    algorithm: Algorithm = Algorithm.NAIVE
    gamma: float = 0.2
    mu_prox: float = 0.0
    mi_reference: str = "global"
    local_epochs: int = 1
    episodes_per_round: int = 4
    mi_on_adapted: bool = False

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc
        if self.num_clients < 1:
            raise ConfigurationError(f"num_clients must be >= 1, got {self.num_clients}")
        if self.rounds < 0:
            raise ConfigurationError(f"rounds must be >= 0, got {self.rounds}")
        if self.gamma < 0:
            raise ConfigurationError(f"gamma must be >= 0, got {self.gamma}")
        if self.mu_prox < 0:
            raise ConfigurationError(f"mu_prox must be >= 0, got {self.mu_prox}")
        if self.mi_reference not in ("global", "k_exclusive"):
            raise ConfigurationError(f"unknown mi_reference {self.mi_reference!r}")
        if self.local_epochs < 0:
            raise ConfigurationError(f"local_epochs must be >= 0, got {self.local_epochs}")
        if self.episodes_per_round < 1:
            raise ConfigurationError(
                f"episodes_per_round must be >= 1, got {self.episodes_per_round}"
            )
        if (
            self.algorithm in (Algorithm.MI, Algorithm.MI_ADV)
            and self.mi_reference == "k_exclusive"
            and self.num_clients < 2
        ):
            raise ConfigurationError("k-exclusive undefined for a single client")


@dataclass
class ClientState:
    client_id: int
    shard: np.ndarray
    model: ParamVector
    episode_batches: list[list[Episode]] = field(default_factory=list)
    batch_weight: int = 0


@dataclass(frozen=True, eq=False)
class RoundRecord:
    round_index: int
    client_losses: dict[int, float]
    train_loss: float
    snapshot_id: str
    eval_report: EvalReport | None = None


# ---------------------------------------------------------------------------
# Aggregation


def aggregate(models: Sequence[tuple[ParamVector, float]]) -> ParamVector:
    """Weight-normalized average of parameter vectors, in list order."""
    if len(models) == 0:
        raise ValueError("nothing to aggregate")
    first, _ = models[0]
    for w, _ in models[1:]:
        if len(w) != len(first):
            raise ConfigurationError("cannot aggregate vectors of different lengths")
    total = float(sum(weight for _, weight in models))
    if total <= 0:
        weights = [1.0 / len(models)] * len(models)
    else:
        weights = [weight / total for _, weight in models]
    acc = np.zeros(len(first), dtype=np.float64)
    for (w, _), p in zip(models, weights):
        acc = acc + p * w.values
    return first.with_values(acc)


def k_exclusive(
    models: Sequence[ParamVector], weights: Sequence[float], k: int
) -> ParamVector:
    """Weighted average over all clients except ``k``."""
    if len(models) < 2:
        raise ValueError("k-exclusive undefined")
    if not 0 <= k < len(models):
        raise ValueError(f"client index {k} outside [0, {len(models)})")
    rest = [(w, weight) for i, (w, weight) in enumerate(zip(models, weights)) if i != k]
    return aggregate(rest)


# ---------------------------------------------------------------------------
# Divergence-to-reference regularizer


def mi_loss(
    spec: ModelSpec,
    w_ref: ParamVector,
    w_k: ParamVector,
    episodes: Sequence[Episode],
) -> float:
    """Mean over episodes of KL(reference model || client model) outputs.

    Computed on the union of support and query inputs of each episode; the
    reference model is a constant (no gradient flows into it).
    """
    if len(episodes) == 0:
        raise ValueError("empty episode batch")
    vals = []
    for ep in episodes:
        inputs = ep.all_inputs()
        p_ref = softmax_probs(input_logits(spec, w_ref, inputs))
        p_k = softmax_probs(input_logits(spec, w_k, inputs))
        vals.append(kl_divergence(p_ref, p_k))
    return float(np.mean(vals))


def stacked_episode_inputs(episodes: Sequence[Episode]) -> torch.Tensor:
    """Support and query inputs of every episode, concatenated row-wise."""
    return torch.tensor(
        np.concatenate([ep.all_inputs() for ep in episodes]), dtype=torch.float64
    )


def reference_log_probs(
    spec: ModelSpec, w_ref: ParamVector, episodes: Sequence[Episode]
) -> torch.Tensor:
    """Constant log-probabilities of the reference model, stacked row-wise."""
    with torch.no_grad():
        wt = torch.tensor(w_ref.values, dtype=torch.float64)
        return torch.log_softmax(
            t_logits(spec, wt, stacked_episode_inputs(episodes)), dim=-1
        )


def mi_objective(
    spec: ModelSpec,
    episodes: Sequence[Episode],
    ref_logs: torch.Tensor,
    *,
    head: str = CLASSIFIER,
    at_adapted: bool = False,
    inner_cfg: InnerLoopConfig | None = None,
    loss_kind: LossKind = "cross_entropy",
) -> ExtraTerm:
    """Differentiable mean KL(reference || model) term over an episode batch.

    By default the client model is compared unadapted, so the whole batch
    reduces to a single stacked forward pass (episodes share their row
    counts). ``at_adapted`` flips the comparison to the support-adapted
    parameters of each episode.
    """
    inputs = stacked_episode_inputs(episodes)
    loss = resolve_loss(loss_kind)
    if not at_adapted:

        def term(wt: torch.Tensor) -> torch.Tensor:
            return reference_kl_term(spec, ref_logs, wt, inputs, head)

        return term

    per_episode = [torch.tensor(ep.all_inputs(), dtype=torch.float64) for ep in episodes]
    splits = [x.shape[0] for x in per_episode]
    ref_per_episode = list(torch.split(ref_logs, splits))
    supports = [batch_tensors(ep.support) for ep in episodes]

    def term(wt: torch.Tensor) -> torch.Tensor:
        assert inner_cfg is not None
        total = None
        for x, ref_log, stb in zip(per_episode, ref_per_episode, supports):
            w_eff = adapt_tensor(
                lambda w: loss(spec, w, stb),
                wt,
                inner_cfg.alpha,
                inner_cfg.inner_steps,
                first_order=(inner_cfg.meta_mode == "first_order"),
            )
            part = reference_kl_term(spec, ref_log, w_eff, x, head)
            total = part if total is None else total + part
        return total / len(per_episode)

    return term


def prox_objective(anchor_values: np.ndarray) -> ExtraTerm:
    """Squared-distance-to-anchor penalty ``0.5 * ||w - anchor||^2``."""
    anchor = torch.tensor(np.asarray(anchor_values, dtype=np.float64))

    def term(wt: torch.Tensor) -> torch.Tensor:
        return 0.5 * torch.sum((wt - anchor) ** 2)

    return term


# ---------------------------------------------------------------------------
# Client updates


def client_update_naive(
    spec: ModelSpec,
    w_global: ParamVector,
    client: ClientState,
    inner_cfg: InnerLoopConfig,
    outer_cfg: OuterLoopConfig,
    loss_kind: LossKind = "cross_entropy",
) -> ParamVector:
    """One meta step per pre-sampled epoch batch, starting from ``w_global``."""
    w = w_global
    for batch in client.episode_batches:
        w = meta_step(spec, w, batch, inner_cfg, outer_cfg, loss_kind=loss_kind)
    return w


def client_update_mi(
    spec: ModelSpec,
    w_global: ParamVector,
    w_ref: ParamVector,
    client: ClientState,
    gamma: float,
    inner_cfg: InnerLoopConfig,
    outer_cfg: OuterLoopConfig,
    *,
    mi_on_adapted: bool = False,
    loss_kind: LossKind = "cross_entropy",
) -> ParamVector:
    """Meta steps on the task loss plus gamma-weighted divergence to ``w_ref``."""
    if gamma < 0:
        raise ConfigurationError(f"gamma must be >= 0, got {gamma}")
    if gamma == 0.0:
        return client_update_naive(spec, w_global, client, inner_cfg, outer_cfg, loss_kind)
    w = w_global
    for batch in client.episode_batches:
        ref_logs = reference_log_probs(spec, w_ref, batch)
        mi_term = mi_objective(
            spec, batch, ref_logs,
            at_adapted=mi_on_adapted, inner_cfg=inner_cfg, loss_kind=loss_kind,
        )
        extra: ExtraTerm = lambda wt, term=mi_term: gamma * term(wt)
        w = meta_step(
            spec, w, batch, inner_cfg, outer_cfg, loss_kind=loss_kind, extra_term=extra
        )
    return w


def client_update_prox(
    spec: ModelSpec,
    w_global: ParamVector,
    client: ClientState,
    mu_prox: float,
    inner_cfg: InnerLoopConfig,
    outer_cfg: OuterLoopConfig,
    loss_kind: LossKind = "cross_entropy",
) -> ParamVector:
    """Meta steps on the task loss plus ``(mu/2)||w - w_global||^2``."""
    if mu_prox < 0:
        raise ConfigurationError(f"mu_prox must be >= 0, got {mu_prox}")
    if mu_prox == 0.0:
        return client_update_naive(spec, w_global, client, inner_cfg, outer_cfg, loss_kind)
    anchor = prox_objective(w_global.values)
    extra: ExtraTerm = lambda wt: mu_prox * anchor(wt)
    w = w_global
    for batch in client.episode_batches:
        w = meta_step(
            spec, w, batch, inner_cfg, outer_cfg, loss_kind=loss_kind, extra_term=extra
        )
    return w


# ---------------------------------------------------------------------------
# Round and training loops


@dataclass(frozen=True)
class TrainingContext:
    spec: ModelSpec
    dataset: Dataset
    fed: FederationConfig
    task: EpisodeShape
    inner: InnerLoopConfig
    outer: OuterLoopConfig
    adv: "AdvConfig | None" = None
    eval_plan: EvalPlan | None = None
    seed: int = 0
    store: SnapshotStore | None = None
    loss_kind: LossKind = "cross_entropy"


def _update_for(
    ctx: TrainingContext,
    round_index: int,
    client: ClientState,
    w_start: ParamVector,
    w_ref: ParamVector | None,
) -> ParamVector:
    algo = ctx.fed.algorithm
    if algo in (Algorithm.NAIVE, Algorithm.LOCAL):
        return client_update_naive(
            ctx.spec, w_start, client, ctx.inner, ctx.outer, ctx.loss_kind
        )
    if algo is Algorithm.PROX:
        return client_update_prox(
            ctx.spec, w_start, client, ctx.fed.mu_prox, ctx.inner, ctx.outer, ctx.loss_kind
        )
    if algo is Algorithm.MI:
        assert w_ref is not None
        return client_update_mi(
            ctx.spec, w_start, w_ref, client, ctx.fed.gamma, ctx.inner, ctx.outer,
            mi_on_adapted=ctx.fed.mi_on_adapted, loss_kind=ctx.loss_kind,
        )
    if algo is Algorithm.MI_ADV:
        from .adversarial import client_update_adv

        if ctx.adv is None:
            raise ConfigurationError("algorithm 'mi_adv' requires an AdvConfig")
        assert w_ref is not None
        return client_update_adv(
            ctx.spec, w_start, client, ctx.adv, ctx.fed.gamma, w_ref,
            ctx.inner, ctx.outer,
            alt_rng=rng_stream(ctx.seed, TAG_ALT, round_index, client.client_id),
            loss_kind=ctx.loss_kind,
        )
    raise ConfigurationError(f"no execution path for algorithm {algo!r}")


def _evaluate_round(
    ctx: TrainingContext, round_index: int, clients: list[ClientState],
    global_model: ParamVector,
) -> EvalReport | None:
    plan = ctx.eval_plan
    if plan is None or not plan.due(round_index, ctx.fed.rounds):
        return None
    pool = ctx.dataset.novel_indices
    if ctx.fed.algorithm is Algorithm.LOCAL:
        # shared test stream: every client model faces identical episodes
        reports = [
            evaluate(
                ctx.spec, c.model, ctx.dataset, pool,
                plan.n_way, plan.n_shot, plan.n_query, plan.episodes,
                ctx.inner, rng_stream(ctx.seed, TAG_EVAL, round_index),
            )
            for c in clients
        ]
        return pool_reports(reports)
    return evaluate(
        ctx.spec, global_model, ctx.dataset, pool,
        plan.n_way, plan.n_shot, plan.n_query, plan.episodes,
        ctx.inner, rng_stream(ctx.seed, TAG_EVAL, round_index),
    )


def run_round(
    ctx: TrainingContext,
    round_index: int,
    clients: list[ClientState],
    global_model: ParamVector,
    prev_models: list[ParamVector] | None = None,
    prev_weights: list[float] | None = None,
) -> tuple[ParamVector, RoundRecord, list[ParamVector]]:
    """Execute one communication round.

    Returns the new global model, the round record, and the per-client models
    before the broadcast (the next round's exclusive references). Clients run
    in client-id order; any client failure aborts the round with a diagnostic
    naming the client. For ``local`` no aggregation happens and the returned
    global model is the incoming one.
    """
    fed = ctx.fed
    losses: dict[int, float] = {}
    for client in clients:
        rng = rng_stream(ctx.seed, TAG_EPISODES, round_index, client.client_id)
        try:
            client.episode_batches = [
                sample_batch(
                    ctx.dataset, client.shard, fed.episodes_per_round,
                    ctx.task.n_way, ctx.task.n_shot, ctx.task.n_query, rng,
                    ctx.task.ordered,
                )
                for _ in range(fed.local_epochs)
            ]
            client.batch_weight = sum(len(b) for b in client.episode_batches)
            w_start = client.model if fed.algorithm is Algorithm.LOCAL else global_model
            w_ref = None
            if fed.algorithm in (Algorithm.MI, Algorithm.MI_ADV):
                if fed.mi_reference == "k_exclusive" and prev_models is not None:
                    w_ref = k_exclusive(prev_models, prev_weights, client.client_id)
                else:
                    w_ref = global_model
            client.model = _update_for(ctx, round_index, client, w_start, w_ref)
            if client.episode_batches:
                losses[client.client_id] = local_fsl_loss(
                    ctx.spec, client.model, client.episode_batches[-1],
                    ctx.inner, ctx.loss_kind,
                )
            else:
                losses[client.client_id] = float("nan")
        except Exception as exc:
            raise RuntimeError(
                f"round {round_index}: client {client.client_id} failed: {exc}"
            ) from exc

    snapshot_id = f"round_{round_index:04d}"
    local_models = [c.model for c in clients]
    if fed.algorithm is Algorithm.LOCAL:
        new_global = global_model
        if ctx.store is not None:
            for client in clients:
                ctx.store.put(
                    f"{snapshot_id}.client_{client.client_id:02d}",
                    ctx.spec, round_index, fed.algorithm.value, client.model,
                )
    else:
        new_global = aggregate([(c.model, float(c.batch_weight)) for c in clients])
        for client in clients:
            client.model = new_global
        if ctx.store is not None:
            ctx.store.put(snapshot_id, ctx.spec, round_index, fed.algorithm.value, new_global)

    weights = np.array([c.batch_weight for c in clients], dtype=np.float64)
    loss_vec = np.array([losses[c.client_id] for c in clients])
    if weights.sum() > 0:
        train_loss = float(np.sum(weights * loss_vec) / weights.sum())
    else:
        train_loss = float(np.mean(loss_vec))
    record = RoundRecord(
        round_index=round_index,
        client_losses=losses,
        train_loss=train_loss,
        snapshot_id=snapshot_id,
        eval_report=_evaluate_round(ctx, round_index, clients, new_global),
    )
    return new_global, record, local_models


def run_training(
    spec: ModelSpec,
    dataset: Dataset,
    plan: PartitionPlan,
    fed: FederationConfig,
    task: EpisodeShape,
    inner: InnerLoopConfig,
    outer: OuterLoopConfig,
    *,
    adv: "AdvConfig | None" = None,
    eval_plan: EvalPlan | None = None,
    seed: int = 0,
    store: SnapshotStore | None = None,
    loss_kind: LossKind = "cross_entropy",
) -> list[RoundRecord]:
    """Run ``fed.rounds`` communication rounds; deterministic under ``seed``.

    Snapshots land in ``store`` under ids ``init`` and ``round_NNNN`` (plus
    ``round_NNNN.client_KK`` for the no-aggregation baseline).
    """
    if plan.num_clients != fed.num_clients:
        raise ConfigurationError(
            f"partition has {plan.num_clients} clients, config expects {fed.num_clients}"
        )
    store = store if store is not None else SnapshotStore()
    ctx = TrainingContext(
        spec=spec, dataset=dataset, fed=fed, task=task, inner=inner, outer=outer,
        adv=adv, eval_plan=eval_plan, seed=seed, store=store, loss_kind=loss_kind,
    )
    w0 = init_params(spec, rng_stream(seed, TAG_INIT))
    if store is not None:
        store.put("init", spec, -1, fed.algorithm.value, w0)
    clients = [
        ClientState(client_id=k, shard=plan.client_indices(k), model=w0)
        for k in range(fed.num_clients)
    ]
    global_model = w0
    prev_models: list[ParamVector] | None = None
    prev_weights: list[float] | None = None
    records: list[RoundRecord] = []
    for t in range(fed.rounds):
        global_model, record, local_models = run_round(
            ctx, t, clients, global_model, prev_models, prev_weights
        )
        records.append(record)
        if fed.algorithm is not Algorithm.LOCAL:
            prev_models = local_models
            prev_weights = [float(c.batch_weight) for c in clients]
    return records
