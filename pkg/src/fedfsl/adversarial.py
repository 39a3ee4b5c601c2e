"""Two-stage adversarial local update with dual classifier heads.

Stage 1 freezes the feature generator and trains both classifier heads to
disagree (task losses minus a weighted output-divergence term); stage 2
freezes the heads and trains the generator to shrink that divergence. The
second head is a per-round scratch classifier that never leaves the client.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .data import Episode
from .diffcore import (
    CLASSIFIER,
    CLASSIFIER_ALT,
    GENERATOR,
    ConfigurationError,
    LossKind,
    ModelSpec,
    ParamVector,
    batch_tensors,
    batched_meta_ce,
    init_classifier,
    input_logits,
    kl_divergence,
    kl_rows_t,
    meta_loss_tensor,
    reference_kl_term,
    segment_mask,
    softmax_probs,
    stacked_episode_tensors,
    t_features,
    t_logits,
    value_and_grad,
)
from .federation import ClientState, reference_log_probs
from .fsl import InnerLoopConfig, OuterLoopConfig, make_optimizer


@dataclass(frozen=True)
class AdvConfig:
    """Weights and step counts of the two adversarial stages."""

    eta: float = 0.1
    lambda_: float = 0.1
    stage1_steps: int = 4
    stage2_steps: int = 4
    alt_init: str = "random"
    alt_scale: float = 0.01
    adapt_in_stages: bool = True
    mi_in_stages: bool = True

    def __post_init__(self) -> None:
        if self.eta < 0 or self.lambda_ < 0:
            raise ConfigurationError("stage weights must be >= 0")
        if self.stage1_steps < 1 or self.stage2_steps < 1:
            raise ConfigurationError("stage step counts must be >= 1")
        if self.alt_init not in ("random", "perturbed_copy"):
            raise ConfigurationError(f"unknown alt_init {self.alt_init!r}")
        if self.alt_scale < 0:
            raise ConfigurationError("alt_scale must be >= 0")


@dataclass(frozen=True, eq=False)
class SplitModel:
    """Dual-classifier parameter vector with segment accessors."""

    spec: ModelSpec
    params: ParamVector

    def __post_init__(self) -> None:
        if not self.spec.dual_classifier:
            raise ConfigurationError("SplitModel requires a dual-classifier spec")
        if len(self.params) != self.spec.param_count:
            raise ConfigurationError("parameter vector incompatible with dual spec")

    @property
    def generator(self) -> np.ndarray:
        return self.params.segment(GENERATOR)

    @property
    def classifier(self) -> np.ndarray:
        return self.params.segment(CLASSIFIER)

    @property
    def classifier_alt(self) -> np.ndarray:
        return self.params.segment(CLASSIFIER_ALT)

    @classmethod
    def from_base(
        cls, spec: ModelSpec, w: ParamVector, alt_values: np.ndarray
    ) -> "SplitModel":
        dual = spec.with_dual()
        values = np.concatenate([w.values, np.asarray(alt_values, dtype=np.float64)])
        return cls(dual, ParamVector.for_spec(dual, values))

    def merged(self) -> ParamVector:
        """The transmittable model: generator plus primary classifier only."""
        base = self.spec.without_dual()
        return ParamVector.for_spec(base, self.params.values[: base.param_count])


def init_alt_classifier(
    spec: ModelSpec, w: ParamVector, cfg: AdvConfig, rng: np.random.Generator
) -> np.ndarray:
    """Fresh second-head values, seeded per (client, round) by the caller."""
    if cfg.alt_init == "random":
        return init_classifier(spec, rng)
    perturbation = rng.normal(0.0, 1.0, size=spec.classifier_size) * cfg.alt_scale
    return w.segment(CLASSIFIER) + perturbation


# ---------------------------------------------------------------------------
# Output-divergence loss between the two heads


def adv_loss(
    spec: ModelSpec,
    generator: np.ndarray,
    cls_a: np.ndarray,
    cls_b: np.ndarray,
    episodes: Sequence[Episode],
) -> float:
    """Mean over episodes of KL(head-a outputs || head-b outputs).

    Both heads share the generator; rows are the union of support and query
    inputs of each episode.
    """
    if len(episodes) == 0:
        raise ValueError("empty episode batch")
    base = spec.without_dual()
    w_a = ParamVector.for_spec(base, np.concatenate([generator, cls_a]))
    w_b = ParamVector.for_spec(base, np.concatenate([generator, cls_b]))
    vals = []
    for ep in episodes:
        inputs = ep.all_inputs()
        p_a = softmax_probs(input_logits(base, w_a, inputs))
        p_b = softmax_probs(input_logits(base, w_b, inputs))
        vals.append(kl_divergence(p_a, p_b))
    return float(np.mean(vals))


def adv_loss_of(model: SplitModel, episodes: Sequence[Episode]) -> float:
    return adv_loss(
        model.spec, model.generator, model.classifier, model.classifier_alt, episodes
    )


def _dual_head_log_probs(
    spec: ModelSpec, wt: torch.Tensor, inputs: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    feats = t_features(spec, wt, inputs)
    slices = spec.segment_slices()
    logs = []
    for head in (CLASSIFIER, CLASSIFIER_ALT):
        pos = slices[head].start
        n = spec.feature_dim * spec.n_way
        W = wt[pos : pos + n].reshape(spec.feature_dim, spec.n_way)
        b = wt[pos + n : pos + n + spec.n_way]
        logs.append(torch.log_softmax(feats @ W + b, dim=-1))
    return logs[0], logs[1]


def adv_term(spec: ModelSpec, episodes: Sequence[Episode]):
    """Differentiable mean head-divergence over an episode batch.

    Episodes share row counts, so the batch mean equals the row mean over the
    stacked inputs and one forward pass suffices.
    """
    inputs = torch.tensor(
        np.concatenate([ep.all_inputs() for ep in episodes]), dtype=torch.float64
    )

    def term(wt: torch.Tensor) -> torch.Tensor:
        log_a, log_b = _dual_head_log_probs(spec, wt, inputs)
        return kl_rows_t(log_a, log_b)

    return term


def _head_task_loss(loss_kind: LossKind, head: str):
    if callable(loss_kind):
        return loss_kind
    if loss_kind == "cross_entropy":

        def loss(spec: ModelSpec, wt: torch.Tensor, tb) -> torch.Tensor:
            return torch.nn.functional.cross_entropy(
                t_logits(spec, wt, tb[0], head), tb[1]
            )

        return loss
    raise ConfigurationError(f"unknown loss kind {loss_kind!r}")


def _task_term(
    spec: ModelSpec,
    episodes: Sequence[Episode],
    head: str,
    inner_cfg: InnerLoopConfig,
    adapt_mask: np.ndarray | None,
    loss_kind: LossKind,
):
    """Mean episode meta-loss of one head, adapting only the masked segment."""
    mask_t = None if adapt_mask is None else torch.tensor(adapt_mask, dtype=torch.float64)
    if not callable(loss_kind) and loss_kind == "cross_entropy":
        stacked = stacked_episode_tensors(episodes)

        def term(wt: torch.Tensor) -> torch.Tensor:
            return batched_meta_ce(
                spec, wt, stacked, inner_cfg.alpha, inner_cfg.inner_steps,
                inner_cfg.meta_mode, head, adapt_mask=mask_t,
            )

        return term

    loss = _head_task_loss(loss_kind, head)
    tensors = [(batch_tensors(ep.support), batch_tensors(ep.query)) for ep in episodes]

    def term(wt: torch.Tensor) -> torch.Tensor:
        total = None
        for stb, qtb in tensors:
            part = meta_loss_tensor(
                spec, wt, stb, qtb, inner_cfg.alpha, inner_cfg.inner_steps,
                inner_cfg.meta_mode, loss, adapt_mask=mask_t,
            )
            total = part if total is None else total + part
        return total / len(tensors)

    return term


def _reference_term(
    spec: ModelSpec,
    episodes: Sequence[Episode],
    ref_logs: torch.Tensor,
    head: str,
):
    """Mean KL(reference || head outputs), model compared unadapted."""
    inputs = torch.tensor(
        np.concatenate([ep.all_inputs() for ep in episodes]), dtype=torch.float64
    )

    def term(wt: torch.Tensor) -> torch.Tensor:
        return reference_kl_term(spec, ref_logs, wt, inputs, head)

    return term


def stage1_objective(
    spec: ModelSpec,
    episodes: Sequence[Episode],
    eta: float,
    inner_cfg: InnerLoopConfig,
    *,
    gamma: float = 0.0,
    ref_logs: torch.Tensor | None = None,
    adapt_in_stages: bool = True,
    loss_kind: LossKind = "cross_entropy",
):
    """Head task losses minus the weighted head divergence (to maximize it)."""
    cls_mask = segment_mask(spec, CLASSIFIER) if adapt_in_stages else None
    alt_mask = segment_mask(spec, CLASSIFIER_ALT) if adapt_in_stages else None
    task_main = _task_term(spec, episodes, CLASSIFIER, inner_cfg, cls_mask, loss_kind)
    task_alt = _task_term(spec, episodes, CLASSIFIER_ALT, inner_cfg, alt_mask, loss_kind)
    disagreement = adv_term(spec, episodes) if eta != 0.0 else None
    mi_terms = []
    if gamma != 0.0 and ref_logs is not None:
        mi_terms = [
            _reference_term(spec, episodes, ref_logs, CLASSIFIER),
            _reference_term(spec, episodes, ref_logs, CLASSIFIER_ALT),
        ]

    def objective(wt: torch.Tensor) -> torch.Tensor:
        out = task_main(wt) + task_alt(wt)
        if disagreement is not None:
            out = out - eta * disagreement(wt)
        for term in mi_terms:
            out = out + gamma * term(wt)
        return out

    return objective


def stage2_objective(
    spec: ModelSpec,
    episodes: Sequence[Episode],
    lambda_: float,
    inner_cfg: InnerLoopConfig,
    *,
    gamma: float = 0.0,
    ref_logs: torch.Tensor | None = None,
    adapt_in_stages: bool = True,
    loss_kind: LossKind = "cross_entropy",
):
    """Head task losses plus the weighted head divergence (to minimize it)."""
    gen_mask = segment_mask(spec, GENERATOR) if adapt_in_stages else None
    task_main = _task_term(spec, episodes, CLASSIFIER, inner_cfg, gen_mask, loss_kind)
    task_alt = _task_term(spec, episodes, CLASSIFIER_ALT, inner_cfg, gen_mask, loss_kind)
    disagreement = adv_term(spec, episodes) if lambda_ != 0.0 else None
    mi_terms = []
    if gamma != 0.0 and ref_logs is not None:
        mi_terms = [
            _reference_term(spec, episodes, ref_logs, CLASSIFIER),
            _reference_term(spec, episodes, ref_logs, CLASSIFIER_ALT),
        ]

    def objective(wt: torch.Tensor) -> torch.Tensor:
        out = task_main(wt) + task_alt(wt)
        if disagreement is not None:
            out = out + lambda_ * disagreement(wt)
        for term in mi_terms:
            out = out + gamma * term(wt)
        return out

    return objective


def _masked_steps(
    model: SplitModel,
    objective,
    trainable_mask: np.ndarray,
    steps: int,
    outer_cfg: OuterLoopConfig,
) -> SplitModel:
    values = model.params.values
    opt = make_optimizer(outer_cfg, values.size)
    for _ in range(steps):
        _, g = value_and_grad(objective, values, mask=trainable_mask)
        values = np.where(trainable_mask, opt.update(values, g), values)
    return SplitModel(model.spec, model.params.with_values(values))


def stage1_update(
    model: SplitModel,
    episodes: Sequence[Episode],
    eta: float,
    inner_cfg: InnerLoopConfig,
    outer_cfg: OuterLoopConfig,
    *,
    steps: int = 1,
    gamma: float = 0.0,
    ref_logs: torch.Tensor | None = None,
    adapt_in_stages: bool = True,
    loss_kind: LossKind = "cross_entropy",
) -> SplitModel:
    """Update both classifier heads; the generator stays bitwise unchanged."""
    objective = stage1_objective(
        model.spec, episodes, eta, inner_cfg,
        gamma=gamma, ref_logs=ref_logs, adapt_in_stages=adapt_in_stages,
        loss_kind=loss_kind,
    )
    mask = segment_mask(model.spec, CLASSIFIER, CLASSIFIER_ALT)
    return _masked_steps(model, objective, mask, steps, outer_cfg)


def stage2_update(
    model: SplitModel,
    episodes: Sequence[Episode],
    lambda_: float,
    inner_cfg: InnerLoopConfig,
    outer_cfg: OuterLoopConfig,
    *,
    steps: int = 1,
    gamma: float = 0.0,
    ref_logs: torch.Tensor | None = None,
    adapt_in_stages: bool = True,
    loss_kind: LossKind = "cross_entropy",
) -> SplitModel:
    """Update the generator; both classifier heads stay bitwise unchanged."""
    objective = stage2_objective(
        model.spec, episodes, lambda_, inner_cfg,
        gamma=gamma, ref_logs=ref_logs, adapt_in_stages=adapt_in_stages,
        loss_kind=loss_kind,
    )
    mask = segment_mask(model.spec, GENERATOR)
    return _masked_steps(model, objective, mask, steps, outer_cfg)


def client_update_adv(
    spec: ModelSpec,
    w_global: ParamVector,
    client: ClientState,
    adv_cfg: AdvConfig,
    gamma: float,
    w_ref: ParamVector,
    inner_cfg: InnerLoopConfig,
    outer_cfg: OuterLoopConfig,
    *,
    alt_rng: np.random.Generator,
    loss_kind: LossKind = "cross_entropy",
) -> ParamVector:
    """Per-round adversarial local update.

    Receives the broadcast model, initializes a fresh second head, runs stage
    1 then stage 2 on each pre-sampled epoch batch, and returns the generator
    plus primary classifier (the second head is discarded).
    """
    alt = init_alt_classifier(spec, w_global, adv_cfg, alt_rng)
    model = SplitModel.from_base(spec, w_global, alt)
    for batch in client.episode_batches:
        ref_logs = None
        if gamma != 0.0 and adv_cfg.mi_in_stages:
            ref_logs = reference_log_probs(spec, w_ref, batch)
        model = stage1_update(
            model, batch, adv_cfg.eta, inner_cfg, outer_cfg,
            steps=adv_cfg.stage1_steps, gamma=gamma if adv_cfg.mi_in_stages else 0.0,
            ref_logs=ref_logs, adapt_in_stages=adv_cfg.adapt_in_stages,
            loss_kind=loss_kind,
        )
        model = stage2_update(
            model, batch, adv_cfg.lambda_, inner_cfg, outer_cfg,
            steps=adv_cfg.stage2_steps, gamma=gamma if adv_cfg.mi_in_stages else 0.0,
            ref_logs=ref_logs, adapt_in_stages=adv_cfg.adapt_in_stages,
            loss_kind=loss_kind,
        )
    return model.merged()
