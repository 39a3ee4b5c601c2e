"""Differentiable numerical core.

Models are small MLPs split into a feature generator and a linear classifier
head, with all trainable parameters stored in one flat float64 vector carrying
named segment ranges. Value computations (forward pass, losses) are plain
numpy; gradients run through torch autograd on float64 tensors, with graph
construction through the inner adaptation step so the second-order term of the
meta-gradient is exact.

Everything here is pure: inputs are never mutated and identical inputs produce
identical outputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence, Union

import numpy as np
import torch

EPS_PROB = 1e-12

GENERATOR = "generator"
CLASSIFIER = "classifier"
CLASSIFIER_ALT = "classifier_alt"


class ConfigurationError(ValueError):
    """Shapes or options that do not line up (model vs params vs batch)."""


class NumericsError(ArithmeticError):
    """An operation produced non-finite parameter values."""


# ---------------------------------------------------------------------------
# Model architecture and parameter layout


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of the split model.

    The generator is an MLP over dims ``input_dim -> hidden_layers... ->
    feature_dim`` with ReLU after every layer except the last (a single affine
    map when ``hidden_layers`` is empty). Each classifier head is one affine
    map ``feature_dim -> n_way``. ``dual_classifier`` appends a second head of
    identical shape at the end of the parameter vector.
    """

    input_dim: int
    feature_dim: int
    n_way: int
    hidden_layers: tuple[int, ...] = ()
    dual_classifier: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        dims = (self.input_dim, self.feature_dim, self.n_way, *self.hidden_layers)
        if any(int(d) <= 0 for d in dims):
            raise ConfigurationError(f"model dimensions must be positive, got {self}")

    @property
    def generator_shapes(self) -> tuple[tuple[int, int], ...]:
        dims = (self.input_dim, *self.hidden_layers, self.feature_dim)
        return tuple(zip(dims[:-1], dims[1:]))

    @property
    def generator_size(self) -> int:
        return sum(i * o + o for i, o in self.generator_shapes)

    @property
    def classifier_size(self) -> int:
        return self.feature_dim * self.n_way + self.n_way

    @property
    def param_count(self) -> int:
        heads = 2 if self.dual_classifier else 1
        return self.generator_size + heads * self.classifier_size

    def segment_slices(self) -> dict[str, slice]:
        g, c = self.generator_size, self.classifier_size
        slices = {GENERATOR: slice(0, g), CLASSIFIER: slice(g, g + c)}
        if self.dual_classifier:
            slices[CLASSIFIER_ALT] = slice(g + c, g + 2 * c)
        return slices

    def with_dual(self) -> "ModelSpec":
        return ModelSpec(self.input_dim, self.feature_dim, self.n_way, self.hidden_layers, True)

    def without_dual(self) -> "ModelSpec":
        return ModelSpec(self.input_dim, self.feature_dim, self.n_way, self.hidden_layers, False)


def segment_mask(spec: ModelSpec, *names: str) -> np.ndarray:
    """Boolean mask over the flat vector selecting the named segments."""
    slices = spec.segment_slices()
    mask = np.zeros(spec.param_count, dtype=bool)
    for name in names:
        if name not in slices:
            raise ConfigurationError(f"unknown segment {name!r} for {spec}")
        mask[slices[name]] = True
    return mask


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat float64 parameter vector with named, disjoint segment ranges.

    The backing array is copied on construction, marked read-only, and checked
    to be finite, so every operation that returns a ParamVector upholds the
    no-NaN/Inf invariant by construction.
    """

    values: np.ndarray
    segments: Mapping[str, slice]

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise NumericsError("parameter vector contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        spans = sorted((s.start, s.stop) for s in self.segments.values())
        cursor = 0
        for start, stop in spans:
            if start != cursor or stop < start:
                raise ConfigurationError(f"segments do not tile the vector: {self.segments}")
            cursor = stop
        if cursor != v.size:
            raise ConfigurationError(
                f"segments cover {cursor} values but vector has {v.size}"
            )

    @classmethod
    def for_spec(cls, spec: ModelSpec, values: np.ndarray) -> "ParamVector":
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.size != spec.param_count:
            raise ConfigurationError(
                f"expected {spec.param_count} parameters for {spec}, got {values.size}"
            )
        return cls(values, spec.segment_slices())

    def __len__(self) -> int:
        return int(self.values.size)

    def segment(self, name: str) -> np.ndarray:
        if name not in self.segments:
            raise ConfigurationError(f"no segment {name!r} in {tuple(self.segments)}")
        return self.values[self.segments[name]]

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, dict(self.segments))

    def with_segment(self, name: str, segment_values: np.ndarray) -> "ParamVector":
        sl = self.segments[name]
        new = self.values.copy()
        new[sl] = np.asarray(segment_values, dtype=np.float64).reshape(-1)
        return self.with_values(new)


def check_compatible(spec: ModelSpec, w: ParamVector) -> None:
    if len(w) != spec.param_count:
        raise ConfigurationError(
            f"parameter vector of length {len(w)} incompatible with {spec} "
            f"(expects {spec.param_count})"
        )


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamVector:
    """He-style initialization: scaled normal weights, zero biases."""
    vals = np.empty(spec.param_count, dtype=np.float64)
    pos = 0
    for fan_in, fan_out in spec.generator_shapes:
        n = fan_in * fan_out
        vals[pos : pos + n] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=n)
        vals[pos + n : pos + n + fan_out] = 0.0
        pos += n + fan_out
    heads = 2 if spec.dual_classifier else 1
    for _ in range(heads):
        vals[pos : pos + spec.classifier_size] = init_classifier(spec, rng)
        pos += spec.classifier_size
    return ParamVector.for_spec(spec, vals)


def init_classifier(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Fresh values for one classifier head segment (weights then biases)."""
    n = spec.feature_dim * spec.n_way
    seg = np.zeros(spec.classifier_size, dtype=np.float64)
    seg[:n] = rng.normal(0.0, np.sqrt(1.0 / spec.feature_dim), size=n)
    return seg


# ---------------------------------------------------------------------------
# Batches


@dataclass(frozen=True, eq=False)
class Batch:
    """Labeled samples: inputs ``(count, input_dim)``, integer labels ``(count,)``."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ConfigurationError(f"batch inputs must be (count>=1, dim), got {x.shape}")
        if y.shape[0] != x.shape[0]:
            raise ConfigurationError(
                f"batch has {x.shape[0]} inputs but {y.shape[0]} labels"
            )
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return int(self.inputs.shape[0])


def _check_batch(spec: ModelSpec, batch: Batch) -> None:
    if batch.inputs.shape[1] != spec.input_dim:
        raise ConfigurationError(
            f"batch input dim {batch.inputs.shape[1]} != model input dim {spec.input_dim}"
        )
    if batch.labels.min() < 0 or batch.labels.max() >= spec.n_way:
        raise ConfigurationError(
            f"batch labels must lie in [0, {spec.n_way}), got "
            f"[{batch.labels.min()}, {batch.labels.max()}]"
        )


# ---------------------------------------------------------------------------
# Forward pass and losses (numpy value path)


def _head_offset(spec: ModelSpec, head: str) -> int:
    sl = spec.segment_slices().get(head)
    if sl is None:
        raise ConfigurationError(f"model has no {head!r} head")
    return sl.start


def forward_features(spec: ModelSpec, w: ParamVector, inputs: np.ndarray) -> np.ndarray:
    """Generator output ``(count, feature_dim)`` for raw input rows."""
    check_compatible(spec, w)
    h = np.asarray(inputs, dtype=np.float64)
    pos = 0
    last = len(spec.generator_shapes) - 1
    for li, (i, o) in enumerate(spec.generator_shapes):
        W = w.values[pos : pos + i * o].reshape(i, o)
        b = w.values[pos + i * o : pos + i * o + o]
        h = h @ W + b
        if li < last:
            h = np.maximum(h, 0.0)
        pos += i * o + o
    return h


def classifier_matrices(
    spec: ModelSpec, w: ParamVector, head: str = CLASSIFIER
) -> tuple[np.ndarray, np.ndarray]:
    """Weight ``(feature_dim, n_way)`` and bias ``(n_way,)`` of a head."""
    check_compatible(spec, w)
    pos = _head_offset(spec, head)
    n = spec.feature_dim * spec.n_way
    W = w.values[pos : pos + n].reshape(spec.feature_dim, spec.n_way)
    b = w.values[pos + n : pos + n + spec.n_way]
    return W, b


def input_logits(
    spec: ModelSpec, w: ParamVector, inputs: np.ndarray, head: str = CLASSIFIER
) -> np.ndarray:
    """Classifier logits for raw input rows (no labels required)."""
    feats = forward_features(spec, w, np.asarray(inputs, dtype=np.float64))
    W, b = classifier_matrices(spec, w, head)
    return feats @ W + b


def forward_logits(
    spec: ModelSpec, w: ParamVector, batch: Batch, head: str = CLASSIFIER
) -> np.ndarray:
    """Classifier logits ``(count, n_way)`` for a batch."""
    _check_batch(spec, batch)
    return input_logits(spec, w, batch.inputs, head)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-shift normalization (overflow safe)."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(spec: ModelSpec, w: ParamVector, batch: Batch) -> float:
    """Mean negative log-likelihood of the true labels."""
    z = forward_logits(spec, w, batch)
    z = z - z.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=-1))
    picked = z[np.arange(len(batch)), batch.labels]
    return float(np.mean(log_norm - picked))


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Mean over rows of ``sum p * (log p - log q)``.

    ``q`` entries are clamped below by ``EPS_PROB`` before the log, and
    ``0 * log 0`` terms contribute zero.
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    if p.shape != q.shape:
        raise ConfigurationError(f"probability shapes differ: {p.shape} vs {q.shape}")
    qc = np.maximum(q, EPS_PROB)
    terms = np.where(p > 0.0, p * (np.log(np.maximum(p, EPS_PROB)) - np.log(qc)), 0.0)
    return float(terms.sum(axis=-1).mean())


# ---------------------------------------------------------------------------
# Torch side: differentiable mirrors and gradient machinery

TorchBatch = tuple[torch.Tensor, torch.Tensor]
# A task loss maps (spec, flat params tensor, batch tensors) to a scalar tensor.
TaskLoss = Callable[[ModelSpec, torch.Tensor, TorchBatch], torch.Tensor]
LossKind = Union[str, TaskLoss]


def batch_tensors(batch: Batch) -> TorchBatch:
    return (
        torch.tensor(batch.inputs, dtype=torch.float64),
        torch.tensor(batch.labels, dtype=torch.int64),
    )


def param_tensor(values: np.ndarray) -> torch.Tensor:
    return torch.tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


def t_features(spec: ModelSpec, wt: torch.Tensor, inputs: torch.Tensor) -> torch.Tensor:
    h = inputs
    pos = 0
    last = len(spec.generator_shapes) - 1
    for li, (i, o) in enumerate(spec.generator_shapes):
        W = wt[pos : pos + i * o].reshape(i, o)
        b = wt[pos + i * o : pos + i * o + o]
        h = h @ W + b
        if li < last:
            h = torch.relu(h)
        pos += i * o + o
    return h


def t_logits(
    spec: ModelSpec, wt: torch.Tensor, inputs: torch.Tensor, head: str = CLASSIFIER
) -> torch.Tensor:
    feats = t_features(spec, wt, inputs)
    pos = _head_offset(spec, head)
    n = spec.feature_dim * spec.n_way
    W = wt[pos : pos + n].reshape(spec.feature_dim, spec.n_way)
    b = wt[pos + n : pos + n + spec.n_way]
    return feats @ W + b


def cross_entropy_tloss(spec: ModelSpec, wt: torch.Tensor, tb: TorchBatch) -> torch.Tensor:
    inputs, labels = tb
    return torch.nn.functional.cross_entropy(t_logits(spec, wt, inputs), labels)


def resolve_loss(loss_kind: LossKind) -> TaskLoss:
    if callable(loss_kind):
        return loss_kind
    if loss_kind == "cross_entropy":
        return cross_entropy_tloss
    raise ConfigurationError(f"unknown loss kind {loss_kind!r}")


def kl_rows_t(log_p: torch.Tensor, log_q: torch.Tensor) -> torch.Tensor:
    """Mean over rows of KL between distributions given as log-probabilities."""
    p = torch.exp(log_p)
    return (p * (log_p - log_q)).sum(dim=-1).mean()


def reference_kl_term(
    spec: ModelSpec,
    ref_log_probs: torch.Tensor,
    wt: torch.Tensor,
    inputs: torch.Tensor,
    head: str = CLASSIFIER,
) -> torch.Tensor:
    """KL(ref || model) averaged over rows; ``ref_log_probs`` carries no grad."""
    log_q = torch.log_softmax(t_logits(spec, wt, inputs, head), dim=-1)
    return kl_rows_t(ref_log_probs, log_q)


def grad_or_zero(
    out: torch.Tensor, wt: torch.Tensor, create_graph: bool = False
) -> torch.Tensor:
    if not out.requires_grad:
        # loss constant in w: empty differentiation path
        return torch.zeros_like(wt)
    (g,) = torch.autograd.grad(out, wt, create_graph=create_graph, allow_unused=True)
    if g is None:
        return torch.zeros_like(wt)
    return g


def adapt_tensor(
    loss_of_w: Callable[[torch.Tensor], torch.Tensor],
    wt: torch.Tensor,
    alpha: float,
    steps: int,
    *,
    mask: torch.Tensor | None = None,
    first_order: bool = False,
    track: bool = True,
) -> torch.Tensor:
    """Inner SGD: ``steps`` gradient steps of size ``alpha`` on ``loss_of_w``.

    With ``track`` the update graph is kept so outer gradients include the
    second-order term; ``first_order`` detaches the inner gradient instead.
    """
    if alpha == 0.0 or steps == 0:
        return wt
    w = wt
    for _ in range(steps):
        g = grad_or_zero(loss_of_w(w), w, create_graph=track and not first_order)
        if first_order:
            g = g.detach()
        if mask is not None:
            g = g * mask
        w = w - alpha * g
    return w


def meta_loss_tensor(
    spec: ModelSpec,
    wt: torch.Tensor,
    support_tb: TorchBatch,
    query_tb: TorchBatch,
    alpha: float,
    inner_steps: int,
    mode: str,
    loss: TaskLoss,
    adapt_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Query loss at the parameters adapted on the support batch."""
    adapted = adapt_tensor(
        lambda w: loss(spec, w, support_tb),
        wt,
        alpha,
        inner_steps,
        mask=adapt_mask,
        first_order=(mode == "first_order"),
    )
    return loss(spec, adapted, query_tb)


# -- batched episode machinery: one graph for a whole episode batch ---------
#
# Episode batches always share the (way, shot, query) shape, so supports and
# queries stack into (episodes, rows, dim) tensors and the per-episode
# adapted parameters into (episodes, n_params) rows.


def t_features_rows(
    spec: ModelSpec, w_rows: torch.Tensor, inputs: torch.Tensor
) -> torch.Tensor:
    """Generator forward with one parameter row per episode.

    ``w_rows``: (episodes, n_params); ``inputs``: (episodes, rows, input_dim).
    """
    h = inputs
    pos = 0
    last = len(spec.generator_shapes) - 1
    for li, (i, o) in enumerate(spec.generator_shapes):
        W = w_rows[:, pos : pos + i * o].reshape(-1, i, o)
        b = w_rows[:, pos + i * o : pos + i * o + o].reshape(-1, 1, o)
        h = torch.baddbmm(b, h, W)
        if li < last:
            h = torch.relu(h)
        pos += i * o + o
    return h


def t_logits_rows(
    spec: ModelSpec, w_rows: torch.Tensor, inputs: torch.Tensor, head: str = CLASSIFIER
) -> torch.Tensor:
    feats = t_features_rows(spec, w_rows, inputs)
    pos = _head_offset(spec, head)
    n = spec.feature_dim * spec.n_way
    W = w_rows[:, pos : pos + n].reshape(-1, spec.feature_dim, spec.n_way)
    b = w_rows[:, pos + n : pos + n + spec.n_way].reshape(-1, 1, spec.n_way)
    return torch.baddbmm(b, feats, W)


def ce_per_row(
    spec: ModelSpec,
    w_rows: torch.Tensor,
    inputs: torch.Tensor,
    labels: torch.Tensor,
    head: str = CLASSIFIER,
) -> torch.Tensor:
    """Per-episode mean cross entropy, shape (episodes,)."""
    logits = t_logits_rows(spec, w_rows, inputs, head)
    flat = torch.nn.functional.cross_entropy(
        logits.reshape(-1, spec.n_way), labels.reshape(-1), reduction="none"
    )
    return flat.reshape(labels.shape).mean(dim=1)


def adapt_rows(
    spec: ModelSpec,
    wt: torch.Tensor,
    support_inputs: torch.Tensor,
    support_labels: torch.Tensor,
    alpha: float,
    steps: int,
    mode: str = "exact",
    head: str = CLASSIFIER,
    adapt_mask: torch.Tensor | None = None,
    track: bool = True,
) -> torch.Tensor:
    """Per-episode inner adaptation: (episodes, n_params) adapted rows."""
    rows = wt.unsqueeze(0).repeat(support_inputs.shape[0], 1)
    if alpha == 0.0 or steps == 0:
        return rows
    first_order = mode == "first_order"
    for _ in range(steps):
        loss = ce_per_row(spec, rows, support_inputs, support_labels, head).sum()
        g = grad_or_zero(loss, rows, create_graph=track and not first_order)
        if first_order:
            g = g.detach()
        if adapt_mask is not None:
            g = g * adapt_mask
        rows = rows - alpha * g
    return rows


def stacked_episode_tensors(
    episodes,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stack equal-shape episodes into (E, rows, dim) / (E, rows) tensors."""
    s_in = torch.tensor(
        np.stack([ep.support.inputs for ep in episodes]), dtype=torch.float64
    )
    s_y = torch.tensor(
        np.stack([ep.support.labels for ep in episodes]), dtype=torch.int64
    )
    q_in = torch.tensor(
        np.stack([ep.query.inputs for ep in episodes]), dtype=torch.float64
    )
    q_y = torch.tensor(
        np.stack([ep.query.labels for ep in episodes]), dtype=torch.int64
    )
    return s_in, s_y, q_in, q_y


def batched_meta_ce(
    spec: ModelSpec,
    wt: torch.Tensor,
    tensors: tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor],
    alpha: float,
    inner_steps: int,
    mode: str,
    head: str = CLASSIFIER,
    adapt_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean over the episode batch of the adapted-query cross entropy."""
    s_in, s_y, q_in, q_y = tensors
    rows = adapt_rows(
        spec, wt, s_in, s_y, alpha, inner_steps, mode, head, adapt_mask
    )
    return ce_per_row(spec, rows, q_in, q_y, head).mean()


def value_and_grad(
    objective: Callable[[torch.Tensor], torch.Tensor],
    values: np.ndarray,
    mask: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Evaluate a scalar objective of the flat vector and its gradient.

    ``mask`` zeroes gradient entries outside the trainable coordinates.
    """
    wt = param_tensor(values)
    out = objective(wt)
    g = grad_or_zero(out, wt).detach().numpy()
    if mask is not None:
        g = np.where(mask, g, 0.0)
    return float(out.detach()), g


# ---------------------------------------------------------------------------
# Public gradient operations


def grad(
    spec: ModelSpec, w: ParamVector, batch: Batch, loss_kind: LossKind = "cross_entropy"
) -> ParamVector:
    """Exact reverse-mode gradient of the named loss at ``w``."""
    check_compatible(spec, w)
    loss = resolve_loss(loss_kind)
    if loss is cross_entropy_tloss:
        _check_batch(spec, batch)
    tb = batch_tensors(batch)
    _, g = value_and_grad(lambda wt: loss(spec, wt, tb), w.values)
    return w.with_values(g)


def meta_grad(
    spec: ModelSpec,
    w: ParamVector,
    support: Batch,
    query: Batch,
    alpha: float,
    mode: str = "exact",
    inner_steps: int = 1,
    loss_kind: LossKind = "cross_entropy",
) -> ParamVector:
    """Gradient of the query loss after inner adaptation, w.r.t. ``w``.

    ``exact`` differentiates through the adaptation step (includes the
    Hessian-vector term); ``first_order`` drops it and returns the query
    gradient evaluated at the adapted point.
    """
    check_compatible(spec, w)
    if mode not in ("exact", "first_order"):
        raise ConfigurationError(f"unknown meta mode {mode!r}")
    if mode == "exact" and inner_steps != 1:
        raise ConfigurationError("exact meta-gradients support a single inner step only")
    if alpha < 0:
        raise ConfigurationError("alpha must be >= 0")
    loss = resolve_loss(loss_kind)
    if loss is cross_entropy_tloss:
        _check_batch(spec, support)
        _check_batch(spec, query)
    stb, qtb = batch_tensors(support), batch_tensors(query)
    _, g = value_and_grad(
        lambda wt: meta_loss_tensor(spec, wt, stb, qtb, alpha, inner_steps, mode, loss),
        w.values,
    )
    return w.with_values(g)
