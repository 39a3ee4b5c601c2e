"""Experiment configuration: defaults, file parsing, flag overrides.

The on-disk format is flat ``key = value`` pairs under INI-style sections,
parseable without third-party dependencies. Precedence: flag overrides beat
file values beat defaults; unknown sections or keys are rejected with the
offending ``section.key`` path.
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

from .adversarial import AdvConfig
from .data import Dataset, load_digits_like, make_synthetic_blobs
from .diffcore import ConfigurationError, ModelSpec
from .eval import EvalPlan
from .federation import EpisodeShape, FederationConfig
from .fsl import InnerLoopConfig, OuterLoopConfig


class ConfigError(ValueError):
    """Bad configuration source: unknown key, type error, or invariant."""


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    dataset: str = "blobs"
    n_classes: int = 30
    n_novel: int = 10
    per_class: int = 150
    input_dim: int = 16
    spread: float = 1.0
    subspace_dim: int | None = None
    mean_scale: float = 2.0
    data_seed: int = 0
    data_path: str = ""
    resolution: int = 8
    base_classes: tuple[int, ...] = (0, 1, 2, 3, 4)
    novel_classes: tuple[int, ...] = (5, 6, 7, 8, 9)
    scheme: str = "dirichlet"
    concentration: float = 1.0
    # model
    feature_dim: int = 8
    hidden_layers: tuple[int, ...] = (32,)
    # task
    n_way: int = 5
    n_shot: int = 1
    n_query: int = 5
    episodes_per_round: int = 4
    ordered_classes: bool = False
    # federation
    algorithm: str = "naive"
    clients: int = 5
    rounds: int = 20
    local_epochs: int = 1
    gamma: float = 0.2
    mu_prox: float = 0.01
    mi_reference: str = "global"
    mi_on_adapted: bool = False
    # optim
    alpha: float = 0.01
    beta: float = 1e-3
    inner_steps: int = 1
    meta_mode: str = "exact"
    optimizer: str = "sgd"
    clip_norm: float | None = None
    # adversarial
    eta: float = 0.1
    lambda_: float = 0.1
    stage1_steps: int | None = None
    stage2_steps: int | None = None
    alt_init: str = "random"
    alt_scale: float = 0.01
    adapt_in_stages: bool = True
    mi_in_stages: bool = True
    # eval
    eval_every: int = 0
    eval_episodes: int = 600
    eval_n_way: int = 5
    eval_n_shot: int = 1
    eval_n_query: int = 15
    # run
    seeds: tuple[int, ...] = (0,)
    output_dir: str = ""
    run_name: str = ""
    save_checkpoints: bool = False
    save_features: bool = False

    def __post_init__(self) -> None:
        for field in ("base_classes", "novel_classes", "hidden_layers", "seeds"):
            object.__setattr__(self, field, tuple(int(v) for v in getattr(self, field)))

    # -- derived builders ---------------------------------------------------

    def federation_config(self) -> FederationConfig:
        return FederationConfig(
            num_clients=self.clients,
            rounds=self.rounds,
            algorithm=self.algorithm,
            gamma=self.gamma,
            mu_prox=self.mu_prox,
            mi_reference=self.mi_reference,
            local_epochs=self.local_epochs,
            episodes_per_round=self.episodes_per_round,
            mi_on_adapted=self.mi_on_adapted,
        )

    def episode_shape(self) -> EpisodeShape:
        return EpisodeShape(self.n_way, self.n_shot, self.n_query, self.ordered_classes)

    def inner_config(self) -> InnerLoopConfig:
        return InnerLoopConfig(self.alpha, self.inner_steps, self.meta_mode)

    def outer_config(self) -> OuterLoopConfig:
        return OuterLoopConfig(self.beta, self.optimizer, self.clip_norm)

    def adv_config(self) -> AdvConfig:
        return AdvConfig(
            eta=self.eta,
            lambda_=self.lambda_,
            stage1_steps=(
                self.episodes_per_round if self.stage1_steps is None else self.stage1_steps
            ),
            stage2_steps=(
                self.episodes_per_round if self.stage2_steps is None else self.stage2_steps
            ),
            alt_init=self.alt_init,
            alt_scale=self.alt_scale,
            adapt_in_stages=self.adapt_in_stages,
            mi_in_stages=self.mi_in_stages,
        )

    def eval_plan(self) -> EvalPlan:
        return EvalPlan(
            n_way=self.eval_n_way,
            n_shot=self.eval_n_shot,
            n_query=self.eval_n_query,
            episodes=self.eval_episodes,
            every=self.eval_every,
        )

    def make_dataset(self) -> Dataset:
        if self.dataset == "blobs":
            return make_synthetic_blobs(
                self.n_classes, self.per_class, self.input_dim, self.spread,
                self.data_seed, n_novel=self.n_novel,
                subspace_dim=self.subspace_dim, mean_scale=self.mean_scale,
            )
        if self.dataset == "digits_file":
            if not self.data_path:
                raise ConfigError("data.data_path required for dataset 'digits_file'")
            return load_digits_like(
                self.data_path, self.resolution, self.base_classes, self.novel_classes
            )
        raise ConfigError(f"data.dataset: unknown dataset kind {self.dataset!r}")

    def model_spec(self, dataset: Dataset) -> ModelSpec:
        return ModelSpec(
            input_dim=dataset.input_dim,
            feature_dim=self.feature_dim,
            n_way=self.n_way,
            hidden_layers=self.hidden_layers,
        )

    def validate(self) -> "ExperimentConfig":
        """Run every sub-config constructor so invariants fail at load time."""
        try:
            self.federation_config()
            self.episode_shape()
            self.inner_config()
            self.outer_config()
            self.adv_config()
            self.eval_plan()
        except ConfigurationError as exc:
            raise ConfigError(str(exc)) from exc
        if self.dataset not in ("blobs", "digits_file"):
            raise ConfigError(f"data.dataset: unknown dataset kind {self.dataset!r}")
        if self.scheme not in ("iid", "dirichlet"):
            raise ConfigError(f"data.scheme: unknown partition scheme {self.scheme!r}")
        if not self.seeds:
            raise ConfigError("run.seeds: need at least one seed")
        return self

    def resolved_items(self) -> dict[str, dict[str, str]]:
        """Canonical string form of every field, grouped by section."""
        out: dict[str, dict[str, str]] = {}
        for section, keys in _SECTIONS.items():
            out[section] = {}
            for key in keys:
                field = _KEYS[key].attr
                out[section][key] = _format_value(getattr(self, field))
        return out

    def run_id(self) -> str:
        """Deterministic id over everything that affects the numbers."""
        payload = self.resolved_items()
        # persistence toggles and output locations do not change the math
        payload["run"] = {"seeds": payload["run"]["seeds"]}
        digest = hashlib.sha256(
            json.dumps(payload, sort_keys=True).encode()
        ).hexdigest()[:10]
        return f"{self.algorithm}-{digest}"


# ---------------------------------------------------------------------------
# Key registry


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(part) for part in text.split(","))


def _parse_opt_int(text: str) -> int | None:
    t = text.strip().lower()
    return None if t in ("", "none") else int(text)


def _parse_opt_float(text: str) -> float | None:
    t = text.strip().lower()
    return None if t in ("", "none") else float(text)


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return format(value, ".12g")
    return str(value)


@dataclass(frozen=True)
class _Key:
    attr: str
    parse: Callable[[str], Any]


_SECTIONS: dict[str, tuple[str, ...]] = {
    "data": (
        "dataset", "n_classes", "n_novel", "per_class", "input_dim", "spread",
        "subspace_dim", "mean_scale", "data_seed", "data_path", "resolution",
        "base_classes", "novel_classes", "scheme", "concentration",
    ),
    "model": ("feature_dim", "hidden_layers"),
    "task": ("n_way", "n_shot", "n_query", "episodes_per_round", "ordered_classes"),
    "federation": (
        "algorithm", "clients", "rounds", "local_epochs", "gamma", "mu_prox",
        "mi_reference", "mi_on_adapted",
    ),
    "optim": ("alpha", "beta", "inner_steps", "meta_mode", "optimizer", "clip_norm"),
    "adversarial": (
        "eta", "lambda", "stage1_steps", "stage2_steps", "alt_init", "alt_scale",
        "adapt_in_stages", "mi_in_stages",
    ),
    "eval": ("eval_every", "eval_episodes", "eval_n_way", "eval_n_shot", "eval_n_query"),
    "run": ("seeds", "output_dir", "run_name", "save_checkpoints", "save_features"),
}

_KEYS: dict[str, _Key] = {
    "dataset": _Key("dataset", str),
    "n_classes": _Key("n_classes", int),
    "n_novel": _Key("n_novel", int),
    "per_class": _Key("per_class", int),
    "input_dim": _Key("input_dim", int),
    "spread": _Key("spread", float),
    "subspace_dim": _Key("subspace_dim", _parse_opt_int),
    "mean_scale": _Key("mean_scale", float),
    "data_seed": _Key("data_seed", int),
    "data_path": _Key("data_path", str),
    "resolution": _Key("resolution", int),
    "base_classes": _Key("base_classes", _parse_int_list),
    "novel_classes": _Key("novel_classes", _parse_int_list),
    "scheme": _Key("scheme", str),
    "concentration": _Key("concentration", float),
    "feature_dim": _Key("feature_dim", int),
    "hidden_layers": _Key("hidden_layers", _parse_int_list),
    "n_way": _Key("n_way", int),
    "n_shot": _Key("n_shot", int),
    "n_query": _Key("n_query", int),
    "episodes_per_round": _Key("episodes_per_round", int),
    "ordered_classes": _Key("ordered_classes", _parse_bool),
    "algorithm": _Key("algorithm", str),
    "clients": _Key("clients", int),
    "rounds": _Key("rounds", int),
    "local_epochs": _Key("local_epochs", int),
    "gamma": _Key("gamma", float),
    "mu_prox": _Key("mu_prox", float),
    "mi_reference": _Key("mi_reference", str),
    "mi_on_adapted": _Key("mi_on_adapted", _parse_bool),
    "alpha": _Key("alpha", float),
    "beta": _Key("beta", float),
    "inner_steps": _Key("inner_steps", int),
    "meta_mode": _Key("meta_mode", str),
    "optimizer": _Key("optimizer", str),
    "clip_norm": _Key("clip_norm", _parse_opt_float),
    "eta": _Key("eta", float),
    "lambda": _Key("lambda_", float),
    "stage1_steps": _Key("stage1_steps", _parse_opt_int),
    "stage2_steps": _Key("stage2_steps", _parse_opt_int),
    "alt_init": _Key("alt_init", str),
    "alt_scale": _Key("alt_scale", float),
    "adapt_in_stages": _Key("adapt_in_stages", _parse_bool),
    "mi_in_stages": _Key("mi_in_stages", _parse_bool),
    "eval_every": _Key("eval_every", int),
    "eval_episodes": _Key("eval_episodes", int),
    "eval_n_way": _Key("eval_n_way", int),
    "eval_n_shot": _Key("eval_n_shot", int),
    "eval_n_query": _Key("eval_n_query", int),
    "seeds": _Key("seeds", _parse_int_list),
    "output_dir": _Key("output_dir", str),
    "run_name": _Key("run_name", str),
    "save_checkpoints": _Key("save_checkpoints", _parse_bool),
    "save_features": _Key("save_features", _parse_bool),
}

_KEY_SECTION = {key: sec for sec, keys in _SECTIONS.items() for key in keys}


def parse_config(
    path: str | Path | None = None,
    overrides: Mapping[str, str] | None = None,
) -> ExperimentConfig:
    """Build a validated config from an optional file plus flag overrides."""
    values: dict[str, Any] = {}

    def apply(key: str, raw: str, where: str) -> None:
        if key not in _KEYS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        try:
            values[_KEYS[key].attr] = _KEYS[key].parse(raw)
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from exc

    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(path.read_text(), source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, raw in parser.items(section):
                if _KEY_SECTION.get(key) != section:
                    raise ConfigError(f"{path}: unknown key {section}.{key}")
                apply(key, raw, f"{path}: {section}.{key}")

    for key, raw in (overrides or {}).items():
        section = _KEY_SECTION.get(key, "?")
        apply(key, str(raw), f"override {section}.{key}")

    return ExperimentConfig(**values).validate()


def write_config(cfg: ExperimentConfig, path: str | Path) -> None:
    """Persist the fully resolved configuration (reloadable by parse_config)."""
    lines = []
    for section, items in cfg.resolved_items().items():
        lines.append(f"[{section}]")
        for key, value in items.items():
            lines.append(f"{key} = {value}")
        lines.append("")
    Path(path).write_text("\n".join(lines))
