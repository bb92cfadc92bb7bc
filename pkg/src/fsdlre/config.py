"""Run configuration: YAML file merged with CLI overrides on top of
task-family defaults. Precedence: CLI flag > config file > family default.
Unknown keys are rejected so typos fail loudly."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from .errors import ConfigError
from .model import CONTRASTIVE_VARIANTS, ModelConfig
from .training import TASK_FAMILIES, TrainConfig, hyperparameter_defaults

# every accepted dotted key path and its coercion
_SCHEMA: dict[str, Any] = {
    "task_family": str,
    "seed": int,
    "out": str,
    "encoder": str,
    "freeze_relation_encoder": bool,
    "corpus.documents": str,
    "corpus.catalog": str,
    "corpus.split": str,
    "episodes.file": str,
    "episodes.count": int,
    "episodes.n_docs": int,
    "episodes.max_target_relations": int,
    "episodes.source_split": str,
    "attention.top_k_percent": float,
    "nota.count": int,
    "nota.alpha": float,
    "loss.tau": float,
    "loss.lambda": float,
    "loss.contrastive_variant": str,
    "ablation.disable_tnpg": bool,
    "ablation.disable_ibpc": bool,
    "trainer.learning_rate": float,
    "trainer.total_episodes": int,
    "trainer.episodes_per_batch": int,
    "trainer.warmup_fraction": float,
    "trainer.grad_clip_norm": float,
    "trainer.eval_interval": int,
    "trainer.patience": int,
    "trainer.dev_episode_count": int,
    "eval.f1_aggregation": str,
    "eval.checkpoint": str,
    "encoder_options.hidden_size": int,
    "encoder_options.n_layers": int,
    "encoder_options.n_heads": int,
    "encoder_options.max_window": int,
}

_AGGREGATIONS = ("pooled", "per-episode-mean")


def _flatten(tree: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for key, value in tree.items():
        path = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(_flatten(value, f"{path}."))
        else:
            flat[path] = value
    return flat


def _coerce(path: str, value: Any) -> Any:
    caster = _SCHEMA[path]
    if caster is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{path}: expected a boolean, got {value!r}")
    try:
        return caster(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


@dataclass
class RunConfig:
    """Everything a command needs, flattened and validated."""
    task_family: str = "in_domain"
    seed: int = 0
    out: str = "runs/default"
    encoder: str = "toy"
    freeze_relation_encoder: bool = False
    corpus_documents: Optional[str] = None
    corpus_catalog: Optional[str] = None
    corpus_split: Optional[str] = None
    episodes_file: Optional[str] = None
    episodes_count: int = 1000
    episodes_n_docs: int = 1
    episodes_max_target_relations: int = 6
    episodes_source_split: str = "train"
    top_k_percent: float = 15.0
    nota_count: int = 15
    nota_alpha: float = 0.9
    tau: float = 0.4
    lam: float = 0.1
    contrastive_variant: str = "rcl"
    disable_tnpg: bool = False
    disable_ibpc: bool = False
    learning_rate: float = 1e-5
    total_episodes: int = 50_000
    episodes_per_batch: int = 4
    warmup_fraction: float = 0.04
    grad_clip_norm: float = 1.0
    eval_interval: int = 500
    patience: int = 10
    dev_episode_count: int = 200
    f1_aggregation: str = "pooled"
    eval_checkpoint: Optional[str] = None
    encoder_options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task_family not in TASK_FAMILIES:
            raise ConfigError(
                f"task_family must be one of {TASK_FAMILIES}, got {self.task_family!r}"
            )
        if self.contrastive_variant not in CONTRASTIVE_VARIANTS:
            raise ConfigError(
                f"loss.contrastive_variant must be one of {CONTRASTIVE_VARIANTS}"
            )
        if self.f1_aggregation not in _AGGREGATIONS:
            raise ConfigError(f"eval.f1_aggregation must be one of {_AGGREGATIONS}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            top_k_percent=self.top_k_percent,
            nota_count=self.nota_count,
            nota_alpha=self.nota_alpha,
            tau=self.tau,
            lam=self.lam,
            contrastive_variant=self.contrastive_variant,
            disable_tnpg=self.disable_tnpg,
            disable_ibpc=self.disable_ibpc,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            total_episodes=self.total_episodes,
            episodes_per_batch=self.episodes_per_batch,
            warmup_fraction=self.warmup_fraction,
            grad_clip_norm=self.grad_clip_norm,
            eval_interval=self.eval_interval,
            patience=self.patience,
            seed=self.seed,
            n_docs=self.episodes_n_docs,
            max_target_relations=self.episodes_max_target_relations,
            dev_episode_count=self.dev_episode_count,
            model=self.model_config(),
        )


_PATH_TO_FIELD = {
    "task_family": "task_family",
    "seed": "seed",
    "out": "out",
    "encoder": "encoder",
    "freeze_relation_encoder": "freeze_relation_encoder",
    "corpus.documents": "corpus_documents",
    "corpus.catalog": "corpus_catalog",
    "corpus.split": "corpus_split",
    "episodes.file": "episodes_file",
    "episodes.count": "episodes_count",
    "episodes.n_docs": "episodes_n_docs",
    "episodes.max_target_relations": "episodes_max_target_relations",
    "episodes.source_split": "episodes_source_split",
    "attention.top_k_percent": "top_k_percent",
    "nota.count": "nota_count",
    "nota.alpha": "nota_alpha",
    "loss.tau": "tau",
    "loss.lambda": "lam",
    "loss.contrastive_variant": "contrastive_variant",
    "ablation.disable_tnpg": "disable_tnpg",
    "ablation.disable_ibpc": "disable_ibpc",
    "trainer.learning_rate": "learning_rate",
    "trainer.total_episodes": "total_episodes",
    "trainer.episodes_per_batch": "episodes_per_batch",
    "trainer.warmup_fraction": "warmup_fraction",
    "trainer.grad_clip_norm": "grad_clip_norm",
    "trainer.eval_interval": "eval_interval",
    "trainer.patience": "patience",
    "trainer.dev_episode_count": "dev_episode_count",
    "eval.f1_aggregation": "f1_aggregation",
    "eval.checkpoint": "eval_checkpoint",
}


def load_run_config(
    config_path: Optional[str | Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """Merge file + overrides (dotted key paths) over family defaults."""
    file_values: dict[str, Any] = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        raw = yaml.safe_load(path.read_text()) or {}
        if not isinstance(raw, Mapping):
            raise ConfigError(f"config file must be a mapping, got {type(raw).__name__}")
        file_values = _flatten(raw)
    override_values = dict(overrides or {})

    unknown = [k for k in file_values if k not in _SCHEMA]
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    unknown = [k for k in override_values if k not in _SCHEMA]
    if unknown:
        raise ConfigError(f"unknown override keys: {sorted(unknown)}")

    merged: dict[str, Any] = {}
    merged.update(file_values)
    merged.update({k: v for k, v in override_values.items() if v is not None})

    family = str(merged.get("task_family", "in_domain"))
    k, tau, n_nota, alpha, lam = hyperparameter_defaults(family)
    defaults = {
        "task_family": family,
        "attention.top_k_percent": k,
        "loss.tau": tau,
        "nota.count": n_nota,
        "nota.alpha": alpha,
        "loss.lambda": lam,
    }
    for key, value in defaults.items():
        merged.setdefault(key, value)

    kwargs: dict[str, Any] = {}
    encoder_options: dict[str, Any] = {}
    for path, value in merged.items():
        value = _coerce(path, value)
        if path.startswith("encoder_options."):
            encoder_options[path.split(".", 1)[1]] = value
        else:
            kwargs[_PATH_TO_FIELD[path]] = value
    if encoder_options:
        kwargs["encoder_options"] = encoder_options
    return RunConfig(**kwargs)
