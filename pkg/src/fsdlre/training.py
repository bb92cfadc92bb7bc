"""Meta-training: episode batches, the warmup/decay schedule, gradient
clipping, periodic dev evaluation with early stopping, and resumable
checkpoints under ckpt/step-<n>/."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch
from torch import nn

from .corpus import Corpus, RelationSplit
from .encoding import EncoderProvider
from .episodes import Episode, EpisodeConfig, sample_episodes
from .errors import ConfigError, NumericError
from .evaluation import evaluate_episodes
from .model import EpisodeModel, ModelConfig

logger = logging.getLogger(__name__)

TASK_FAMILIES = ("in_domain", "cross_domain")
# (top-k percent, temperature, NOTA count, fusion alpha, contrastive weight)
_FAMILY_DEFAULTS = {
    "in_domain": (15, 0.4, 15, 0.9, 0.1),
    "cross_domain": (10, 0.4, 20, 0.95, 0.1),
}
_DEV_SEED_OFFSET = 60_013
WEIGHT_DECAY = 0.01


def hyperparameter_defaults(task_family: str) -> tuple[float, float, int, float, float]:
    """Per-family defaults as (k, tau, N_nota, alpha, lambda)."""
    try:
        return _FAMILY_DEFAULTS[task_family]
    except KeyError:
        raise ConfigError(
            f"unknown task family {task_family!r}; expected one of {TASK_FAMILIES}"
        ) from None


def model_config_for_family(task_family: str, **overrides) -> ModelConfig:
    k, tau, n_nota, alpha, lam = hyperparameter_defaults(task_family)
    base = dict(top_k_percent=k, tau=tau, nota_count=n_nota, nota_alpha=alpha, lam=lam)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    total_episodes: int = 50_000
    episodes_per_batch: int = 4
    warmup_fraction: float = 0.04
    grad_clip_norm: float = 1.0
    eval_interval: int = 500          # optimizer steps between dev evaluations
    patience: int = 10                # evaluations without improvement
    seed: int = 0
    n_docs: int = 1
    max_target_relations: int = 6
    dev_episode_count: int = 200      # fixed dev subsample for early stopping
    model: ModelConfig = ModelConfig()

    def __post_init__(self):
        for name in ("learning_rate", "total_episodes", "episodes_per_batch",
                     "grad_clip_norm", "eval_interval", "patience", "n_docs",
                     "dev_episode_count"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ConfigError(
                f"warmup_fraction must be in (0, 1), got {self.warmup_fraction}"
            )

    @property
    def total_steps(self) -> int:
        return math.ceil(self.total_episodes / self.episodes_per_batch)


def lr_factor(step: int, total_steps: int, warmup_fraction: float) -> float:
    """Piecewise-linear schedule multiplier: 0 -> 1 over the warmup steps,
    then 1 -> 0 at total_steps."""
    warmup = max(1, round(warmup_fraction * total_steps))
    if step <= warmup:
        return step / warmup
    if total_steps <= warmup:
        return 1.0
    return max(0.0, (total_steps - step) / (total_steps - warmup))


def config_hash(cfg: TrainConfig) -> str:
    payload = json.dumps(dataclasses.asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def parameter_groups(model: nn.Module) -> list[dict]:
    """Decay weight matrices; leave biases, norms and the NOTA bank undecayed."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if p.ndim < 2 or "bank" in name:
            no_decay.append(p)
        else:
            decay.append(p)
    return [
        {"params": decay, "weight_decay": WEIGHT_DECAY},
        {"params": no_decay, "weight_decay": 0.0},
    ]


@dataclass(frozen=True)
class Checkpoint:
    path: Path
    step: int
    dev_macro_f1: float
    config_hash: str


def save_checkpoint(
    model: EpisodeModel,
    optimizer: torch.optim.Optimizer,
    scheduler,
    step: int,
    dev_macro_f1: float,
    cfg: TrainConfig,
    out_dir: str | Path,
) -> Checkpoint:
    ckpt_dir = Path(out_dir) / "ckpt" / f"step-{step}"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), ckpt_dir / "params.pt")
    torch.save(
        {"optimizer": optimizer.state_dict(), "scheduler": scheduler.state_dict()},
        ckpt_dir / "optim.pt",
    )
    torch.save({"torch": torch.get_rng_state()}, ckpt_dir / "rng.pt")
    meta = {
        "step": step,
        "dev_macro_f1": dev_macro_f1,
        "config_hash": config_hash(cfg),
        "config": dataclasses.asdict(cfg),
    }
    (ckpt_dir / "meta.json").write_text(json.dumps(meta, indent=2, default=str))
    return Checkpoint(
        path=ckpt_dir, step=step, dev_macro_f1=dev_macro_f1,
        config_hash=meta["config_hash"],
    )


def load_checkpoint(
    ckpt_dir: str | Path,
    model: EpisodeModel,
    optimizer: Optional[torch.optim.Optimizer] = None,
    scheduler=None,
    restore_rng: bool = False,
) -> dict:
    """Restore parameters (and optionally optimizer/scheduler/RNG state) from
    a ckpt/step-<n>/ directory; returns the stored metadata."""
    ckpt_dir = Path(ckpt_dir)
    meta_path = ckpt_dir / "meta.json"
    if not meta_path.exists():
        raise ConfigError(f"no checkpoint at {ckpt_dir}")
    model.load_state_dict(torch.load(ckpt_dir / "params.pt", weights_only=True))
    if optimizer is not None or scheduler is not None:
        opt_state = torch.load(ckpt_dir / "optim.pt", weights_only=True)
        if optimizer is not None:
            optimizer.load_state_dict(opt_state["optimizer"])
        if scheduler is not None:
            scheduler.load_state_dict(opt_state["scheduler"])
    if restore_rng:
        rng = torch.load(ckpt_dir / "rng.pt", weights_only=True)
        torch.set_rng_state(rng["torch"])
    return json.loads(meta_path.read_text())


@dataclass
class TrainResult:
    checkpoint: Optional[Checkpoint]
    model: EpisodeModel
    loss_trace: list[float] = field(default_factory=list)
    dev_history: list[tuple[int, float]] = field(default_factory=list)
    stopped_early: bool = False
    final_step: int = 0


def evaluate_dev(
    model: EpisodeModel, dev_episodes: Sequence[Episode], aggregation: str = "pooled"
) -> float:
    """Dev macro F1; parameters are read, never written."""
    was_training = model.training
    model.eval()
    try:
        return evaluate_episodes(model, dev_episodes, aggregation=aggregation).macro_f1
    finally:
        if was_training:
            model.train()


def sample_dev_episodes(
    corpus: Corpus, splits: RelationSplit, cfg: TrainConfig
) -> list[Episode]:
    dev_cfg = EpisodeConfig(
        n_docs=cfg.n_docs,
        seed=cfg.seed + _DEV_SEED_OFFSET,
        max_target_relations=cfg.max_target_relations,
        source_split="dev",
    )
    return sample_episodes(corpus, splits, dev_cfg, cfg.dev_episode_count)


def train(
    corpus: Corpus,
    splits: RelationSplit,
    cfg: TrainConfig,
    provider: EncoderProvider,
    out_dir: Optional[str | Path] = None,
    resume_from: Optional[str | Path] = None,
    dev_episodes: Optional[Sequence[Episode]] = None,
    save_checkpoints: bool = True,
) -> TrainResult:
    """Run the episodic training loop and return the best-dev checkpoint.

    Episodes are drawn from a stateless stream keyed by (seed, draw index), so
    a resumed run consumes exactly the episodes the interrupted run would
    have."""
    model = EpisodeModel(provider, corpus.relation_catalog, cfg.model, seed=cfg.seed)
    optimizer = torch.optim.AdamW(parameter_groups(model), lr=cfg.learning_rate)
    total_steps = cfg.total_steps
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda s: lr_factor(s, total_steps, cfg.warmup_fraction)
    )

    start_step = 0
    best: Optional[Checkpoint] = None
    if resume_from is not None:
        meta = load_checkpoint(resume_from, model, optimizer, scheduler, restore_rng=True)
        start_step = int(meta["step"])
        logger.info("resumed from step %d (%s)", start_step, resume_from)

    if dev_episodes is None:
        dev_episodes = sample_dev_episodes(corpus, splits, cfg)
    episode_cfg = EpisodeConfig(
        n_docs=cfg.n_docs,
        seed=cfg.seed,
        max_target_relations=cfg.max_target_relations,
        source_split="train",
    )

    result = TrainResult(checkpoint=best, model=model)
    best_f1 = -1.0
    evals_since_best = 0
    model.train()

    def run_dev(step: int) -> None:
        nonlocal best, best_f1, evals_since_best
        f1 = evaluate_dev(model, dev_episodes)
        result.dev_history.append((step, f1))
        logger.info("step %d dev macro F1 %.4f", step, f1)
        if f1 > best_f1:
            best_f1 = f1
            evals_since_best = 0
            if save_checkpoints and out_dir is not None:
                best = save_checkpoint(model, optimizer, scheduler, step, f1, cfg, out_dir)
            else:
                best = Checkpoint(Path("."), step, f1, config_hash(cfg))
        else:
            evals_since_best += 1

    for step in range(start_step, total_steps):
        batch = sample_episodes(
            corpus, splits, episode_cfg, cfg.episodes_per_batch,
            start_index=step * cfg.episodes_per_batch,
        )
        optimizer.zero_grad(set_to_none=True)
        relation_cache: dict[str, torch.Tensor] = {}
        losses = []
        for ep in batch:
            breakdown = model(ep, relation_cache=relation_cache).loss
            if not torch.isfinite(breakdown.total):
                raise NumericError(
                    f"non-finite loss at step {step}, episode {ep.episode_id!r}: "
                    f"bce={breakdown.bce.item()!r} rcl={breakdown.rcl.item()!r}"
                )
            losses.append(breakdown.total)
        batch_loss = torch.stack(losses).mean()
        batch_loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip_norm)
        optimizer.step()
        scheduler.step()
        result.loss_trace.append(batch_loss.item())
        result.final_step = step + 1

        if (step + 1) % cfg.eval_interval == 0 or step + 1 == total_steps:
            run_dev(step + 1)
            if evals_since_best >= cfg.patience:
                result.stopped_early = True
                logger.info("early stop at step %d (patience %d)", step + 1, cfg.patience)
                break

    if not result.dev_history:
        run_dev(result.final_step)
    result.checkpoint = best
    return result
