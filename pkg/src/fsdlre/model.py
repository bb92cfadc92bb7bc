"""Episode-level model: one object tying the encoder provider, the projection
parameters and the base NOTA bank together, with a forward pass that turns an
episode into prototypes, query-pair representations and losses.

The relation catalog travels with the model because episodes reference target
relations by id while the relation encoder consumes their name/description
text.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import torch
from torch import nn

from .corpus import RelationType
from .encoding import (
    EncodedDocument,
    EncoderProvider,
    encode_long_document,
    encode_relation,
    insert_markers,
)
from .episodes import Episode
from .errors import ConfigError, InvariantError
from .losses import (
    ContrastiveConfig,
    LossBreakdown,
    LossCounts,
    bce_loss,
    rcl_loss,
    scl_loss,
    total_loss,
)
from .prototypes import BaseNotaBank, PrototypeSet, collect_support_instances, prototypes_from_instances
from .representation import InstanceRep, ProjectionParams, QueryPairRep, query_pair_representation

CONTRASTIVE_VARIANTS = ("rcl", "scl", "off")


@dataclass(frozen=True)
class ModelConfig:
    """Episode-model hyperparameters (see hyperparameter_defaults for the
    per-task-family values)."""
    top_k_percent: float = 15.0
    nota_count: int = 15
    nota_alpha: float = 0.9
    tau: float = 0.4
    lam: float = 0.1
    contrastive_variant: str = "rcl"
    disable_tnpg: bool = False
    disable_ibpc: bool = False

    def __post_init__(self):
        if not 0.0 <= self.top_k_percent <= 100.0:
            raise ConfigError(f"top_k_percent must be in [0, 100], got {self.top_k_percent}")
        if self.nota_count < 1:
            raise ConfigError(f"nota_count must be >= 1, got {self.nota_count}")
        if not 0.0 <= self.nota_alpha <= 1.0:
            raise ConfigError(f"nota_alpha must be in [0, 1], got {self.nota_alpha}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if self.contrastive_variant not in CONTRASTIVE_VARIANTS:
            raise ConfigError(
                f"contrastive_variant must be one of {CONTRASTIVE_VARIANTS}, "
                f"got {self.contrastive_variant!r}"
            )

    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(tau=self.tau, variant=self.contrastive_variant)


@dataclass(frozen=True)
class EpisodeResult:
    loss: LossBreakdown
    prototypes: PrototypeSet
    query_reps: tuple[QueryPairRep, ...]
    gold_by_pair: Mapping[tuple[int, int], frozenset[str]]
    support_by_relation: Mapping[str, tuple[InstanceRep, ...]]
    support_nota: tuple[InstanceRep, ...]


def ordered_entity_pairs(n_entities: int) -> list[tuple[int, int]]:
    return [(h, t) for h in range(n_entities) for t in range(n_entities) if h != t]


class EpisodeModel(nn.Module):
    """Provider + projection + NOTA bank, with the per-episode forward pass."""

    def __init__(
        self,
        provider: EncoderProvider,
        catalog: Mapping[str, RelationType],
        config: ModelConfig,
        seed: int = 0,
    ):
        super().__init__()
        self.config = config
        self.catalog = dict(catalog)
        # offsets decouple the three parameter groups' init streams
        self.projection = ProjectionParams(provider.hidden_size, seed=seed + 101, dtype=provider.dtype)
        self.bank = BaseNotaBank(
            config.nota_count, 2 * provider.hidden_size, seed=seed + 202, dtype=provider.dtype
        )
        if isinstance(provider, nn.Module):
            self.provider = provider
        else:
            object.__setattr__(self, "provider", provider)

    def encode_episode(self, episode: Episode) -> dict[str, EncodedDocument]:
        out: dict[str, EncodedDocument] = {}
        for doc in (*episode.support_docs, episode.query_doc):
            if doc.doc_id not in out:
                marked = insert_markers(doc, self.provider.tokenizer)
                out[doc.doc_id] = encode_long_document(marked, self.provider)
        return out

    def relation_vectors(
        self, episode: Episode, cache: Optional[dict[str, torch.Tensor]] = None
    ) -> dict[str, torch.Tensor]:
        vecs = {}
        for rid in episode.target_relations:
            rel = self.catalog.get(rid)
            if rel is None:
                raise InvariantError(f"target relation {rid!r} missing from the catalog")
            vecs[rid] = encode_relation(rel, self.provider, cache)
        return vecs

    def forward(
        self, episode: Episode, relation_cache: Optional[dict[str, torch.Tensor]] = None
    ) -> EpisodeResult:
        cfg = self.config
        encodings = self.encode_episode(episode)
        rel_vecs = self.relation_vectors(episode, relation_cache)

        by_relation, nota_reps = collect_support_instances(
            episode, encodings, rel_vecs, self.projection, cfg.top_k_percent,
            use_instance_attention=not cfg.disable_ibpc,
        )
        prototypes = prototypes_from_instances(
            episode, by_relation, nota_reps, rel_vecs, self.bank, cfg.nota_alpha,
            disable_tnpg=cfg.disable_tnpg,
        )
        if cfg.disable_tnpg:
            for i, proto in enumerate(prototypes.nota_prototypes):
                if not torch.equal(proto, self.bank.vectors[i]):
                    raise InvariantError(
                        "task NOTA prototypes must equal the bank when task-specific "
                        "generation is disabled"
                    )

        query_enc = encodings[episode.query_doc.doc_id]
        gold_by_pair: dict[tuple[int, int], set[str]] = {}
        for t in episode.gold_query_triples:
            gold_by_pair.setdefault((t.head, t.tail), set()).add(t.relation_id)
        reps = tuple(
            query_pair_representation(query_enc, h, t, self.projection)
            for h, t in ordered_entity_pairs(len(episode.query_doc.entities))
        )
        labeled = [
            (rep, frozenset(gold_by_pair.get((rep.head, rep.tail), ()))) for rep in reps
        ]

        bce = bce_loss(labeled, prototypes)
        flat = [inst for rid in episode.target_relations for inst in by_relation[rid]]
        if cfg.contrastive_variant == "rcl":
            rcl, skipped = rcl_loss(flat, rel_vecs, cfg.contrastive())
        elif cfg.contrastive_variant == "scl":
            rcl, skipped = scl_loss(flat, cfg.contrastive())
        else:
            rcl, skipped = torch.zeros((), dtype=bce.dtype), 0

        breakdown = total_loss(
            bce, rcl, cfg.lam, LossCounts(len(reps), len(flat), skipped)
        )
        return EpisodeResult(
            loss=breakdown,
            prototypes=prototypes,
            query_reps=reps,
            gold_by_pair={p: frozenset(v) for p, v in gold_by_pair.items()},
            support_by_relation={r: tuple(v) for r, v in by_relation.items()},
            support_nota=tuple(nota_reps),
        )
