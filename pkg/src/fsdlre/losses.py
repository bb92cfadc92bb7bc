"""Losses and the classification probability.

The contrastive term contrasts support relation instances against each other,
up-weighting negatives whose relation description is similar to the anchor's
(pushing semantically close relations apart harder). Classification is binary
per (query pair, target relation): the positive logit is the dot product with
the relation prototype, the negative logit the best dot product over the NOTA
prototypes.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import torch

from .errors import ConfigError, InvariantError
from .prototypes import PrototypeSet
from .representation import InstanceRep, QueryPairRep

COSSIM_EPS = 1e-12
PROB_CLAMP = 1e-12

CONTRASTIVE_VARIANTS = ("rcl", "scl", "off")


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.4
    variant: str = "rcl"

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if self.variant not in CONTRASTIVE_VARIANTS:
            raise ConfigError(f"variant must be one of {CONTRASTIVE_VARIANTS}")


class LossCounts(NamedTuple):
    query_pairs: int
    support_instances: int
    skipped_singletons: int


@dataclass(frozen=True)
class LossBreakdown:
    bce: torch.Tensor
    rcl: torch.Tensor
    lam: float
    total: torch.Tensor
    counts: LossCounts


def relation_pair_weight(
    rel_vec: torch.Tensor, other_vec: torch.Tensor, same_relation: bool
) -> float:
    """Negative-pair weight: 1 within a relation, else 1 + (cossim + 1) / 2,
    so cross-relation weights lie in [1, 2] and grow with description
    similarity."""
    if same_relation:
        return 1.0
    na = rel_vec.norm().item()
    nb = other_vec.norm().item()
    if na < COSSIM_EPS or nb < COSSIM_EPS:
        raise InvariantError("relation embedding with (near-)zero norm")
    cossim = torch.dot(rel_vec, other_vec).item() / (na * nb)
    return 1.0 + (cossim + 1.0) / 2.0


def _pairwise_weights(
    labels: Sequence[str], relation_embeddings: Mapping[str, torch.Tensor]
) -> torch.Tensor:
    """Log of the anchor x candidate weight matrix (zeros for same relation)."""
    vecs = {r: relation_embeddings[r] for r in set(labels)}
    norms = {r: v / v.norm().clamp_min(COSSIM_EPS) for r, v in vecs.items()}
    n = len(labels)
    log_w = torch.zeros(n, n, dtype=next(iter(vecs.values())).dtype)
    for i in range(n):
        for j in range(n):
            if labels[i] != labels[j]:
                cossim = torch.dot(norms[labels[i]], norms[labels[j]])
                log_w[i, j] = torch.log1p((cossim + 1.0) / 2.0)
    return log_w


def _contrastive_loss(
    instances: Sequence[InstanceRep],
    tau: float,
    log_weights: torch.Tensor | None,
) -> tuple[torch.Tensor, int]:
    """Shared core: mean over anchors with at least one positive of the mean
    positive term -log( exp(sim+) / sum_neg w * exp(sim) ). Anchors whose
    relation has no other instance are skipped and counted."""
    n = len(instances)
    if n < 2:
        return torch.tensor(0.0, dtype=torch.float64), n
    labels = [r.relation_id for r in instances]
    if any(lab is None for lab in labels):
        raise InvariantError("contrastive loss takes relation instances only")
    S = torch.stack([r.s for r in instances])
    sim = S @ S.transpose(0, 1) / tau
    if log_weights is None:
        log_weights = torch.zeros_like(sim)

    anchor_terms = []
    skipped = 0
    eye = torch.eye(n, dtype=torch.bool)
    for i in range(n):
        positives = [j for j in range(n) if j != i and labels[j] == labels[i]]
        if not positives:
            skipped += 1
            continue
        others = ~eye[i]
        denom = torch.logsumexp(sim[i][others] + log_weights[i][others], dim=0)
        pos_terms = torch.stack([-(sim[i, j] - denom) for j in positives])
        anchor_terms.append(pos_terms.mean())
    if not anchor_terms:
        return torch.tensor(0.0, dtype=S.dtype), skipped
    return torch.stack(anchor_terms).mean(), skipped


def rcl_loss(
    instances: Sequence[InstanceRep],
    relation_embeddings: Mapping[str, torch.Tensor],
    cfg: ContrastiveConfig,
) -> tuple[torch.Tensor, int]:
    """Relation-weighted contrastive loss over support relation instances.
    Returns (loss, number of skipped singleton anchors)."""
    if cfg.variant != "rcl":
        raise ConfigError(f"rcl_loss called with variant {cfg.variant!r}")
    if len(instances) < 2:
        return torch.tensor(0.0, dtype=torch.float64), len(instances)
    labels = [r.relation_id for r in instances]
    if any(lab is None for lab in labels):
        raise InvariantError("contrastive loss takes relation instances only")
    log_w = _pairwise_weights(labels, relation_embeddings)
    return _contrastive_loss(instances, cfg.tau, log_w)


def scl_loss(
    instances: Sequence[InstanceRep], cfg: ContrastiveConfig
) -> tuple[torch.Tensor, int]:
    """Plain supervised contrastive variant: all negative weights equal 1."""
    if cfg.variant != "scl":
        raise ConfigError(f"scl_loss called with variant {cfg.variant!r}")
    return _contrastive_loss(instances, cfg.tau, None)


def relation_probability(
    q: QueryPairRep, relation_proto: torch.Tensor, nota_protos: Sequence[torch.Tensor]
) -> torch.Tensor:
    """P(relation | pair) from the two-logit softmax over (q.p_r, best NOTA
    logit); strictly increasing in the first, decreasing in the second."""
    if not len(nota_protos):
        raise InvariantError("relation_probability needs at least one NOTA prototype")
    rel_logit = torch.dot(q.q, relation_proto)
    nota_logit = torch.stack([torch.dot(q.q, p) for p in nota_protos]).max()
    return torch.sigmoid(rel_logit - nota_logit)


def bce_loss(
    query_pairs: Sequence[tuple[QueryPairRep, frozenset[str]]],
    prototype_set: PrototypeSet,
) -> torch.Tensor:
    """Mean over query pairs of the summed per-relation binary cross-entropy;
    probabilities are clamped away from {0, 1} before the logs."""
    if not query_pairs:
        return torch.tensor(0.0, dtype=torch.float64)
    relations = list(prototype_set.relation_prototypes)
    P_rel = torch.stack([prototype_set.relation_prototypes[r] for r in relations])
    N = torch.stack(list(prototype_set.nota_prototypes))
    Q = torch.stack([qp.q for qp, _ in query_pairs])
    y = torch.tensor(
        [[1.0 if r in gold else 0.0 for r in relations] for _, gold in query_pairs],
        dtype=Q.dtype,
    )
    delta = Q @ P_rel.transpose(0, 1) - (Q @ N.transpose(0, 1)).max(dim=1, keepdim=True).values
    probs = torch.sigmoid(delta).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    per_pair = -(y * probs.log() + (1.0 - y) * (1.0 - probs).log()).sum(dim=1)
    return per_pair.mean()


def total_loss(
    bce: torch.Tensor,
    rcl: torch.Tensor,
    lam: float,
    counts: LossCounts = LossCounts(0, 0, 0),
) -> LossBreakdown:
    """Combine the classification and contrastive terms: total = bce + lam * rcl."""
    if lam < 0:
        raise ConfigError(f"loss weight must be non-negative, got {lam}")
    if not torch.is_tensor(bce):
        bce = torch.tensor(float(bce), dtype=torch.float64)
    if not torch.is_tensor(rcl):
        rcl = torch.tensor(float(rcl), dtype=torch.float64)
    return LossBreakdown(bce=bce, rcl=rcl, lam=lam, total=bce + lam * rcl, counts=counts)
