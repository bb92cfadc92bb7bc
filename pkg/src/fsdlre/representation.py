"""Attention fusion and instance/pair representations.

The pipeline per relation instance: multiply head- and tail-entity attention
into a pair-level token distribution, amplify the part of it most relevant to
the relation description (top-k% of the pair x relation product), pool token
embeddings under the fused distribution into a context vector, then fuse that
context with each entity embedding through a tanh projection. NOTA instances
and query pairs skip the relation-guided amplification and use the pair-level
distribution directly.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .encoding import EncodedDocument, entity_attention, entity_embedding
from .errors import DegenerateOverlapError, NumericError

logger = logging.getLogger(__name__)

OVERLAP_EPS = 1e-12


@dataclass(frozen=True)
class InstanceRep:
    """Representation of one support (relation or NOTA) instance."""
    s: torch.Tensor  # size 2d, every component in (-1, 1)
    doc_id: str
    head: int
    tail: int
    relation_id: Optional[str] = None  # None marks a NOTA instance


@dataclass(frozen=True)
class QueryPairRep:
    q: torch.Tensor  # size 2d
    head: int
    tail: int


class ProjectionParams(nn.Module):
    """Trainable maps of the representation pipeline: the bilinear form behind
    relation-level attention plus the head/tail fusion projections."""

    def __init__(self, hidden_size: int, seed: int = 0, dtype: torch.dtype = torch.float64):
        super().__init__()
        d = hidden_size
        self.hidden_size = d
        self.relation_bilinear = nn.Parameter(torch.empty(d, d, dtype=dtype))
        self.head_proj = nn.Linear(2 * d, d, dtype=dtype)
        self.tail_proj = nn.Linear(2 * d, d, dtype=dtype)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.relation_bilinear.copy_(
                torch.empty_like(self.relation_bilinear).uniform_(
                    -1.0 / math.sqrt(d), 1.0 / math.sqrt(d), generator=gen
                )
            )
            bound = 1.0 / math.sqrt(2 * d)
            for proj in (self.head_proj, self.tail_proj):
                proj.weight.copy_(
                    torch.empty_like(proj.weight).uniform_(-bound, bound, generator=gen)
                )
                proj.bias.copy_(
                    torch.empty_like(proj.bias).uniform_(-bound, bound, generator=gen)
                )


def pair_attention(a_head: torch.Tensor, a_tail: torch.Tensor) -> torch.Tensor:
    """Elementwise product of the two entity attentions, renormalized by their
    dot product. Raises DegenerateOverlapError when the supports are
    (numerically) disjoint; callers fall back to the uniform distribution."""
    overlap = torch.dot(a_head, a_tail)
    if overlap.item() < OVERLAP_EPS:
        raise DegenerateOverlapError(
            f"entity attentions share no support (overlap {overlap.item():.3e})"
        )
    return a_head * a_tail / overlap


def relation_attention(H: torch.Tensor, W: torch.Tensor, relation_vec: torch.Tensor) -> torch.Tensor:
    """Distribution over tokens from the scaled bilinear score H W h_r / sqrt(d)."""
    d = H.shape[1]
    logits = H @ W @ relation_vec / math.sqrt(d)
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite relation-attention logits")
    return torch.softmax(logits, dim=0)


def top_k_percent_indices(scores: torch.Tensor, k: float) -> torch.Tensor:
    """Indices of the largest ceil(k% * n) entries; ties keep the lower index."""
    if not 0.0 <= k <= 100.0:
        raise ValueError(f"k must be a percentage in [0, 100], got {k}")
    count = math.ceil(k / 100.0 * scores.shape[0])
    order = torch.argsort(scores, descending=True, stable=True)
    return order[:count]


def instance_attention(a_pair: torch.Tensor, a_rel: torch.Tensor, k: float) -> torch.Tensor:
    """Amplify the pair distribution with the relation distribution on the
    top-k% tokens of their elementwise product, then renormalize (L1)."""
    idx = top_k_percent_indices(a_pair * a_rel, k)
    mask = torch.zeros_like(a_pair)
    mask[idx] = 1.0
    fused = a_pair + mask * a_rel
    return fused / fused.sum()


def context_embedding(H: torch.Tensor, attention: torch.Tensor) -> torch.Tensor:
    """Attention-weighted average of token embeddings."""
    return H.transpose(0, 1) @ attention


def entity_fusion(
    entity_vec: torch.Tensor, context: torch.Tensor, side: str, params: ProjectionParams
) -> torch.Tensor:
    """tanh projection of [entity embedding; context]; components in (-1, 1)."""
    if side == "head":
        proj = params.head_proj
    elif side == "tail":
        proj = params.tail_proj
    else:
        raise ValueError(f"side must be 'head' or 'tail', got {side!r}")
    return torch.tanh(proj(torch.cat([entity_vec, context])))


def _pair_distribution(enc: EncodedDocument, head: int, tail: int) -> torch.Tensor:
    try:
        return pair_attention(entity_attention(enc, head), entity_attention(enc, tail))
    except DegenerateOverlapError:
        logger.warning(
            "doc %r pair (%d, %d): degenerate attention overlap; using uniform",
            enc.marked.doc_id, head, tail,
        )
        n = enc.marked.token_count
        return torch.full((n,), 1.0 / n, dtype=enc.A.dtype)


def _fused_pair_vector(
    enc: EncodedDocument, head: int, tail: int, attention: torch.Tensor, params: ProjectionParams
) -> torch.Tensor:
    context = context_embedding(enc.H, attention)
    z_head = entity_fusion(entity_embedding(enc, head), context, "head", params)
    z_tail = entity_fusion(entity_embedding(enc, tail), context, "tail", params)
    return torch.cat([z_head, z_tail])


def instance_representation(
    enc: EncodedDocument,
    head: int,
    tail: int,
    relation_vec: Optional[torch.Tensor],
    params: ProjectionParams,
    k: float,
    relation_id: Optional[str] = None,
) -> InstanceRep:
    """Instance representation s = [z_head; z_tail]. With a relation vector the
    fused top-k% attention drives the context; without one (NOTA instances)
    the pair-level attention is used directly."""
    if head == tail:
        raise ValueError(f"instance needs distinct entities, got head == tail == {head}")
    att = _pair_distribution(enc, head, tail)
    if relation_vec is not None:
        a_rel = relation_attention(enc.H, params.relation_bilinear, relation_vec)
        att = instance_attention(att, a_rel, k)
    return InstanceRep(
        s=_fused_pair_vector(enc, head, tail, att, params),
        doc_id=enc.marked.doc_id,
        head=head,
        tail=tail,
        relation_id=relation_id,
    )


def query_pair_representation(
    enc: EncodedDocument, head: int, tail: int, params: ProjectionParams
) -> QueryPairRep:
    """Query pair representation: the NOTA pipeline applied to a query pair."""
    if head == tail:
        raise ValueError(f"query pair needs distinct entities, got head == tail == {head}")
    att = _pair_distribution(enc, head, tail)
    return QueryPairRep(
        q=_fused_pair_vector(enc, head, tail, att, params), head=head, tail=tail
    )
