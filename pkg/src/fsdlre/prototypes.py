"""Per-episode prototypes: relation prototypes from support instances and
task-specific NOTA prototypes from a learnable base bank.

Each target relation's prototype averages the representations of its support
instances. Each base NOTA vector picks the support NOTA instance that scores
high against it but low against every relation prototype, and is blended with
that instance; with an empty NOTA pool or the generation disabled, the bank
vectors are used verbatim.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import torch
from torch import nn

from .encoding import EncodedDocument
from .episodes import Episode, enumerate_nota_pairs
from .errors import InvariantError
from .representation import InstanceRep, ProjectionParams, instance_representation


class BaseNotaBank(nn.Module):
    """Learnable base NOTA prototype vectors, shared across episodes."""

    def __init__(self, count: int, pair_size: int, seed: int = 0,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        if count < 1:
            raise InvariantError("NOTA bank needs at least one vector")
        self.vectors = nn.Parameter(torch.empty(count, pair_size, dtype=dtype))
        gen = torch.Generator().manual_seed(seed)
        bound = 1.0 / math.sqrt(pair_size)
        with torch.no_grad():
            self.vectors.copy_(
                torch.empty_like(self.vectors).uniform_(-bound, bound, generator=gen)
            )

    @property
    def count(self) -> int:
        return self.vectors.shape[0]


@dataclass(frozen=True)
class PrototypeSet:
    """Episode-level class representatives used for classification."""
    relation_prototypes: dict[str, torch.Tensor]          # relation_id -> (2d,)
    nota_prototypes: tuple[torch.Tensor, ...]             # N_nota vectors (2d,)
    relation_embeddings: dict[str, torch.Tensor]          # relation_id -> (d,)


def relation_prototype(instance_reps: Sequence[InstanceRep]) -> torch.Tensor:
    """Arithmetic mean of the instances' representations."""
    if not instance_reps:
        raise InvariantError("relation prototype needs at least one instance")
    return torch.stack([r.s for r in instance_reps]).mean(dim=0)


def collect_support_instances(
    episode: Episode,
    encodings: Mapping[str, EncodedDocument],
    relation_vecs: Mapping[str, torch.Tensor],
    params: ProjectionParams,
    k: float,
    use_instance_attention: bool = True,
) -> tuple[dict[str, list[InstanceRep]], list[InstanceRep]]:
    """Build every support relation instance and every support NOTA instance.

    A pair holding m target relations yields m relation instances and no NOTA
    entry; each relation instance uses the relation-guided attention path
    unless ``use_instance_attention`` is off (then the plain pair path, as in
    the pair-level ablation). NOTA instances always use the pair path.
    """
    by_relation: dict[str, list[InstanceRep]] = {r: [] for r in episode.target_relations}
    nota_reps: list[InstanceRep] = []
    for doc in episode.support_docs:
        enc = encodings[doc.doc_id]
        for t in doc.triples:
            vec = relation_vecs[t.relation_id] if use_instance_attention else None
            by_relation[t.relation_id].append(instance_representation(
                enc, t.head, t.tail, vec, params, k, relation_id=t.relation_id
            ))
        for head, tail in sorted(enumerate_nota_pairs(doc, episode.target_relations)):
            nota_reps.append(instance_representation(
                enc, head, tail, None, params, k
            ))
    return by_relation, nota_reps


def select_nota_instance(
    base_vec: torch.Tensor,
    nota_reps: Sequence[InstanceRep],
    relation_protos: Mapping[str, torch.Tensor],
) -> InstanceRep:
    """The NOTA instance scoring highest on (s . base) - max_r (s . p_r);
    ties resolve to the lowest sequence index."""
    if not nota_reps:
        raise InvariantError("select_nota_instance needs a non-empty NOTA pool")
    if not relation_protos:
        raise InvariantError("select_nota_instance needs relation prototypes")
    with torch.no_grad():
        S = torch.stack([r.s for r in nota_reps])
        P = torch.stack(list(relation_protos.values()))
        scores = S @ base_vec - (S @ P.transpose(0, 1)).max(dim=1).values
    best = 0
    for i in range(1, len(nota_reps)):
        if scores[i].item() > scores[best].item():
            best = i
    return nota_reps[best]


def nota_prototype(
    base_vec: torch.Tensor, selected: Optional[InstanceRep], alpha: float
) -> torch.Tensor:
    """Convex blend alpha * base + (1 - alpha) * instance; the base vector
    alone when no instance is available."""
    if not 0.0 <= alpha <= 1.0:
        raise InvariantError(f"alpha must lie in [0, 1], got {alpha}")
    if selected is None:
        return base_vec
    return alpha * base_vec + (1.0 - alpha) * selected.s


def prototypes_from_instances(
    episode: Episode,
    by_relation: Mapping[str, Sequence[InstanceRep]],
    nota_reps: Sequence[InstanceRep],
    relation_vecs: Mapping[str, torch.Tensor],
    bank: BaseNotaBank,
    alpha: float,
    disable_tnpg: bool = False,
) -> PrototypeSet:
    relation_protos = {
        r: relation_prototype(by_relation[r]) for r in episode.target_relations
    }
    if disable_tnpg or not nota_reps:
        nota_protos = tuple(bank.vectors[i] for i in range(bank.count))
    else:
        nota_protos = tuple(
            nota_prototype(
                bank.vectors[i],
                select_nota_instance(bank.vectors[i], nota_reps, relation_protos),
                alpha,
            )
            for i in range(bank.count)
        )
    return PrototypeSet(
        relation_prototypes=relation_protos,
        nota_prototypes=nota_protos,
        relation_embeddings={r: relation_vecs[r] for r in episode.target_relations},
    )


def build_prototype_set(
    episode: Episode,
    encodings: Mapping[str, EncodedDocument],
    relation_vecs: Mapping[str, torch.Tensor],
    params: ProjectionParams,
    bank: BaseNotaBank,
    k: float,
    alpha: float,
    disable_tnpg: bool = False,
    use_instance_attention: bool = True,
) -> PrototypeSet:
    """Full prototype construction for one episode."""
    by_relation, nota_reps = collect_support_instances(
        episode, encodings, relation_vecs, params, k,
        use_instance_attention=use_instance_attention,
    )
    return prototypes_from_instances(
        episode, by_relation, nota_reps, relation_vecs, bank, alpha,
        disable_tnpg=disable_tnpg,
    )
