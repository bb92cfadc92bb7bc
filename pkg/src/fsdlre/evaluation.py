"""Inference and scoring: the dot-product extraction rule, macro F1 and the
analysis slices (NOTA-rate bins, per-relation support-count categories,
support-embedding dumps for external projection)."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence

import torch

from .corpus import Triple
from .episodes import Episode, nota_rate
from .errors import InvariantError
from .model import EpisodeModel

logger = logging.getLogger(__name__)

NOTA_RATE_BOUNDARIES = (0.0, 0.95, 0.97, 0.99, 1.0)
SUPPORT_COUNT_LABELS = tuple(str(i) for i in range(1, 10)) + (">=10",)
AGGREGATIONS = ("pooled", "per-episode-mean")


@dataclass(frozen=True)
class PredictionSet:
    """Predicted triples for one episode's query document."""
    episode_id: str
    target_relations: tuple[str, ...]
    triples: frozenset[Triple]

    def __post_init__(self):
        targets = set(self.target_relations)
        for t in self.triples:
            if t.relation_id not in targets:
                raise InvariantError(f"predicted triple {t} outside the target relations")


class PerRelationScore(NamedTuple):
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int


@dataclass(frozen=True)
class ScoreReport:
    macro_f1: float
    per_relation: Mapping[str, PerRelationScore]
    episode_count: int
    aggregation: str = "pooled"

    def to_json_dict(self) -> dict:
        return {
            "macro_f1": self.macro_f1,
            "aggregation": self.aggregation,
            "episode_count": self.episode_count,
            "per_relation": {
                r: {"precision": s.precision, "recall": s.recall, "f1": s.f1,
                    "tp": s.tp, "fp": s.fp, "fn": s.fn}
                for r, s in self.per_relation.items()
            },
        }


def predict_episode(
    model: EpisodeModel,
    episode: Episode,
    relation_cache: Optional[dict[str, torch.Tensor]] = None,
) -> PredictionSet:
    """Extract (h, r, t) iff the query pair's dot product with the relation
    prototype strictly exceeds its best NOTA logit."""
    with torch.no_grad():
        result = model(episode, relation_cache=relation_cache)
        nota = torch.stack(list(result.prototypes.nota_prototypes))
        triples = set()
        for rep in result.query_reps:
            nota_best = (nota @ rep.q).max().item()
            for rid in episode.target_relations:
                logit = torch.dot(rep.q, result.prototypes.relation_prototypes[rid]).item()
                if logit > nota_best:
                    triples.add(Triple(head=rep.head, tail=rep.tail, relation_id=rid))
    return PredictionSet(
        episode_id=episode.episode_id,
        target_relations=episode.target_relations,
        triples=frozenset(triples),
    )


def _f1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def _pooled_counts(
    predictions: Sequence[PredictionSet], golds: Sequence[frozenset[Triple]]
) -> dict[str, list[int]]:
    counts: dict[str, list[int]] = {}
    for pred, gold in zip(predictions, golds):
        for t in pred.triples:
            slot = counts.setdefault(t.relation_id, [0, 0, 0])
            if t in gold:
                slot[0] += 1
            else:
                slot[1] += 1
        for t in gold:
            if t not in pred.triples:
                counts.setdefault(t.relation_id, [0, 0, 0])[2] += 1
    return counts


def macro_f1(
    predictions: Sequence[PredictionSet],
    golds: Sequence[frozenset[Triple]],
    relation_universe: Optional[Iterable[str]] = None,
    aggregation: str = "pooled",
) -> ScoreReport:
    """Macro F1 over relation types. Pooled (default): TP/FP/FN accumulated
    per type across episodes, then an unweighted mean of per-type F1 over the
    universe. per-episode-mean: each episode scored over its own target set,
    then episode scores averaged. per_relation always reports pooled counts."""
    if len(predictions) != len(golds):
        raise InvariantError(
            f"{len(predictions)} prediction sets vs {len(golds)} gold sets"
        )
    if aggregation not in AGGREGATIONS:
        raise InvariantError(f"aggregation must be one of {AGGREGATIONS}")
    if relation_universe is None:
        relation_universe = sorted({r for p in predictions for r in p.target_relations})
    universe = list(dict.fromkeys(relation_universe))

    counts = _pooled_counts(predictions, golds)
    per_relation = {}
    for r in universe:
        tp, fp, fn = counts.get(r, [0, 0, 0])
        precision, recall, f1 = _f1(tp, fp, fn)
        per_relation[r] = PerRelationScore(precision, recall, f1, tp, fp, fn)

    if aggregation == "pooled":
        macro = (
            sum(per_relation[r].f1 for r in universe) / len(universe) if universe else 0.0
        )
    else:
        episode_scores = []
        for pred, gold in zip(predictions, golds):
            ep_counts = _pooled_counts([pred], [gold])
            f1s = [_f1(*ep_counts.get(r, [0, 0, 0]))[2] for r in pred.target_relations]
            episode_scores.append(sum(f1s) / len(f1s) if f1s else 0.0)
        macro = sum(episode_scores) / len(episode_scores) if episode_scores else 0.0

    return ScoreReport(
        macro_f1=macro,
        per_relation=per_relation,
        episode_count=len(predictions),
        aggregation=aggregation,
    )


def evaluate_episodes(
    model: EpisodeModel,
    episodes: Sequence[Episode],
    relation_universe: Optional[Iterable[str]] = None,
    aggregation: str = "pooled",
    relation_cache: Optional[dict[str, torch.Tensor]] = None,
) -> ScoreReport:
    """Predict every episode and score against its held-out gold triples."""
    if relation_cache is None:
        relation_cache = {}
    predictions = [predict_episode(model, ep, relation_cache) for ep in episodes]
    golds = [ep.gold_query_triples for ep in episodes]
    return macro_f1(predictions, golds, relation_universe, aggregation)


def _nota_bin_label(lo: float, hi: float, closed: bool) -> str:
    return f"[{lo:.2f},{hi:.2f}{']' if closed else ')'}"


def bin_by_nota_rate(
    episodes: Sequence[Episode],
    boundaries: Sequence[float] = NOTA_RATE_BOUNDARIES,
) -> dict[str, list[Episode]]:
    """Partition episodes by query NOTA rate into left-closed bins (the last
    bin also closes on the right)."""
    bounds = list(boundaries)
    if len(bounds) < 2 or any(a >= b for a, b in zip(bounds, bounds[1:])):
        raise InvariantError(f"boundaries must be strictly increasing, got {bounds}")
    if bounds[0] != 0.0 or bounds[-1] != 1.0:
        raise InvariantError(f"boundaries must cover [0, 1], got {bounds}")
    labels = [
        _nota_bin_label(lo, hi, closed=(i == len(bounds) - 2))
        for i, (lo, hi) in enumerate(zip(bounds, bounds[1:]))
    ]
    out: dict[str, list[Episode]] = {lab: [] for lab in labels}
    for ep in episodes:
        rate = nota_rate(ep)
        idx = len(bounds) - 2
        for i, (lo, hi) in enumerate(zip(bounds, bounds[1:])):
            if lo <= rate < hi:
                idx = i
                break
        out[labels[idx]].append(ep)
    return out


def bin_by_support_count(
    episodes: Sequence[Episode],
) -> dict[str, list[tuple[str, Episode]]]:
    """Group (target relation, episode) pairs by the relation's support
    instance count: categories 1..9 and >=10."""
    out: dict[str, list[tuple[str, Episode]]] = {lab: [] for lab in SUPPORT_COUNT_LABELS}
    for ep in episodes:
        for rid in ep.target_relations:
            count = ep.support_instance_count(rid)
            label = ">=10" if count >= 10 else str(count)
            out[label].append((rid, ep))
    return out


def analyze(
    model: EpisodeModel,
    episodes: Sequence[Episode],
    boundaries: Sequence[float] = NOTA_RATE_BOUNDARIES,
    aggregation: str = "pooled",
) -> dict:
    """Per-slice macro F1: NOTA-rate bins score their episodes in full;
    support-count categories score each member relation within its episode."""
    relation_cache: dict[str, torch.Tensor] = {}
    predictions = {
        ep.episode_id: predict_episode(model, ep, relation_cache) for ep in episodes
    }

    nota_bins = {}
    for label, members in bin_by_nota_rate(episodes, boundaries).items():
        if members:
            preds = [predictions[ep.episode_id] for ep in members]
            golds = [ep.gold_query_triples for ep in members]
            report = macro_f1(preds, golds, aggregation=aggregation)
            nota_bins[label] = {"episodes": len(members), "macro_f1": report.macro_f1}
        else:
            nota_bins[label] = {"episodes": 0, "macro_f1": None}

    support_bins = {}
    for label, members in bin_by_support_count(episodes).items():
        counts: dict[str, list[int]] = {}
        for rid, ep in members:
            pred = predictions[ep.episode_id]
            pred_r = {t for t in pred.triples if t.relation_id == rid}
            gold_r = {t for t in ep.gold_query_triples if t.relation_id == rid}
            slot = counts.setdefault(rid, [0, 0, 0])
            slot[0] += len(pred_r & gold_r)
            slot[1] += len(pred_r - gold_r)
            slot[2] += len(gold_r - pred_r)
        if counts:
            f1s = [_f1(*c)[2] for c in counts.values()]
            support_bins[label] = {
                "pairs": len(members), "macro_f1": sum(f1s) / len(f1s),
            }
        else:
            support_bins[label] = {"pairs": 0, "macro_f1": None}

    return {"nota_rate": nota_bins, "support_count": support_bins}


def dump_support_embeddings(
    model: EpisodeModel, episodes: Sequence[Episode], path: str | Path
) -> Path:
    """Write support relation-instance representations and the relation
    prototypes as TSV; values carry 17 significant digits so an external
    projection sees the exact vectors."""
    path = Path(path)
    lines = ["episode_id\trelation_id\tkind\tcomponents"]
    relation_cache: dict[str, torch.Tensor] = {}
    with torch.no_grad():
        for ep in episodes:
            result = model(ep, relation_cache=relation_cache)
            for rid in ep.target_relations:
                for inst in result.support_by_relation[rid]:
                    vals = "\t".join(format(v, ".17g") for v in inst.s.tolist())
                    lines.append(f"{ep.episode_id}\t{rid}\tinstance\t{vals}")
                proto = result.prototypes.relation_prototypes[rid]
                vals = "\t".join(format(v, ".17g") for v in proto.tolist())
                lines.append(f"{ep.episode_id}\t{rid}\tprototype\t{vals}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
