"""N-Doc episode construction: training-time sampling, fixed test-set files,
NOTA pair enumeration and per-episode statistics.

An episode bundles N fully-annotated support documents (triples restricted to
the episode's target relation set), one query document (annotation hidden) and
the gold query triples kept aside for scoring. Episode files are JSON lines:
a header record followed by one record per episode, referencing documents by id.
"""
from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import Corpus, Document, RelationSplit, Triple
from .errors import (
    InvariantError,
    SamplingExhaustedError,
    SchemaError,
    UndefinedRateError,
    VersionMismatchError,
)

logger = logging.getLogger(__name__)

EPISODE_SCHEMA_VERSION = 1
MAX_SAMPLING_ATTEMPTS = 1000

SOURCE_SPLITS = ("train", "dev", "test_in", "test_cross")
_SPLIT_TO_IDS = {"train": "train", "dev": "dev", "test_in": "test", "test_cross": "test"}


@dataclass(frozen=True)
class EpisodeConfig:
    n_docs: int = 1
    seed: int = 0
    max_target_relations: int = 6
    source_split: str = "train"

    def __post_init__(self):
        if self.n_docs < 1:
            raise InvariantError("n_docs must be >= 1")
        if self.n_docs not in (1, 3):
            logger.warning("n_docs=%d is outside the benchmark's 1-/3-Doc settings", self.n_docs)
        if self.max_target_relations < 1:
            raise InvariantError("max_target_relations must be >= 1")
        if self.source_split not in SOURCE_SPLITS:
            raise InvariantError(f"source_split must be one of {SOURCE_SPLITS}")


@dataclass(frozen=True)
class Episode:
    """One few-shot task: support documents, a query document, target relations."""
    support_docs: tuple[Document, ...]
    query_doc: Document  # triples stripped; gold kept separately
    target_relations: tuple[str, ...]
    gold_query_triples: frozenset[Triple]
    episode_id: str = field(default="", compare=False)

    def __post_init__(self):
        if not self.support_docs:
            raise InvariantError("episode needs at least one support document")
        targets = set(self.target_relations)
        if len(targets) != len(self.target_relations):
            raise InvariantError("duplicate target relation ids")
        doc_ids = [d.doc_id for d in self.support_docs] + [self.query_doc.doc_id]
        if len(set(doc_ids)) != len(doc_ids):
            raise InvariantError(f"support/query documents not distinct: {doc_ids}")
        if self.query_doc.triples:
            raise InvariantError("query document must carry no triples (gold is held separately)")
        supported = set()
        for doc in self.support_docs:
            for t in doc.triples:
                if t.relation_id not in targets:
                    raise InvariantError(
                        f"support doc {doc.doc_id!r} triple {t} outside target relations"
                    )
                supported.add(t.relation_id)
        missing = targets - supported
        if missing:
            raise InvariantError(f"target relations without support instances: {sorted(missing)}")
        for t in self.gold_query_triples:
            if t.relation_id not in targets:
                raise InvariantError(f"gold query triple {t} outside target relations")

    @property
    def n_docs(self) -> int:
        return len(self.support_docs)

    def support_instance_count(self, relation_id: str) -> int:
        return sum(
            1 for doc in self.support_docs for t in doc.triples if t.relation_id == relation_id
        )


def restrict_to_relations(doc: Document, relation_ids: Iterable[str]) -> Document:
    keep = set(relation_ids)
    return replace(doc, triples=tuple(t for t in doc.triples if t.relation_id in keep))


def strip_triples(doc: Document) -> Document:
    return replace(doc, triples=())


def make_episode(
    support_docs: Sequence[Document],
    query_doc: Document,
    target_relations: Sequence[str],
    episode_id: str = "",
) -> Episode:
    """Build an episode from full documents: restrict support annotation to the
    target set, hide the query annotation and keep the gold triples aside."""
    targets = tuple(target_relations)
    target_set = set(targets)
    gold = frozenset(t for t in query_doc.triples if t.relation_id in target_set)
    return Episode(
        support_docs=tuple(restrict_to_relations(d, target_set) for d in support_docs),
        query_doc=strip_triples(query_doc),
        target_relations=targets,
        gold_query_triples=gold,
        episode_id=episode_id,
    )


def sample_training_episode(
    corpus: Corpus,
    split: RelationSplit,
    cfg: EpisodeConfig,
    rng: random.Random,
    episode_id: str = "",
) -> Episode:
    """Rejection-sample one episode: uniform query doc, N uniform support docs
    without replacement, target set = (relations in support docs) ∩ split ids,
    capped to max_target_relations by a uniform subset. Retries when the
    intersection is empty, bounded by MAX_SAMPLING_ATTEMPTS."""
    if len(corpus) < cfg.n_docs + 1:
        raise SamplingExhaustedError(
            f"corpus has {len(corpus)} documents; need at least {cfg.n_docs + 1}"
        )
    pool = split.ids_for(_SPLIT_TO_IDS[cfg.source_split])
    if not pool:
        raise SamplingExhaustedError(f"relation split {cfg.source_split!r} is empty")

    docs = corpus.documents
    for _ in range(MAX_SAMPLING_ATTEMPTS):
        query = docs[rng.randrange(len(docs))]
        others = [d for d in docs if d.doc_id != query.doc_id]
        supports = rng.sample(others, cfg.n_docs)
        available = set()
        for d in supports:
            available |= d.relations_present()
        available &= pool
        if not available:
            continue
        ordered = sorted(available)
        if len(ordered) > cfg.max_target_relations:
            ordered = sorted(rng.sample(ordered, cfg.max_target_relations))
        return make_episode(supports, query, ordered, episode_id=episode_id)
    raise SamplingExhaustedError(
        f"no valid episode found in {MAX_SAMPLING_ATTEMPTS} attempts "
        f"(split {cfg.source_split!r}, n_docs={cfg.n_docs})"
    )


def episode_rng(seed: int, draw_index: int) -> random.Random:
    """Independent generator for one draw; stable across runs and platforms."""
    return random.Random(seed * 1_000_003 + draw_index)


def sample_episodes(
    corpus: Corpus,
    split: RelationSplit,
    cfg: EpisodeConfig,
    count: int,
    start_index: int = 0,
) -> list[Episode]:
    """Sample ``count`` episodes, each deterministic in (cfg.seed, draw index)."""
    return [
        sample_training_episode(
            corpus, split, cfg, episode_rng(cfg.seed, i),
            episode_id=f"{cfg.source_split}-{i}",
        )
        for i in range(start_index, start_index + count)
    ]


def enumerate_nota_pairs(doc: Document, target_relations: Iterable[str]) -> set[tuple[int, int]]:
    """All ordered entity pairs (h, t), h != t, holding no target relation in
    the document. Complements the positive-pair set within the n*(n-1) ordered
    pairs; only meaningful for completely annotated (support) documents."""
    targets = set(target_relations)
    positive = {(t.head, t.tail) for t in doc.triples if t.relation_id in targets}
    n = doc.n_entities
    return {
        (h, t) for h in range(n) for t in range(n) if h != t and (h, t) not in positive
    }


def nota_rate(episode: Episode) -> float:
    """Fraction of ordered query entity pairs that hold no target relation."""
    n = episode.query_doc.n_entities
    if n < 2:
        raise UndefinedRateError(
            f"episode {episode.episode_id!r}: query doc has {n} entities; rate undefined"
        )
    total = n * (n - 1)
    positive = {(t.head, t.tail) for t in episode.gold_query_triples}
    return 1.0 - len(positive) / total


def episode_stats(episodes: Sequence[Episode]) -> tuple[float, float]:
    """(average target-relation count, average support instances per relation),
    the second averaged within each episode before averaging across episodes."""
    if not episodes:
        raise InvariantError("episode_stats needs a non-empty episode sequence")
    n_values, k_values = [], []
    for ep in episodes:
        n_values.append(len(ep.target_relations))
        counts = [ep.support_instance_count(r) for r in ep.target_relations]
        k_values.append(sum(counts) / len(counts))
    return sum(n_values) / len(n_values), sum(k_values) / len(k_values)


# -- episode files --

def _triple_to_json(t: Triple) -> list:
    return [t.head, t.tail, t.relation_id]


def _triple_from_json(raw, where: str) -> Triple:
    if not (isinstance(raw, list) and len(raw) == 3):
        raise SchemaError(f"{where}: triple must be [head, tail, relation_id]")
    return Triple(head=int(raw[0]), tail=int(raw[1]), relation_id=str(raw[2]))


def write_episode_file(
    episodes: Sequence[Episode], path: str | Path, split_name: str = "unspecified"
) -> None:
    """One JSON-lines file: header record, then one record per episode
    (documents referenced by id, triples listed explicitly)."""
    path = Path(path)
    n_docs = episodes[0].n_docs if episodes else 0
    with path.open("w", encoding="utf-8") as f:
        f.write(json.dumps({
            "schema_version": EPISODE_SCHEMA_VERSION,
            "n_docs": n_docs,
            "split_name": split_name,
        }) + "\n")
        for ep in episodes:
            f.write(json.dumps({
                "support_doc_ids": [d.doc_id for d in ep.support_docs],
                "support_triples": [
                    [_triple_to_json(t) for t in d.triples] for d in ep.support_docs
                ],
                "query_doc_id": ep.query_doc.doc_id,
                "target_relation_ids": list(ep.target_relations),
                "gold_query_triples": [_triple_to_json(t) for t in sorted(ep.gold_query_triples)],
            }) + "\n")


def read_episode_file(path: str | Path, corpus: Corpus) -> list[Episode]:
    """Read episodes back in file order, resolving documents against ``corpus``."""
    path = Path(path)
    episodes: list[Episode] = []
    offset = 0
    with path.open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f):
            stripped = line.strip()
            if not stripped:
                offset += len(line.encode("utf-8"))
                continue
            try:
                record = json.loads(stripped)
            except json.JSONDecodeError as e:
                raise SchemaError(
                    f"{path}: parse error at byte {offset + e.pos} (line {line_no + 1}): {e.msg}"
                ) from e
            if line_no == 0:
                version = record.get("schema_version")
                if version != EPISODE_SCHEMA_VERSION:
                    raise VersionMismatchError(
                        f"{path}: schema_version {version!r}, expected {EPISODE_SCHEMA_VERSION}"
                    )
            else:
                where = f"{path}, episode record {line_no}"
                try:
                    support_ids = record["support_doc_ids"]
                    support_triples = record["support_triples"]
                    query_id = record["query_doc_id"]
                    targets = tuple(record["target_relation_ids"])
                    gold = record["gold_query_triples"]
                except KeyError as e:
                    raise SchemaError(f"{where}: missing field {e.args[0]!r}") from None
                supports = []
                for doc_id, triples_raw in zip(support_ids, support_triples):
                    doc = corpus.document(doc_id)
                    triples = tuple(_triple_from_json(t, where) for t in triples_raw)
                    supports.append(replace(doc, triples=triples))
                episodes.append(Episode(
                    support_docs=tuple(supports),
                    query_doc=strip_triples(corpus.document(query_id)),
                    target_relations=targets,
                    gold_query_triples=frozenset(
                        _triple_from_json(t, where) for t in gold
                    ),
                    episode_id=f"{path.stem}-{line_no - 1}",
                ))
            offset += len(line.encode("utf-8"))
    return episodes
