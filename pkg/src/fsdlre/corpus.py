"""Data model for annotated document corpora and DocRED-style JSON ingestion.

Supported input schema (``docred_json``): a list of documents, each with
``title``, ``sents`` (list of token lists), ``vertexSet`` (list of entities,
each entity a list of mention records with ``name``, ``sent_id``,
``pos`` = [start, end) word indices and optional ``type``) and ``labels``
(list of ``{h, t, r}`` with vertex indices and a relation-id string).

The relation catalog is a separate JSON map: relation_id -> {name, description}.
All objects are immutable after load and safe to share across threads.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .errors import InvariantError, SchemaError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Mention:
    """One surface occurrence of an entity: a word span inside one sentence."""
    entity_index: int
    sentence_index: int
    start: int  # word index, inclusive
    end: int    # word index, exclusive
    surface: str
    mention_type: Optional[str] = None


@dataclass(frozen=True)
class Entity:
    mentions: tuple[Mention, ...]

    def __post_init__(self):
        if not self.mentions:
            raise InvariantError("entity has zero mentions")
        first = self.mentions[0].entity_index
        if any(m.entity_index != first for m in self.mentions):
            raise InvariantError("mentions of one entity disagree on entity_index")


@dataclass(frozen=True)
class RelationType:
    """A relation from the catalog, e.g. Wikidata P17 with name and description."""
    id: str
    name: str
    description: str = ""
    allow_empty_description: bool = False

    def __post_init__(self):
        if not self.id or not self.name:
            raise InvariantError(f"relation type {self.id!r} needs non-empty id and name")
        if not self.description and not self.allow_empty_description:
            raise InvariantError(
                f"relation {self.id!r} has empty description; "
                "set allow_empty_description=True to accept it"
            )

    @property
    def text(self) -> str:
        """Name and description joined for the relation encoder input."""
        return f"{self.name}: {self.description}" if self.description else self.name


@dataclass(frozen=True, order=True)
class Triple:
    head: int
    tail: int
    relation_id: str

    def __post_init__(self):
        if self.head == self.tail:
            raise InvariantError(f"triple ({self.head}, {self.relation_id}, {self.tail}) is reflexive")


@dataclass(frozen=True)
class Document:
    doc_id: str
    sentences: tuple[tuple[str, ...], ...]
    entities: tuple[Entity, ...]
    triples: tuple[Triple, ...]

    def __post_init__(self):
        n_ent = len(self.entities)
        for ei, ent in enumerate(self.entities):
            for m in ent.mentions:
                if m.entity_index != ei:
                    raise InvariantError(
                        f"doc {self.doc_id!r}: entity {ei} holds a mention tagged {m.entity_index}"
                    )
                if not (0 <= m.sentence_index < len(self.sentences)):
                    raise InvariantError(
                        f"doc {self.doc_id!r}: mention of entity {ei} points at sentence "
                        f"{m.sentence_index} of {len(self.sentences)}"
                    )
                sent_len = len(self.sentences[m.sentence_index])
                if not (0 <= m.start < m.end <= sent_len):
                    raise InvariantError(
                        f"doc {self.doc_id!r}: mention span [{m.start}, {m.end}) of entity {ei} "
                        f"outside sentence {m.sentence_index} (length {sent_len})"
                    )
        seen = set()
        for t in self.triples:
            if not (0 <= t.head < n_ent and 0 <= t.tail < n_ent):
                raise InvariantError(
                    f"doc {self.doc_id!r}: triple ({t.head}, {t.relation_id}, {t.tail}) "
                    f"references a missing entity (document has {n_ent})"
                )
            if t in seen:
                raise InvariantError(f"doc {self.doc_id!r}: duplicate triple {t}")
            seen.add(t)

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    def relations_present(self) -> set[str]:
        return {t.relation_id for t in self.triples}


@dataclass(frozen=True)
class Corpus:
    documents: tuple[Document, ...]
    relation_catalog: Mapping[str, RelationType]
    _by_id: Mapping[str, Document] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for doc in self.documents:
            for t in doc.triples:
                if t.relation_id not in self.relation_catalog:
                    raise InvariantError(
                        f"doc {doc.doc_id!r}: relation {t.relation_id!r} not in catalog"
                    )
        by_id = {}
        for doc in self.documents:
            if doc.doc_id in by_id:
                raise InvariantError(f"duplicate doc_id {doc.doc_id!r}")
            by_id[doc.doc_id] = doc
        object.__setattr__(self, "_by_id", by_id)

    def __len__(self) -> int:
        return len(self.documents)

    def document(self, doc_id: str) -> Document:
        try:
            return self._by_id[doc_id]
        except KeyError:
            raise KeyError(f"unknown doc_id {doc_id!r}") from None


@dataclass(frozen=True)
class RelationSplit:
    """Disjoint relation-id sets for meta-train / dev / test."""
    train_ids: frozenset[str]
    dev_ids: frozenset[str]
    test_ids: frozenset[str]

    def __post_init__(self):
        for a, b, name in (
            (self.train_ids, self.dev_ids, "train/dev"),
            (self.train_ids, self.test_ids, "train/test"),
            (self.dev_ids, self.test_ids, "dev/test"),
        ):
            overlap = a & b
            if overlap:
                raise InvariantError(f"relation split {name} overlap: {sorted(overlap)}")

    def ids_for(self, split_name: str) -> frozenset[str]:
        try:
            return {"train": self.train_ids, "dev": self.dev_ids, "test": self.test_ids}[split_name]
        except KeyError:
            raise KeyError(f"unknown split name {split_name!r}") from None


def relation_split_sizes(split: RelationSplit) -> tuple[int, int, int]:
    """(|train|, |dev|, |test|) relation-type counts."""
    return len(split.train_ids), len(split.dev_ids), len(split.test_ids)


# -- ingestion --

def _require(record: Mapping, key: str, where: str):
    if key not in record:
        raise SchemaError(f"{where}: missing required field {key!r}")
    return record[key]


def _parse_document(record: Mapping, index: int) -> Document:
    where = f"document #{index}"
    title = record.get("title", f"doc-{index}")
    sents_raw = _require(record, "sents", where)
    if not isinstance(sents_raw, list):
        raise SchemaError(f"{where}: 'sents' must be a list of token lists")
    sentences = tuple(tuple(str(w) for w in sent) for sent in sents_raw)

    vertex_set = _require(record, "vertexSet", where)
    entities = []
    for ei, mention_records in enumerate(vertex_set):
        if not mention_records:
            raise InvariantError(f"{where} ({title!r}): entity {ei} has zero mentions")
        mentions = []
        for mi, m in enumerate(mention_records):
            mwhere = f"{where}, entity {ei}, mention {mi}"
            pos = _require(m, "pos", mwhere)
            if not (isinstance(pos, (list, tuple)) and len(pos) == 2):
                raise SchemaError(f"{mwhere}: 'pos' must be [start, end)")
            mentions.append(Mention(
                entity_index=ei,
                sentence_index=int(_require(m, "sent_id", mwhere)),
                start=int(pos[0]),
                end=int(pos[1]),
                surface=str(_require(m, "name", mwhere)),
                mention_type=m.get("type"),
            ))
        entities.append(Entity(mentions=tuple(mentions)))

    labels = record.get("labels", [])
    triples, seen = [], set()
    duplicates = 0
    for li, lab in enumerate(labels):
        lwhere = f"{where}, label {li}"
        t = Triple(
            head=int(_require(lab, "h", lwhere)),
            tail=int(_require(lab, "t", lwhere)),
            relation_id=str(_require(lab, "r", lwhere)),
        )
        if t in seen:
            duplicates += 1  # DocRED carries evidence-differing duplicates
            continue
        seen.add(t)
        triples.append(t)
    if duplicates:
        logger.info("document %r: dropped %d duplicate triples", title, duplicates)

    return Document(
        doc_id=str(title),
        sentences=sentences,
        entities=tuple(entities),
        triples=tuple(triples),
    )


def load_relation_catalog(path: str | Path) -> dict[str, RelationType]:
    """Load a relation_id -> {name, description} JSON map."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: malformed JSON catalog: {e}") from e
    catalog = {}
    for rid, entry in raw.items():
        if isinstance(entry, str):  # rel_info.json style: id -> name only
            catalog[rid] = RelationType(id=rid, name=entry, allow_empty_description=True)
        else:
            catalog[rid] = RelationType(
                id=rid,
                name=_require(entry, "name", f"catalog entry {rid!r}"),
                description=entry.get("description", ""),
                allow_empty_description="description" not in entry or not entry["description"],
            )
    return catalog


def _synthesize_catalog(documents: Iterable[Document]) -> dict[str, RelationType]:
    ids = sorted({t.relation_id for d in documents for t in d.triples})
    return {rid: RelationType(id=rid, name=rid, allow_empty_description=True) for rid in ids}


def load_corpus(
    path: str | Path,
    format: str = "docred_json",
    catalog: Mapping[str, RelationType] | str | Path | None = None,
) -> Corpus:
    """Load a corpus file; raises SchemaError / InvariantError on bad input.

    ``catalog`` may be a pre-loaded map or a catalog file path; when omitted,
    a minimal catalog (name = id, empty description) is synthesized from the
    relation ids present in the documents.
    """
    if format != "docred_json":
        raise SchemaError(f"unsupported corpus format {format!r}")
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise SchemaError(f"corpus file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: malformed JSON: {e}") from e
    if not isinstance(raw, list):
        raise SchemaError(f"{path}: top level must be a list of documents")

    documents = tuple(_parse_document(rec, i) for i, rec in enumerate(raw))
    if isinstance(catalog, (str, Path)):
        catalog = load_relation_catalog(catalog)
    if catalog is None:
        catalog = _synthesize_catalog(documents)
    return Corpus(documents=documents, relation_catalog=dict(catalog))


def dump_corpus(corpus: Corpus, path: str | Path) -> None:
    """Serialize back to the docred_json schema (round-trips through load_corpus)."""
    out = []
    for doc in corpus.documents:
        out.append({
            "title": doc.doc_id,
            "sents": [list(s) for s in doc.sentences],
            "vertexSet": [
                [
                    {
                        "name": m.surface,
                        "sent_id": m.sentence_index,
                        "pos": [m.start, m.end],
                        **({"type": m.mention_type} if m.mention_type is not None else {}),
                    }
                    for m in ent.mentions
                ]
                for ent in doc.entities
            ],
            "labels": [{"h": t.head, "t": t.tail, "r": t.relation_id} for t in doc.triples],
        })
    Path(path).write_text(json.dumps(out, ensure_ascii=False), encoding="utf-8")


def load_relation_split(path: str | Path) -> RelationSplit:
    """Load {"train": [...], "dev": [...], "test": [...]} relation-id lists."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: malformed JSON split file: {e}") from e
    for key in ("train", "dev", "test"):
        if key not in raw:
            raise SchemaError(f"{path}: missing split list {key!r}")
    return RelationSplit(
        train_ids=frozenset(raw["train"]),
        dev_ids=frozenset(raw["dev"]),
        test_ids=frozenset(raw["test"]),
    )
