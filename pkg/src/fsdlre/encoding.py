"""Marker insertion, document encoding to (H, A) and entity/relation pooling.

Every entity mention is wrapped in a pair of "∗" marker tokens; the embedding
and attention row of the opening marker stand in for the mention downstream.
Encoding itself is delegated to a pluggable provider (see ``encoders``); this
module owns the marker bookkeeping, long-document windowing and the pooling
operations on top of the encoded matrices.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Protocol, Sequence, runtime_checkable

import torch

from .corpus import Document, RelationType
from .errors import InvariantError

logger = logging.getLogger(__name__)

MARKER = "∗"

ROW_SUM_TOL = 1e-5


@runtime_checkable
class Tokenizer(Protocol):
    def tokenize(self, word: str) -> list[str]:
        """Split one word into subword tokens (possibly a single token)."""
        ...


class WhitespaceTokenizer:
    """Trivial tokenizer: every word is its own token. Used by the toy encoder."""

    def tokenize(self, word: str) -> list[str]:
        return [word] if word else []


@runtime_checkable
class EncoderProvider(Protocol):
    """Contract for document/relation encoders (toy or pretrained)."""

    hidden_size: int
    max_window: int
    tokenizer: Tokenizer

    def encode(self, tokens: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (H, A): token embeddings (N_t, d) and row-stochastic
        token-to-token attention (N_t, N_t), heads of the last layer averaged."""
        ...

    def relation_encode(self, text: str) -> torch.Tensor:
        """Sequence-level embedding (size d) of a relation name/description."""
        ...


@dataclass(frozen=True)
class MarkedDocument:
    """Subword token sequence with mention markers and their positions."""
    doc_id: str
    tokens: tuple[str, ...]
    opening_marker: Mapping[tuple[int, int], int]  # (entity_index, mention_ordinal) -> token idx
    closing_marker: Mapping[tuple[int, int], int]
    n_entities: int

    def __post_init__(self):
        n = len(self.tokens)
        for index_map in (self.opening_marker, self.closing_marker):
            for key, idx in index_map.items():
                if not (0 <= idx < n):
                    raise InvariantError(f"doc {self.doc_id!r}: marker index {idx} for {key} out of range")
        if set(self.opening_marker) != set(self.closing_marker):
            raise InvariantError(f"doc {self.doc_id!r}: unbalanced mention markers")

    @property
    def token_count(self) -> int:
        return len(self.tokens)

    def entity_marker_indices(self, entity_index: int) -> list[int]:
        """Opening-marker token indices of the entity's mentions, in mention order."""
        ordinals = sorted(o for (e, o) in self.opening_marker if e == entity_index)
        if not ordinals:
            raise InvariantError(f"doc {self.doc_id!r}: entity {entity_index} has no markers")
        return [self.opening_marker[(entity_index, o)] for o in ordinals]


def insert_markers(doc: Document, tokenizer: Tokenizer) -> MarkedDocument:
    """Insert "∗" before the first and after the last subword of every mention.

    When span boundaries coincide, closing markers are emitted before opening
    markers so adjacent mentions stay non-overlapping; within one boundary,
    openings sort by (start, -end, entity_index) and closings by the reverse.
    """
    sentence_offsets = []
    words: list[str] = []
    for sent in doc.sentences:
        sentence_offsets.append(len(words))
        words.extend(sent)

    openings: dict[int, list[tuple]] = {}
    closings: dict[int, list[tuple]] = {}
    for ei, ent in enumerate(doc.entities):
        for oi, m in enumerate(ent.mentions):
            gstart = sentence_offsets[m.sentence_index] + m.start
            gend = sentence_offsets[m.sentence_index] + m.end
            key = (gstart, -gend, ei, oi)
            openings.setdefault(gstart, []).append(key)
            closings.setdefault(gend, []).append(key)

    word_tokens = [tokenizer.tokenize(w) for w in words]
    for ei, ent in enumerate(doc.entities):
        for oi, m in enumerate(ent.mentions):
            gstart = sentence_offsets[m.sentence_index] + m.start
            gend = sentence_offsets[m.sentence_index] + m.end
            if sum(len(word_tokens[w]) for w in range(gstart, gend)) == 0:
                raise InvariantError(
                    f"doc {doc.doc_id!r}: mention {oi} of entity {ei} "
                    f"({m.surface!r}) tokenizes to zero subwords"
                )

    tokens: list[str] = []
    opening_idx: dict[tuple[int, int], int] = {}
    closing_idx: dict[tuple[int, int], int] = {}
    for boundary in range(len(words) + 1):
        for key in sorted(closings.get(boundary, ()), reverse=True):
            _, _, ei, oi = key
            closing_idx[(ei, oi)] = len(tokens)
            tokens.append(MARKER)
        for key in sorted(openings.get(boundary, ())):
            _, _, ei, oi = key
            opening_idx[(ei, oi)] = len(tokens)
            tokens.append(MARKER)
        if boundary < len(words):
            tokens.extend(word_tokens[boundary])

    return MarkedDocument(
        doc_id=doc.doc_id,
        tokens=tuple(tokens),
        opening_marker=opening_idx,
        closing_marker=closing_idx,
        n_entities=doc.n_entities,
    )


@dataclass(frozen=True)
class EncodedDocument:
    """Contextual token embeddings H (N_t, d) and row-stochastic attention A."""
    H: torch.Tensor
    A: torch.Tensor
    marked: MarkedDocument

    def __post_init__(self):
        n = self.marked.token_count
        if self.H.shape[0] != n or self.A.shape != (n, n):
            raise InvariantError(
                f"doc {self.marked.doc_id!r}: encoder output shapes "
                f"{tuple(self.H.shape)}/{tuple(self.A.shape)} for {n} tokens"
            )
        with torch.no_grad():
            if not torch.isfinite(self.H).all():
                raise InvariantError(f"doc {self.marked.doc_id!r}: non-finite embeddings")
            if (self.A < -ROW_SUM_TOL).any():
                raise InvariantError(f"doc {self.marked.doc_id!r}: negative attention weight")
            row_sums = self.A.sum(dim=1)
            if (row_sums - 1.0).abs().max().item() > ROW_SUM_TOL:
                raise InvariantError(
                    f"doc {self.marked.doc_id!r}: attention rows do not sum to 1 "
                    f"(max deviation {(row_sums - 1.0).abs().max().item():.2e})"
                )

    @property
    def hidden_size(self) -> int:
        return self.H.shape[1]


def encode_document(marked: MarkedDocument, provider: EncoderProvider) -> EncodedDocument:
    if marked.token_count > provider.max_window:
        raise InvariantError(
            f"doc {marked.doc_id!r}: {marked.token_count} tokens exceed the "
            f"{provider.max_window}-token window; use encode_long_document"
        )
    H, A = provider.encode(marked.tokens)
    return EncodedDocument(H=H, A=A, marked=marked)


def encode_long_document(marked: MarkedDocument, provider: EncoderProvider) -> EncodedDocument:
    """Encode with overlapping windows (stride = half window): per-token
    embeddings averaged over covering windows, attention rows averaged over
    covering windows and renormalized to sum 1."""
    n = marked.token_count
    window = provider.max_window
    if n <= window:
        return encode_document(marked, provider)

    stride = max(1, window // 2)
    starts = list(range(0, n - window, stride))
    starts.append(n - window)

    pieces = [provider.encode(marked.tokens[s:s + window]) for s in starts]
    d = pieces[0][0].shape[1]
    dtype = pieces[0][0].dtype
    H_sum = torch.zeros(n, d, dtype=dtype)
    A_sum = torch.zeros(n, n, dtype=dtype)
    cover = torch.zeros(n, dtype=dtype)
    for start, (H_w, A_w) in zip(starts, pieces):
        H_sum[start:start + window] += H_w
        A_sum[start:start + window, start:start + window] += A_w
        cover[start:start + window] += 1.0

    H = H_sum / cover.unsqueeze(1)
    A = A_sum / cover.unsqueeze(1)
    A = A / A.sum(dim=1, keepdim=True)
    return EncodedDocument(H=H, A=A, marked=marked)


def entity_embedding(enc: EncodedDocument, entity_index: int) -> torch.Tensor:
    """Logsumexp pooling of the entity's opening-marker embeddings (stable)."""
    idx = enc.marked.entity_marker_indices(entity_index)
    return torch.logsumexp(enc.H[idx], dim=0)


def entity_attention(enc: EncodedDocument, entity_index: int) -> torch.Tensor:
    """Mean of the entity's opening-marker attention rows; a distribution."""
    idx = enc.marked.entity_marker_indices(entity_index)
    return enc.A[idx].mean(dim=0)


def encode_relation(
    rel: RelationType,
    provider: EncoderProvider,
    cache: Optional[dict[str, torch.Tensor]] = None,
) -> torch.Tensor:
    """Relation embedding from its "name: description" text. An optional cache
    (valid only while encoder weights are fixed) is keyed by the text."""
    text = rel.text
    if cache is not None and text in cache:
        return cache[text]
    vec = provider.relation_encode(text)
    if cache is not None:
        cache[text] = vec
    return vec
