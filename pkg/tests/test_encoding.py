"""Marker insertion, encoder invariants, long-document windowing and pooling."""

import math

import pytest
import torch
from synthdata import SURFACES, make_catalog, make_corpus

from fsdlre.corpus import Document, Entity, Mention
from fsdlre.encoders import CLS_TOKEN, ToyEncoderProvider, ToyTransformer, _token_id, make_provider
from fsdlre.encoding import (
    MARKER,
    EncodedDocument,
    MarkedDocument,
    WhitespaceTokenizer,
    encode_document,
    encode_long_document,
    encode_relation,
    entity_attention,
    entity_embedding,
    insert_markers,
)
from fsdlre.errors import ConfigError, InvariantError


def _doc(sentences, mentions_by_entity, doc_id="d"):
    entities = tuple(
        Entity(tuple(Mention(ei, s, a, b, "m") for (s, a, b) in spans))
        for ei, spans in enumerate(mentions_by_entity)
    )
    return Document(doc_id=doc_id, sentences=sentences, entities=entities, triples=())


def test_whitespace_tokenizer():
    tok = WhitespaceTokenizer()
    assert tok.tokenize("word") == ["word"]
    assert tok.tokenize("") == []


def test_insert_markers_basic_positions():
    doc = _doc((("ada", "met", "bob"),), [[(0, 0, 1)], [(0, 2, 3)]])
    marked = insert_markers(doc, WhitespaceTokenizer())
    assert marked.tokens == (MARKER, "ada", MARKER, "met", MARKER, "bob", MARKER)
    assert marked.opening_marker == {(0, 0): 0, (1, 0): 4}
    assert marked.closing_marker == {(0, 0): 2, (1, 0): 6}
    assert marked.entity_marker_indices(0) == [0]
    assert marked.entity_marker_indices(1) == [4]


def test_insert_markers_adjacent_mentions_do_not_interleave():
    # "ada bob": spans [0,1) and [1,2) share boundary 1; the closing marker
    # must precede the opening one there
    doc = _doc((("ada", "bob"),), [[(0, 0, 1)], [(0, 1, 2)]])
    marked = insert_markers(doc, WhitespaceTokenizer())
    assert marked.tokens == (MARKER, "ada", MARKER, MARKER, "bob", MARKER)
    assert marked.closing_marker[(0, 0)] == 2
    assert marked.opening_marker[(1, 0)] == 3


def test_insert_markers_nested_spans():
    # entity 1 span [0,3) encloses entity 0 span [1,2); wider span opens first
    doc = _doc((("new", "york", "city"),), [[(0, 1, 2)], [(0, 0, 3)]])
    marked = insert_markers(doc, WhitespaceTokenizer())
    assert marked.tokens == (
        MARKER, "new", MARKER, "york", MARKER, "city", MARKER
    )
    assert marked.opening_marker[(1, 0)] == 0
    assert marked.opening_marker[(0, 0)] == 2
    assert marked.closing_marker[(0, 0)] == 4
    assert marked.closing_marker[(1, 0)] == 6


def test_insert_markers_multi_sentence_offsets():
    doc = _doc(
        (("ada", "."), ("ada", "again")),
        [[(0, 0, 1), (1, 0, 1)]],
    )
    marked = insert_markers(doc, WhitespaceTokenizer())
    assert marked.entity_marker_indices(0) == [0, 4]
    assert marked.tokens[4] == MARKER
    assert marked.tokens[5] == "ada"


class _EmptyTokenizer:
    def tokenize(self, word):
        return []


def test_insert_markers_rejects_zero_subword_mentions():
    doc = _doc((("ada",),), [[(0, 0, 1)]])
    with pytest.raises(InvariantError, match="zero subwords"):
        insert_markers(doc, _EmptyTokenizer())


def test_marked_document_invariants():
    with pytest.raises(InvariantError, match="out of range"):
        MarkedDocument("d", ("a",), {(0, 0): 5}, {(0, 0): 0}, 1)
    with pytest.raises(InvariantError, match="unbalanced"):
        MarkedDocument("d", ("a", "b"), {(0, 0): 0}, {(0, 1): 1}, 1)


def _uniform_encoded(n, d=4):
    marked = MarkedDocument("d", tuple(f"t{i}" for i in range(n)), {}, {}, 0)
    H = torch.randn(n, d, dtype=torch.float64)
    A = torch.full((n, n), 1.0 / n, dtype=torch.float64)
    return EncodedDocument(H=H, A=A, marked=marked)


def test_encoded_document_invariants():
    enc = _uniform_encoded(3)
    n = 3
    with pytest.raises(InvariantError, match="shapes"):
        EncodedDocument(H=enc.H[:2], A=enc.A, marked=enc.marked)
    bad_H = enc.H.clone()
    bad_H[0, 0] = float("nan")
    with pytest.raises(InvariantError, match="non-finite"):
        EncodedDocument(H=bad_H, A=enc.A, marked=enc.marked)
    neg_A = enc.A.clone()
    neg_A[0, 0] = -0.5
    neg_A[0, 1] = 0.5 + 2.0 / n
    with pytest.raises(InvariantError, match="negative"):
        EncodedDocument(H=enc.H, A=neg_A, marked=enc.marked)
    bad_A = enc.A * 2.0
    with pytest.raises(InvariantError, match="sum to 1"):
        EncodedDocument(H=enc.H, A=bad_A, marked=enc.marked)


def test_encode_document_respects_window(small_provider):
    doc = _doc((tuple(f"w{i}" for i in range(200)),), [[(0, 0, 1)]])
    marked = insert_markers(doc, small_provider.tokenizer)
    with pytest.raises(InvariantError, match="exceed"):
        encode_document(marked, small_provider)
    enc = encode_long_document(marked, small_provider)
    assert enc.H.shape == (marked.token_count, small_provider.hidden_size)


class _CountingProvider:
    """Deterministic fake encoder: embeddings encode absolute token ids so the
    windowing math can be checked by hand."""

    hidden_size = 2
    max_window = 4
    tokenizer = WhitespaceTokenizer()

    def __init__(self):
        self.calls = []

    def encode(self, tokens):
        self.calls.append(tuple(tokens))
        n = len(tokens)
        values = torch.tensor(
            [float(t[1:]) for t in tokens], dtype=torch.float64
        )
        H = torch.stack([values, torch.ones(n, dtype=torch.float64)], dim=1)
        A = torch.full((n, n), 1.0 / n, dtype=torch.float64)
        return H, A

    def relation_encode(self, text):
        raise NotImplementedError


def test_encode_long_document_window_averaging_oracle():
    # 6 tokens, window 4, stride 2 -> windows [0:4] and [2:6]
    marked = MarkedDocument("d", tuple(f"t{i}" for i in range(6)), {}, {}, 0)
    provider = _CountingProvider()
    enc = encode_long_document(marked, provider)
    assert provider.calls == [tuple(f"t{i}" for i in range(4)),
                              tuple(f"t{i}" for i in range(2, 6))]
    # token embeddings are position-invariant here, so averaging keeps them
    assert torch.allclose(enc.H[:, 0], torch.arange(6, dtype=torch.float64))

    # attention oracle: window rows are uniform over their own 4 tokens;
    # tokens 2,3 appear in both windows
    A = torch.zeros(6, 6, dtype=torch.float64)
    cover = torch.zeros(6, dtype=torch.float64)
    for start in (0, 2):
        A[start:start + 4, start:start + 4] += 0.25
        cover[start:start + 4] += 1.0
    A = A / cover.unsqueeze(1)
    A = A / A.sum(dim=1, keepdim=True)
    assert torch.allclose(enc.A, A, atol=1e-15)
    assert torch.allclose(enc.A.sum(dim=1), torch.ones(6, dtype=torch.float64))


def test_encode_long_document_short_input_single_window(small_provider):
    doc = _doc((("ada", "met", "bob"),), [[(0, 0, 1)], [(0, 2, 3)]])
    marked = insert_markers(doc, small_provider.tokenizer)
    direct = encode_document(marked, small_provider)
    windowed = encode_long_document(marked, small_provider)
    assert torch.equal(direct.H, windowed.H)
    assert torch.equal(direct.A, windowed.A)


def test_entity_embedding_logsumexp_oracle(small_provider):
    doc = _doc(
        (("ada", "."), ("ada", "again")),
        [[(0, 0, 1), (1, 0, 1)]],
    )
    enc = encode_document(insert_markers(doc, small_provider.tokenizer), small_provider)
    idx = enc.marked.entity_marker_indices(0)
    manual = torch.log(torch.exp(enc.H[idx[0]]) + torch.exp(enc.H[idx[1]]))
    assert torch.allclose(entity_embedding(enc, 0), manual, atol=1e-12)

    att = entity_attention(enc, 0)
    assert torch.allclose(att, (enc.A[idx[0]] + enc.A[idx[1]]) / 2.0, atol=1e-15)
    assert torch.allclose(att.sum(), torch.tensor(1.0, dtype=torch.float64), atol=1e-9)


def test_toy_transformer_seeded_and_stochastic():
    a = ToyTransformer(hidden_size=16, n_layers=1, n_heads=2, seed=3)
    b = ToyTransformer(hidden_size=16, n_layers=1, n_heads=2, seed=3)
    c = ToyTransformer(hidden_size=16, n_layers=1, n_heads=2, seed=4)
    for (n, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb), n
    assert any(
        not torch.equal(pa, pc)
        for (_, pa), (_, pc) in zip(a.named_parameters(), c.named_parameters())
    )
    H, A = a.encode_tokens(["one", "two", "three"])
    assert H.shape == (3, 16) and A.shape == (3, 3)
    assert torch.allclose(A.sum(dim=1), torch.ones(3, dtype=torch.float64), atol=1e-9)
    with pytest.raises(ConfigError, match="not divisible"):
        ToyTransformer(hidden_size=16, n_heads=3)
    with pytest.raises(ConfigError, match="exceeds max_len"):
        ToyTransformer(hidden_size=8, n_heads=2, max_len=2).encode_tokens(["a", "b", "c"])


def test_token_id_reserves_special_buckets():
    assert _token_id(MARKER, 509) == 0
    assert _token_id(CLS_TOKEN, 509) == 1
    assert _token_id("word", 509) >= 2


def test_synthetic_vocabulary_is_collision_free():
    corpus = make_corpus(n_docs=4, n_relations=10, seed=0, n_entities=4,
                         n_triples=10, sentence_repeats=1)
    words = {w for d in corpus.documents for s in d.sentences for w in s}
    words |= set(SURFACES) | {MARKER, CLS_TOKEN}
    for rel in make_catalog(10).values():
        words |= set(rel.text.split())
    ids = {}
    for w in sorted(words):
        ids.setdefault(_token_id(w, 509), []).append(w)
    clashes = [group for group in ids.values() if len(group) > 1]
    assert not clashes, clashes


def test_relation_encoding_and_cache(small_provider):
    rel = make_catalog(2)["R1"]
    cache = {}
    v1 = encode_relation(rel, small_provider, cache)
    v2 = encode_relation(rel, small_provider, cache)
    assert v1 is v2
    assert rel.text in cache
    fresh = encode_relation(rel, small_provider, None)
    assert torch.allclose(v1, fresh, atol=1e-12)
    # [CLS] prefix: the vector is the encoder's first output position
    tokens = [CLS_TOKEN] + rel.text.split()
    H, _ = small_provider.rel_encoder.encode_tokens(tokens)
    assert torch.equal(fresh, H[0])


def test_doc_and_relation_encoders_are_independent(small_provider):
    H_doc, _ = small_provider.encode(["one", "two"])
    H_rel, _ = small_provider.rel_encoder.encode_tokens(["one", "two"])
    assert not torch.allclose(H_doc, H_rel)


def test_make_provider_specs():
    provider = make_provider("toy", seed=2, hidden_size=16, n_layers=1, n_heads=2)
    assert isinstance(provider, ToyEncoderProvider)
    assert provider.hidden_size == 16
    with pytest.raises(ConfigError, match="unknown encoder spec"):
        make_provider("bert-base")
    with pytest.raises(ConfigError, match="needs a model name"):
        make_provider("pretrained:")


def test_freeze_relation_encoder_flag():
    provider = ToyEncoderProvider(
        hidden_size=16, n_layers=1, n_heads=2, seed=0, freeze_relation_encoder=True
    )
    assert all(not p.requires_grad for p in provider.rel_encoder.parameters())
    assert all(p.requires_grad for p in provider.doc_encoder.parameters())
