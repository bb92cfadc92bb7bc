"""Relation prototypes, support-instance collection and NOTA generation."""

import numpy as np
import pytest
import torch
from synthdata import make_corpus, split_all_train

from fsdlre.corpus import Document, Entity, Mention, Triple
from fsdlre.episodes import EpisodeConfig, enumerate_nota_pairs, sample_episodes
from fsdlre.errors import InvariantError
from fsdlre.prototypes import (
    BaseNotaBank,
    build_prototype_set,
    collect_support_instances,
    nota_prototype,
    prototypes_from_instances,
    relation_prototype,
    select_nota_instance,
)
from fsdlre.representation import InstanceRep, ProjectionParams
from fsdlre.encoding import encode_long_document, encode_relation, insert_markers


def _rep(vec, relation_id=None, doc_id="d", head=0, tail=1):
    return InstanceRep(
        s=torch.tensor(vec, dtype=torch.float64),
        doc_id=doc_id, head=head, tail=tail, relation_id=relation_id,
    )


def test_bank_is_seeded_and_validated():
    a = BaseNotaBank(4, 6, seed=9)
    b = BaseNotaBank(4, 6, seed=9)
    c = BaseNotaBank(4, 6, seed=10)
    assert torch.equal(a.vectors, b.vectors)
    assert not torch.equal(a.vectors, c.vectors)
    assert a.count == 4
    with pytest.raises(InvariantError):
        BaseNotaBank(0, 6)


def test_relation_prototype_is_mean():
    reps = [_rep([1.0, 2.0], "R0"), _rep([3.0, 4.0], "R0"), _rep([5.0, 0.0], "R0")]
    assert torch.allclose(
        relation_prototype(reps), torch.tensor([3.0, 2.0], dtype=torch.float64)
    )
    with pytest.raises(InvariantError):
        relation_prototype([])


def _episode_setup(small_provider, n_docs=1, seed=0):
    corpus = make_corpus(n_docs=6, n_relations=3, seed=7, sentence_repeats=1)
    split = split_all_train(corpus)
    episode = sample_episodes(corpus, split, EpisodeConfig(n_docs=n_docs, seed=seed), 1)[0]
    encodings = {
        doc.doc_id: encode_long_document(insert_markers(doc, small_provider.tokenizer), small_provider)
        for doc in (*episode.support_docs, episode.query_doc)
    }
    rel_vecs = {
        rid: encode_relation(corpus.relation_catalog[rid], small_provider)
        for rid in episode.target_relations
    }
    params = ProjectionParams(small_provider.hidden_size, seed=3)
    return corpus, episode, encodings, rel_vecs, params


def test_collect_support_instances_counts(small_provider):
    _, episode, encodings, rel_vecs, params = _episode_setup(small_provider)
    by_relation, nota_reps = collect_support_instances(
        episode, encodings, rel_vecs, params, k=15.0
    )
    for rid in episode.target_relations:
        assert len(by_relation[rid]) == episode.support_instance_count(rid)
        assert all(r.relation_id == rid for r in by_relation[rid])
    expected_nota = sum(
        len(enumerate_nota_pairs(doc, episode.target_relations))
        for doc in episode.support_docs
    )
    assert len(nota_reps) == expected_nota
    assert all(r.relation_id is None for r in nota_reps)


def test_multi_relation_pair_yields_no_nota_entry(small_provider):
    # one pair holding two relations -> two relation instances, zero NOTA
    doc = Document(
        doc_id="multi",
        sentences=(("arco", "guides", "belda", "."), ("belda", "waits", ".")),
        entities=(
            Entity((Mention(0, 0, 0, 1, "arco"),)),
            Entity((Mention(1, 0, 2, 3, "belda"), Mention(1, 1, 0, 1, "belda"))),
        ),
        triples=(Triple(0, 1, "R0"), Triple(0, 1, "R1")),
    )
    nota = enumerate_nota_pairs(doc, {"R0", "R1"})
    assert nota == {(1, 0)}


def test_ibpc_toggle_changes_relation_instances(small_provider):
    _, episode, encodings, rel_vecs, params = _episode_setup(small_provider)
    with_attention, _ = collect_support_instances(
        episode, encodings, rel_vecs, params, k=15.0, use_instance_attention=True
    )
    without, nota_reps = collect_support_instances(
        episode, encodings, rel_vecs, params, k=15.0, use_instance_attention=False
    )
    rid = episode.target_relations[0]
    assert not torch.equal(with_attention[rid][0].s, without[rid][0].s)
    assert all(r.relation_id is None for r in nota_reps)
    # the pair-only path coincides with the NOTA pipeline for the same pair
    from fsdlre.representation import instance_representation

    inst = without[rid][0]
    direct = instance_representation(
        encodings[inst.doc_id], inst.head, inst.tail, None, params, 15.0
    )
    assert torch.equal(inst.s, direct.s)


def test_select_nota_instance_brute_force_and_ties():
    protos = {"R0": torch.tensor([1.0, 0.0], dtype=torch.float64)}
    base = torch.tensor([0.0, 1.0], dtype=torch.float64)
    reps = [
        _rep([0.5, 0.2]),   # score 0.2 - 0.5 = -0.3
        _rep([0.1, 0.9]),   # score 0.9 - 0.1 = 0.8  <- winner
        _rep([0.0, 0.8]),   # score 0.8
    ]
    assert select_nota_instance(base, reps, protos) is reps[1]
    # exact tie: first of the tied indices wins
    tied = [_rep([0.1, 0.9]), _rep([0.1, 0.9])]
    assert select_nota_instance(base, tied, protos) is tied[0]
    with pytest.raises(InvariantError):
        select_nota_instance(base, [], protos)
    with pytest.raises(InvariantError):
        select_nota_instance(base, reps, {})


def test_select_nota_instance_matches_numpy_oracle():
    rng = np.random.default_rng(11)
    for _ in range(30):
        dim = 6
        protos = {
            f"R{i}": torch.tensor(rng.standard_normal(dim), dtype=torch.float64)
            for i in range(int(rng.integers(1, 4)))
        }
        reps = [_rep(rng.standard_normal(dim)) for _ in range(int(rng.integers(1, 8)))]
        base = torch.tensor(rng.standard_normal(dim), dtype=torch.float64)
        P = np.stack([p.numpy() for p in protos.values()])
        scores = [
            float(r.s.numpy() @ base.numpy() - (P @ r.s.numpy()).max()) for r in reps
        ]
        best = max(range(len(reps)), key=lambda i: (scores[i], -i))
        assert select_nota_instance(base, reps, protos) is reps[best]


def test_nota_prototype_blend():
    base = torch.tensor([1.0, -1.0], dtype=torch.float64)
    inst = _rep([0.5, 0.5])
    blended = nota_prototype(base, inst, 0.9)
    assert torch.allclose(
        blended, torch.tensor([0.95, -0.85], dtype=torch.float64), atol=1e-15
    )
    assert torch.equal(nota_prototype(base, None, 0.3), base)
    assert torch.equal(nota_prototype(base, inst, 1.0), base)
    with pytest.raises(InvariantError):
        nota_prototype(base, inst, 1.5)


def test_prototypes_disable_tnpg_uses_bank_verbatim(small_provider):
    _, episode, encodings, rel_vecs, params = _episode_setup(small_provider)
    bank = BaseNotaBank(3, 2 * small_provider.hidden_size, seed=4)
    by_relation, nota_reps = collect_support_instances(
        episode, encodings, rel_vecs, params, k=15.0
    )
    protos = prototypes_from_instances(
        episode, by_relation, nota_reps, rel_vecs, bank, alpha=0.9, disable_tnpg=True
    )
    assert len(protos.nota_prototypes) == 3
    for i, p in enumerate(protos.nota_prototypes):
        assert torch.equal(p, bank.vectors[i])

    generated = prototypes_from_instances(
        episode, by_relation, nota_reps, rel_vecs, bank, alpha=0.9
    )
    assert nota_reps  # episode has NOTA pairs, so generation must change something
    assert any(
        not torch.equal(p, bank.vectors[i])
        for i, p in enumerate(generated.nota_prototypes)
    )


def test_prototypes_empty_nota_pool_falls_back_to_bank(small_provider):
    _, episode, encodings, rel_vecs, params = _episode_setup(small_provider)
    bank = BaseNotaBank(2, 2 * small_provider.hidden_size, seed=4)
    by_relation, _ = collect_support_instances(episode, encodings, rel_vecs, params, k=15.0)
    protos = prototypes_from_instances(
        episode, by_relation, [], rel_vecs, bank, alpha=0.9
    )
    for i, p in enumerate(protos.nota_prototypes):
        assert torch.equal(p, bank.vectors[i])


def test_build_prototype_set_end_to_end(small_provider):
    _, episode, encodings, rel_vecs, params = _episode_setup(small_provider)
    bank = BaseNotaBank(2, 2 * small_provider.hidden_size, seed=5)
    protos = build_prototype_set(
        episode, encodings, rel_vecs, params, bank, k=15.0, alpha=0.9
    )
    assert set(protos.relation_prototypes) == set(episode.target_relations)
    assert set(protos.relation_embeddings) == set(episode.target_relations)
    for rid in episode.target_relations:
        assert protos.relation_prototypes[rid].shape == (2 * small_provider.hidden_size,)
    assert len(protos.nota_prototypes) == 2
