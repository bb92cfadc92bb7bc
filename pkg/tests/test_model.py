"""Episode-model forward-pass tests: wiring, ablations, grads, determinism."""
import pytest
import torch

from fsdlre.encoders import ToyEncoderProvider
from fsdlre.episodes import EpisodeConfig, sample_episodes
from fsdlre.errors import ConfigError, InvariantError
from fsdlre.model import EpisodeModel, ModelConfig, ordered_entity_pairs


@pytest.fixture
def episode(tiny_corpus, train_split):
    eps = sample_episodes(tiny_corpus, train_split, EpisodeConfig(n_docs=1, seed=3), 1)
    return eps[0]


@pytest.fixture
def model(tiny_corpus, small_provider):
    return EpisodeModel(
        small_provider,
        tiny_corpus.relation_catalog,
        ModelConfig(nota_count=4),
        seed=9,
    )


@pytest.fixture
def result(model, episode):
    return model(episode)


class TestModelConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"top_k_percent": -1.0},
            {"top_k_percent": 100.5},
            {"nota_count": 0},
            {"nota_alpha": -0.1},
            {"nota_alpha": 1.1},
            {"tau": 0.0},
            {"lam": -0.5},
            {"contrastive_variant": "nce"},
        ],
    )
    def test_bad_fields_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            ModelConfig(**kwargs)

    def test_contrastive_view(self):
        cfg = ModelConfig(tau=0.8, contrastive_variant="scl")
        sub = cfg.contrastive()
        assert sub.tau == 0.8 and sub.variant == "scl"


def test_ordered_entity_pairs():
    assert ordered_entity_pairs(3) == [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]
    assert ordered_entity_pairs(1) == []
    assert len(ordered_entity_pairs(7)) == 7 * 6


class TestForward:
    def test_query_reps_cover_all_ordered_pairs(self, result, episode):
        n = len(episode.query_doc.entities)
        assert len(result.query_reps) == n * (n - 1)
        assert [(r.head, r.tail) for r in result.query_reps] == ordered_entity_pairs(n)

    def test_prototypes_match_targets(self, result, episode):
        assert set(result.prototypes.relation_prototypes) == set(episode.target_relations)
        assert len(result.prototypes.nota_prototypes) == 4

    def test_loss_counts_are_consistent(self, result):
        counts = result.loss.counts
        assert counts.query_pairs == len(result.query_reps)
        assert counts.support_instances == sum(
            len(v) for v in result.support_by_relation.values()
        )
        assert counts.skipped_singletons >= 0

    def test_gold_pairs_lie_in_query_universe(self, result, episode):
        n = len(episode.query_doc.entities)
        universe = set(ordered_entity_pairs(n))
        for pair, gold in result.gold_by_pair.items():
            assert pair in universe
            assert gold <= set(episode.target_relations)

    def test_total_is_bce_plus_weighted_contrastive(self, result, model):
        want = result.loss.bce + model.config.lam * result.loss.rcl
        assert torch.equal(result.loss.total, want)
        assert torch.isfinite(result.loss.total)

    def test_missing_catalog_entry_rejected(self, tiny_corpus, small_provider, episode):
        rid = episode.target_relations[0]
        partial = {
            k: v for k, v in tiny_corpus.relation_catalog.items() if k != rid
        }
        crippled = EpisodeModel(small_provider, partial, ModelConfig(), seed=9)
        with pytest.raises(InvariantError):
            crippled.relation_vectors(episode)

    def test_relation_cache_is_reused(self, model, episode):
        cache = {}
        first = model.relation_vectors(episode, cache)
        assert set(cache) == {model.catalog[r].text for r in episode.target_relations}
        second = model.relation_vectors(episode, cache)
        for rid in episode.target_relations:
            assert second[rid] is first[rid]


class TestAblations:
    def test_disable_tnpg_returns_bank_verbatim(self, tiny_corpus, small_provider, episode):
        m = EpisodeModel(
            small_provider,
            tiny_corpus.relation_catalog,
            ModelConfig(nota_count=4, disable_tnpg=True),
            seed=9,
        )
        res = m(episode)
        for i, proto in enumerate(res.prototypes.nota_prototypes):
            assert torch.equal(proto, m.bank.vectors[i])

    def test_disable_ibpc_changes_relation_instances(self, tiny_corpus, episode, result):
        provider = ToyEncoderProvider(
            hidden_size=16, n_layers=1, n_heads=2, max_window=96, seed=5
        )
        m = EpisodeModel(
            provider,
            tiny_corpus.relation_catalog,
            ModelConfig(nota_count=4, disable_ibpc=True),
            seed=9,
        )
        res = m(episode)
        rid = episode.target_relations[0]
        assert not torch.equal(
            res.support_by_relation[rid][0].s, result.support_by_relation[rid][0].s
        )
        # NOTA instances never used relation guidance, so they are unaffected
        assert torch.equal(res.support_nota[0].s, result.support_nota[0].s)

    def test_variant_off_drops_contrastive_term(self, tiny_corpus, small_provider, episode):
        m = EpisodeModel(
            small_provider,
            tiny_corpus.relation_catalog,
            ModelConfig(nota_count=4, contrastive_variant="off"),
            seed=9,
        )
        res = m(episode)
        assert res.loss.rcl.item() == 0.0
        assert res.loss.counts.skipped_singletons == 0
        assert torch.equal(res.loss.total, res.loss.bce)

    def test_scl_variant_runs(self, tiny_corpus, small_provider, episode):
        m = EpisodeModel(
            small_provider,
            tiny_corpus.relation_catalog,
            ModelConfig(nota_count=4, contrastive_variant="scl"),
            seed=9,
        )
        assert torch.isfinite(m(episode).loss.total)


class TestGradientsAndDeterminism:
    def test_gradients_reach_all_parameter_groups(self, tiny_corpus, episode):
        provider = ToyEncoderProvider(
            hidden_size=16, n_layers=1, n_heads=2, max_window=96, seed=5
        )
        m = EpisodeModel(provider, tiny_corpus.relation_catalog, ModelConfig(nota_count=4), seed=9)
        m(episode).loss.total.backward()
        assert m.projection.relation_bilinear.grad is not None
        assert m.projection.relation_bilinear.grad.abs().sum() > 0
        assert m.bank.vectors.grad is not None
        assert m.bank.vectors.grad.abs().sum() > 0
        encoder_grads = [
            p.grad for p in provider.parameters() if p.grad is not None
        ]
        assert any(g.abs().sum() > 0 for g in encoder_grads)

    def test_same_seed_forward_is_bitwise_reproducible(self, tiny_corpus, episode):
        losses = []
        for _ in range(2):
            provider = ToyEncoderProvider(
                hidden_size=16, n_layers=1, n_heads=2, max_window=96, seed=5
            )
            m = EpisodeModel(
                provider, tiny_corpus.relation_catalog, ModelConfig(nota_count=4), seed=9
            )
            losses.append(m(episode).loss.total)
        assert torch.equal(losses[0], losses[1])
