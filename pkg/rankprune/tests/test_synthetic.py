import math

import numpy as np
import pytest

from rankprune.errors import ConfigurationError
from rankprune.ingest import apply_system, fit_system, fuse
from rankprune.metrics import full_mrr, loss_vector, retriever_mrr
from rankprune.synthetic import SynthConfig, expected_uninformative_mrr, generate, load_config, true_risk


def test_generate_is_deterministic():
    config = SynthConfig(n_queries=30, pool_size=20, reranker_mode='noisy', seed=5)
    a, b = generate(config), generate(config)
    assert [r.candidates for r in a] == [r.candidates for r in b]
    assert [r.gold_ids for r in a] == [r.gold_ids for r in b]


def test_queries_do_not_depend_on_dataset_size():
    small = generate(SynthConfig(n_queries=10, pool_size=20, seed=6))
    large = generate(SynthConfig(n_queries=40, pool_size=20, seed=6))
    assert [r.candidates for r in small] == [r.candidates for r in large.subset(range(10))]


def test_seed_changes_draw():
    a = generate(SynthConfig(n_queries=5, pool_size=20, seed=1))
    b = generate(SynthConfig(n_queries=5, pool_size=20, seed=2))
    assert [r.candidates for r in a] != [r.candidates for r in b]


def test_shape_and_labels():
    dataset = generate(SynthConfig(n_queries=25, pool_size=40, n_gold=3, n_gold_mode='uniform', seed=7))
    assert dataset.m == 25
    assert dataset.pool_size == 40
    assert all(len(r) == 40 for r in dataset)
    assert all(1 <= len(r.gold_ids) <= 3 for r in dataset)
    assert all(r.has_gold_in_pool for r in dataset)
    assert len(set(dataset.query_ids)) == 25


def test_large_gap_ranks_gold_first():
    dataset = generate(SynthConfig(n_queries=50, pool_size=100, signal_gap=40.0, seed=8))
    assert retriever_mrr(dataset) == 1.0
    assert full_mrr(apply_system(dataset, fit_system(dataset))) == 1.0


def test_zero_gap_is_uninformative():
    dataset = generate(SynthConfig(n_queries=5000, pool_size=100, signal_gap=0.0, seed=9))
    assert retriever_mrr(dataset) == pytest.approx(expected_uninformative_mrr(100), abs=0.006)


def test_expected_uninformative_mrr():
    harmonic = sum(1.0 / r for r in range(1, 11))
    assert expected_uninformative_mrr(1000) == pytest.approx(harmonic / 1000)
    assert expected_uninformative_mrr(1000) == pytest.approx(0.00293, abs=1e-5)
    assert expected_uninformative_mrr(5) == pytest.approx(sum(1.0 / r for r in range(1, 6)) / 5)


def test_adversarial_reranker_plants_top_distractor():
    dataset = generate(SynthConfig(n_queries=20, pool_size=30, reranker_mode='adversarial', seed=10))
    reranked = fuse(apply_system(dataset, fit_system(dataset, beta=1.0)), 0.0)
    for record in reranked:
        top = int(np.argmax(record.fused_scores))
        assert not record.gold_mask[top]
        distractors = ~record.gold_mask
        assert record.retriever_scores[top] == record.retriever_scores[distractors].min()


def test_consistent_reranker_copies_retriever():
    dataset = generate(SynthConfig(n_queries=5, pool_size=10, reranker_mode='consistent', seed=11))
    for record in dataset:
        assert np.array_equal(record.reranker_scores, record.retriever_scores)


def test_gold_miss_rate():
    dataset = generate(SynthConfig(n_queries=20, pool_size=10, gold_miss_rate=1.0, seed=12))
    assert dataset.unreachable_count == 20
    assert all(r.gold_ids for r in dataset)


def test_embedding_scores_are_cosines():
    dataset = generate(SynthConfig(n_queries=10, pool_size=20, embedding=True, dim=8, seed=13))
    for record in dataset:
        assert np.all(np.abs(record.retriever_scores) <= 1.0 + 1e-12)


@pytest.mark.parametrize('kwargs', [
    dict(pool_size=0),
    dict(n_gold=5, pool_size=3),
    dict(reranker_mode='random'),
    dict(gold_miss_rate=1.5),
])
def test_invalid_config(kwargs):
    with pytest.raises(ConfigurationError):
        generate(SynthConfig(**kwargs))


def test_load_config(tmp_path):
    path = tmp_path / 'synth.yaml'
    path.write_text('version: 1\nn_queries: 12\npool-size: 30\nreranker_mode: noisy\n')
    config = load_config(str(path))
    assert config == SynthConfig(n_queries=12, pool_size=30, reranker_mode='noisy')


def test_load_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / 'synth.yaml'
    path.write_text('version: 1\nqueries: 12\n')
    with pytest.raises(ConfigurationError):
        load_config(str(path))


def test_true_risk_agrees_with_independent_sample():
    config = SynthConfig(n_queries=20000, pool_size=40, seed=14)
    system = fit_system(generate(config._replace(n_queries=2000)))
    estimate, se = true_risk(config, 0.3, n_monte_carlo=20000, system=system)
    sample = loss_vector(apply_system(generate(config), system), 0.3)
    assert 0.0 < se < 0.01
    assert estimate == pytest.approx(sample.mean(), abs=4 * math.sqrt(2) * se + 1e-9)


def test_true_risk_at_full_pool_is_floor():
    config = SynthConfig(n_queries=4000, pool_size=30, signal_gap=3.0, seed=15)
    system = fit_system(generate(config._replace(n_queries=1000)))
    estimate, se = true_risk(config, 0.0, n_monte_carlo=4000, system=system)
    floor = 1.0 - full_mrr(apply_system(generate(config), system))
    assert estimate == pytest.approx(floor, abs=4 * math.sqrt(2) * se)
