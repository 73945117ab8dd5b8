import numpy as np
import pytest

from rankprune.calibrate import GridConfig
from rankprune.data_model import CalibrationResult, Dataset, Threshold
from rankprune.errors import ConfigurationError
from rankprune.evaluate import TrialConfig, compare_methods, confidence_sweep, ert_calibrate, est_calibrate, \
    evaluate_sizes, evaluate_test, run_trials, split_indices, tradeoff
from rankprune.ingest import apply_system, fit_system
from rankprune.metrics import full_mrr
from rankprune.synthetic import SynthConfig, generate
from rankprune.tests.toy_systems import toy_record


def two_queries():
    scores = [0.9, 0.5, 0.2]
    return Dataset([toy_record('q1', scores, scores, ['d0']), toy_record('q2', scores, scores, ['d2'])])


def plateau_floor(pool):
    return 1.0 - full_mrr(apply_system(pool, fit_system(pool)))


def above(floor, share):
    return floor + (1.0 - floor) * share


@pytest.fixture(scope='module')
def pool():
    return generate(SynthConfig(n_queries=1500, pool_size=60, reranker_mode='consistent', signal_gap=3.0, seed=31))


@pytest.fixture(scope='module')
def floor(pool):
    return plateau_floor(pool)


@pytest.fixture(scope='module')
def config():
    return TrialConfig(n_trials=30, calib_size=600, test_size=600, grid=GridConfig(step=1e-3), beta_step=0.1)


def test_evaluate_sizes():
    scored = evaluate_sizes(two_queries(), [1, 3], 0.3)
    assert scored['mrr_at_10'] == pytest.approx(2.0 / 3)
    assert scored['test_risk'] == pytest.approx(1.0 / 3)
    assert scored['mean_pruned_size'] == 2.0
    assert not scored['constraint_satisfied']


def test_evaluate_test_applies_threshold():
    result = CalibrationResult(threshold_hat=Threshold(0.5), alpha_requested=0.6, alpha_effective=0.6,
                               delta_requested=0.1, delta_effective=0.1)
    report = evaluate_test(two_queries(), result)
    assert report.mean_pruned_size == 2.0
    assert report.mrr_at_10 == 0.5
    assert report.constraint_satisfied
    assert report.calibration is result


def test_ert_examples():
    calib = two_queries()
    assert ert_calibrate(calib, 0.5) == 1
    assert ert_calibrate(calib, 0.6) == 3
    assert ert_calibrate(calib, 0.7) is None


def test_est_examples():
    calib = two_queries()
    assert est_calibrate(calib, 0.5) == Threshold(0.9)
    assert est_calibrate(calib, 0.6) == Threshold(0.2)
    assert est_calibrate(calib, 0.7) is None


def test_split_indices_are_disjoint():
    calib, test = split_indices(100, 40, 50, seed=3)
    assert len(calib) == 40 and len(test) == 50
    assert not set(calib.tolist()) & set(test.tolist())
    again, _ = split_indices(100, 40, 50, seed=3)
    assert calib.tolist() == again.tolist()


def test_trial_validation(pool, config):
    with pytest.raises(ConfigurationError):
        run_trials(pool, 0.0, 0.1, config)
    with pytest.raises(ConfigurationError):
        run_trials(pool, 0.5, 0.1, config, calib_size=1000, test_size=1000)
    with pytest.raises(ConfigurationError):
        run_trials(pool, 0.5, 0.1, config, method='oracle')
    with pytest.raises(ConfigurationError):
        run_trials(pool, 0.5, 0.1, config, grid_size=3)


def test_certified_coverage(pool, floor, config):
    summary = run_trials(pool, above(floor, 0.4), 0.1, config)
    assert summary.n_trials == 30
    assert summary.coverage >= 0.8
    assert summary.mean_size < pool.pool_size
    assert summary.speedup == pytest.approx(pool.pool_size / summary.mean_size)
    assert summary.mean_test_risk == pytest.approx(1.0 - summary.mean_mrr)
    assert summary.mean_confidence == pytest.approx(0.9)


def test_trials_are_reproducible(pool, config):
    a = run_trials(pool, 0.6, 0.1, config, n_trials=3)
    b = run_trials(pool, 0.6, 0.1, config, n_trials=3)
    assert a.reports == b.reports
    assert len({r.seed for r in a.reports}) == 3


def test_unreachable_is_counted_per_trial():
    pool = generate(SynthConfig(n_queries=300, pool_size=20, gold_miss_rate=0.3, seed=32))
    config = TrialConfig(n_trials=4, calib_size=100, test_size=100, grid=GridConfig(step=1e-2), beta_step=0.25)
    summaries = compare_methods(pool, 0.9, 0.1, config)
    counts = [pool.subset(split_indices(pool.m, 100, 100, r.seed)[0]).unreachable_count
              for r in summaries['cec'].reports]
    for summary in summaries.values():
        assert [r.unreachable for r in summary.reports] == counts
        assert summary.mean_unreachable == pytest.approx(np.mean(counts))
    assert [r.calibration.unreachable for r in summaries['cec'].reports] == counts


def test_delta_one_is_vacuous(pool, config):
    summary = run_trials(pool, 0.5, 1.0, config, n_trials=2)
    assert summary.n_trials == 2
    assert summary.mean_confidence == 0.0


def test_certified_dominates_empirical_threshold(pool, floor, config):
    summaries = compare_methods(pool, above(floor, 0.4), 0.1, config)
    cec, est, ert = summaries['cec'], summaries['est'], summaries['ert']
    assert cec.coverage >= est.coverage
    for certified, empirical in zip(cec.reports, est.reports):
        assert certified.seed == empirical.seed
        assert certified.mean_pruned_size >= empirical.mean_pruned_size
    assert est.mean_confidence is None
    assert all(r.rank_cutoff is not None for r in ert.reports)
    assert set(cec.as_row()) == {'method', 'mrr_at_10', 'confidence', 'coverage', 'size'}


def test_tradeoff_is_monotone(pool, floor, config):
    alphas = [above(floor, 0.9), above(floor, 0.4), above(floor, 0.6)]
    table = tradeoff(pool, alphas, 0.1, config, n_trials=5)
    assert list(table.columns) == ['alpha', 'mean_mrr', 'mean_size', 'coverage', 'confidence', 'speedup']
    assert table['alpha'].tolist() == sorted(alphas)
    assert np.all(np.diff(table['mean_size']) <= 0)
    assert np.all(np.diff(table['mean_mrr']) <= 1e-12)


def test_confidence_sweep_decreases_below_floor(pool, floor, config):
    alphas = [above(floor, 0.6), above(floor, 0.15), above(floor, 0.05), floor - 0.08]
    table = confidence_sweep(pool, alphas, 0.1, config, n_trials=10)
    assert table['alpha'].tolist() == sorted(alphas, reverse=True)
    confidence = table['corrected_confidence'].to_numpy()
    assert np.all(np.diff(confidence) <= 1e-12)
    assert confidence[0] == pytest.approx(0.9)
    assert confidence[-1] == 0.0


@pytest.mark.slow
def test_workers_do_not_change_results(pool, config):
    serial = run_trials(pool, 0.6, 0.1, config, n_trials=4)
    parallel = run_trials(pool, 0.6, 0.1, config, n_trials=4, workers=2)
    assert serial.reports == parallel.reports


@pytest.fixture(scope='module')
def full_pool():
    return generate(SynthConfig(n_queries=6000, pool_size=200, reranker_mode='consistent', seed=0))


@pytest.fixture(scope='module')
def full_config():
    return TrialConfig(n_trials=100, calib_size=3000, test_size=3000, grid=GridConfig(step=1e-3))


@pytest.mark.slow
def test_full_size_coverage_and_separation(full_pool, full_config):
    alpha = plateau_floor(full_pool) + 0.02
    summaries = compare_methods(full_pool, alpha, 0.1, full_config)
    assert summaries['cec'].coverage >= 0.84
    for baseline in ('est', 'ert'):
        assert summaries[baseline].coverage <= 0.75
        assert summaries['cec'].coverage - summaries[baseline].coverage >= 0.10


@pytest.mark.slow
def test_full_size_confidence_sweep(full_pool, full_config):
    floor = plateau_floor(full_pool)
    alphas = [floor + 0.06, floor + 0.03, floor + 0.015, floor + 0.005, floor - 0.02]
    table = confidence_sweep(full_pool, alphas, 0.1, full_config)
    confidence = table['corrected_confidence'].to_numpy()
    assert np.all(np.diff(confidence) <= 1e-12)
    assert confidence[-1] == 0.0
    assert np.all(np.abs(confidence - table['empirical_coverage'].to_numpy()) <= 0.12)


@pytest.mark.slow
def test_full_size_tradeoff(full_pool, full_config):
    floor = plateau_floor(full_pool)
    alphas = [above(floor, share) for share in np.linspace(0.05, 0.5, 10)]
    table = tradeoff(full_pool, alphas, 0.1, full_config, n_trials=20)
    assert np.all(np.diff(table['mean_size']) <= 0)
    loosest = table.iloc[-1]
    assert loosest['mean_size'] <= 0.2 * full_pool.pool_size
    assert loosest['mean_mrr'] >= 1.0 - loosest['alpha']
