import logging
import time

import numpy as np
import pandas as pd
import pytest

from rankprune.bounds import wsr_ucb
from rankprune.calibrate import Calibrator, GridConfig, LossSweep, calibrate, confidence_levels, correct_confidence, \
    correct_risk, export_curve, export_result, order_sensitivity, risk_curve, select_threshold, uniform_grid
from rankprune.data_model import Dataset, RiskCurve, Threshold
from rankprune.errors import ConfigurationError
from rankprune.metrics import full_mrr, loss_curve, loss_vector
from rankprune.synthetic import SynthConfig
from rankprune.tests.toy_systems import fused_synthetic, naive_risk, random_dataset, toy_record
from rankprune.util import read_json


def hand_curve(thresholds, ucb):
    thresholds = np.asarray(thresholds, dtype=float)
    ucb = np.asarray(ucb, dtype=float)
    return RiskCurve(thresholds, ucb.copy(), ucb, np.zeros(len(ucb)), 0.1)


@pytest.fixture(scope='module')
def calib():
    return fused_synthetic(SynthConfig(n_queries=600, pool_size=50, signal_gap=2.0, seed=21))


@pytest.fixture(scope='module')
def calibrator(calib):
    return Calibrator(calib, GridConfig(step=1e-3))


def test_uniform_grid_is_descending():
    grid = uniform_grid(0.25)
    assert grid.tolist() == [1.0, 0.75, 0.5, 0.25, 0.0]


@pytest.mark.parametrize('grid', [[0.0, 0.5], [1.5, 0.0], [], [0.5, 0.5]])
def test_invalid_grids(grid):
    with pytest.raises(ConfigurationError):
        Calibrator(random_dataset(1, 5), grid)


def test_grid_at_zero_is_full_set_floor():
    dataset = random_dataset(3, 80)
    curve = risk_curve(dataset, [0.0])
    assert curve.empirical_risk[0] == pytest.approx(1.0 - full_mrr(dataset), abs=1e-12)
    assert curve.mean_size[0] == pytest.approx(np.mean([len(r) for r in dataset]))


def test_threshold_above_every_score_keeps_nothing():
    rng = np.random.default_rng(4)
    records = [toy_record(f'q{i}', 0.9 * rng.random(10), rng.random(10), ['d0']) for i in range(20)]
    curve = risk_curve(Dataset(records), [1.0, 0.0])
    assert curve.empirical_risk[0] == 1.0
    assert curve.mean_size[0] == 0.0
    assert curve.ucb[0] == 1.0


def test_risk_curve_matches_naive_oracle():
    dataset = random_dataset(5, 50)
    grid = uniform_grid(0.01)
    curve = risk_curve(dataset, grid)
    for i, tau in enumerate(grid):
        assert curve.empirical_risk[i] == pytest.approx(naive_risk(dataset, tau), abs=1e-12)
        assert curve.mean_size[i] == pytest.approx(np.mean([r.size_at(tau) for r in dataset]))
        losses = loss_vector(dataset, tau)
        assert curve.ucb[i] == pytest.approx(max(wsr_ucb(losses, 0.1), losses.mean()), abs=1e-9)


def test_risk_curve_ucb_never_below_risk(calibrator):
    curve = calibrator.risk_curve(0.1)
    assert np.all(curve.ucb >= curve.empirical_risk)
    assert np.all(curve.ucb <= 1.0)


def test_risk_curve_is_cached(calibrator):
    assert calibrator.risk_curve(0.2) is calibrator.risk_curve(0.2)


def test_sweep_at_matches_loss_vector():
    dataset = random_dataset(6, 40)
    sweep = LossSweep([loss_curve(r) for r in dataset])
    for tau in (1.0, 0.73, 0.5, 0.21, 0.0):
        losses, sizes = sweep.at(tau)
        assert losses.tolist() == loss_vector(dataset, tau).tolist()
        assert sizes.tolist() == [r.size_at(tau) for r in dataset]


def test_sweep_descending_matches_at():
    dataset = random_dataset(7, 40)
    sweep = LossSweep([loss_curve(r) for r in dataset])
    grid = uniform_grid(0.05)
    previous = None
    for i, losses, sizes, changed in sweep.descending(grid):
        expected, expected_sizes = sweep.at(grid[i])
        assert losses.tolist() == expected.tolist()
        assert sizes.tolist() == expected_sizes.tolist()
        if previous is not None:
            assert changed == (previous != expected.tolist())
        previous = expected.tolist()


def test_select_threshold_largest_passing_suffix():
    curve = hand_curve([1.0, 0.5, 0.0], [1.0, 0.3, 0.2])
    assert select_threshold(curve, 0.35) == Threshold(0.5)


def test_select_threshold_requires_whole_suffix():
    curve = hand_curve([1.0, 0.75, 0.5, 0.0], [0.2, 0.1, 0.4, 0.2])
    assert select_threshold(curve, 0.3) == Threshold(0.0)


def test_select_threshold_is_strict():
    curve = hand_curve([1.0, 0.0], [0.5, 0.3])
    assert select_threshold(curve, 0.3) is None


def test_select_threshold_unachievable():
    curve = hand_curve([1.0, 0.5, 0.0], [1.0, 0.6, 0.4])
    assert select_threshold(curve, 0.3) is None


def test_correct_risk_takes_smallest_minimizer():
    curve = hand_curve([1.0, 0.6, 0.3, 0.0], [0.9, 0.4, 0.4 + 1e-13, 0.5])
    alpha_c, threshold = correct_risk(curve, 0.1)
    assert alpha_c == 0.4
    assert threshold == Threshold(0.3)


def test_confidence_levels():
    assert confidence_levels(0.95) == [0.95, 0.96, 0.97, 0.98, 0.99, 1.0]
    levels = confidence_levels(0.1)
    assert len(levels) == 91
    assert levels[1] == 0.11


def test_selected_threshold_has_passing_suffix(calib, calibrator):
    curve = calibrator.risk_curve(0.1)
    alpha = curve.empirical_risk[-1] + 0.15
    result = calibrate(calibrator, alpha, 0.1)
    assert result.achievable
    assert result.correction == 'none'
    below = curve.thresholds <= result.threshold_hat.tau
    assert np.all(curve.ucb[below] < alpha)
    index = int(np.flatnonzero(curve.thresholds == result.threshold_hat.tau)[0])
    if index > 0:
        assert curve.ucb[index - 1] >= alpha
    assert result.ucb_at_threshold == curve.ucb[index]
    assert result.m == calib.m


def test_larger_alpha_gives_larger_threshold(calibrator):
    floor = calibrator.risk_curve(0.1).empirical_risk[-1]
    taus = [calibrate(calibrator, min(floor + a, 1.0), 0.1).threshold_hat.tau for a in (0.1, 0.2, 0.3, 0.5)]
    assert taus == sorted(taus)


def test_risk_correction_below_floor(calibrator):
    curve = calibrator.risk_curve(0.1)
    floor = curve.empirical_risk[-1]
    result = calibrate(calibrator, floor / 2, 0.1, mode='risk')
    assert not result.achievable
    assert result.correction == 'risk'
    assert result.alpha_corrected == pytest.approx(curve.ucb.min(), abs=1e-12)
    assert result.alpha_effective == max(floor / 2, result.alpha_corrected)
    assert result.delta_effective == 0.1
    assert result.threshold_hat == result.risk_threshold
    lowest = np.flatnonzero(curve.ucb <= curve.ucb.min() + 1e-12)
    assert result.threshold_hat.tau == curve.thresholds[lowest[-1]]


def small_calibrator():
    return Calibrator(fused_synthetic(SynthConfig(n_queries=150, pool_size=30, signal_gap=1.5, seed=22)),
                      GridConfig(step=1e-2))


def test_confidence_correction_steps_delta():
    calibrator = small_calibrator()
    full = calibrator.full_set_losses()
    alpha = (full.mean() + calibrator.bound_of(full, 0.1)) / 2
    delta_c, threshold = correct_confidence(calibrator, None, alpha, 0.1)
    assert 0.1 < delta_c < 1.0
    assert calibrator.bound_of(full, delta_c) < alpha
    assert calibrator.bound_of(full, round(delta_c - 0.01, 10)) >= alpha
    assert select_threshold(calibrator.risk_curve(delta_c), alpha) == threshold
    index = int(np.flatnonzero(calibrator.grid == threshold.tau)[0])
    assert calibrator.risk_curve(delta_c).ucb[index] <= alpha
    assert calibrator.risk_curve(round(delta_c - 0.01, 10)).ucb[index] > alpha


def test_confidence_mode_result():
    calibrator = small_calibrator()
    full = calibrator.full_set_losses()
    alpha = (full.mean() + calibrator.bound_of(full, 0.1)) / 2
    result = calibrate(calibrator, alpha, 0.1, mode='confidence')
    assert result.correction == 'confidence'
    assert result.alpha_effective == alpha
    assert result.delta_effective > 0.1
    assert result.confidence == pytest.approx(1.0 - result.delta_effective)
    assert result.alpha_corrected is None
    both = calibrate(calibrator, alpha, 0.1, mode='report-both')
    assert both.threshold_hat == result.threshold_hat
    assert both.alpha_corrected is not None
    assert both.risk_threshold is not None


def test_confidence_correction_falls_back_to_vacuous_level():
    calibrator = small_calibrator()
    floor = calibrator.full_set_losses().mean()
    result = calibrate(calibrator, floor / 2, 0.1, mode='confidence')
    assert result.delta_effective == 1.0
    assert result.confidence == 0.0
    _, expected = correct_risk(calibrator.risk_curve(0.1), floor / 2)
    assert result.threshold_hat == expected


@pytest.mark.parametrize('kwargs', [
    dict(alpha=0.0, delta=0.1),
    dict(alpha=0.5, delta=0.0),
    dict(alpha=1.5, delta=0.1),
    dict(alpha=0.5, delta=0.1, mode='bogus'),
])
def test_calibrate_rejects(kwargs):
    with pytest.raises(ConfigurationError):
        calibrate(random_dataset(8, 10), **kwargs)


def test_rising_loss_warns_once_per_calibrator(caplog):
    record = toy_record('q', [0.9, 0.5], [0.1, 0.8], ['d0'])
    with caplog.at_level(logging.WARNING, logger='rankprune.calibrate'):
        calibrator = Calibrator(Dataset([record]), GridConfig(step=0.1))
        for alpha in (0.6, 0.8, 0.9):
            calibrate(calibrator, alpha, 0.1)
    rising = [r for r in caplog.records if 'rises' in r.getMessage()]
    assert len(rising) == 1
    assert calibrator.violation_rate == 1.0


def test_empty_calibration_set():
    with pytest.raises(ConfigurationError):
        Calibrator(Dataset([]))


def test_exact_grid_contains_breakpoints():
    dataset = random_dataset(9, 30)
    calibrator = Calibrator(dataset, GridConfig(exact=True))
    points = set(np.concatenate([loss_curve(r).thresholds for r in dataset]).tolist())
    assert points <= set(calibrator.grid.tolist())
    risk, _ = calibrator.empirical_risk()
    for i, tau in enumerate(calibrator.grid):
        assert risk[i] == pytest.approx(naive_risk(dataset, tau), abs=1e-12)


def test_hoeffding_ignores_order(calib):
    report = order_sensitivity(calib, GridConfig(step=1e-2), 0.3, 0.1, [None, 1, 2], bound='hoeffding')
    assert report.min_ucb_spread == pytest.approx(0.0, abs=1e-12)
    assert report.threshold_spread == 0.0


def test_order_sensitivity_reports_every_seed(calibrator):
    report = order_sensitivity(calibrator, None, 0.4, 0.1, [None, 3, 4])
    assert len(report.thresholds) == 3
    assert len(report.min_ucb) == 3
    assert report.min_ucb_spread >= 0.0


def test_export_curve(tmp_path, calibrator):
    path = str(tmp_path / 'curve.csv')
    export_curve(calibrator.risk_curve(0.1), path)
    frame = pd.read_csv(path)
    assert list(frame.columns) == ['threshold', 'empirical_risk', 'ucb', 'mean_size']
    assert len(frame) == len(calibrator.grid)


def test_export_result(tmp_path, calibrator):
    path = str(tmp_path / 'result.json')
    result = calibrate(calibrator, 0.5, 0.1)
    export_result(result, path, system={'beta': 0.3})
    data = read_json(path)
    assert data['system'] == {'beta': 0.3}
    assert data['calibration']['threshold_hat'] == result.threshold_hat.tau


@pytest.mark.slow
def test_full_grid_calibration_time():
    dataset = fused_synthetic(SynthConfig(n_queries=5000, pool_size=1000, seed=23))
    start = time.perf_counter()
    calibrator = Calibrator(dataset, GridConfig(step=1e-4))
    calibrator.risk_curve(0.1)
    assert time.perf_counter() - start <= 60.0
    start = time.perf_counter()
    calibrator.empirical_risk(calibrator.breakpoints())
    assert time.perf_counter() - start <= 5.0


@pytest.mark.slow
def test_bound_is_tight_on_large_calibration_set():
    dataset = fused_synthetic(SynthConfig(n_queries=5000, pool_size=100, seed=24))
    curve = Calibrator(dataset, GridConfig(step=1e-3)).risk_curve(0.1)
    assert np.max(curve.ucb - curve.empirical_risk) <= 0.05
