"""
Test-time evaluation, the repeated calibration/test trial protocol, the empirical score and rank threshold baselines,
and the alpha tradeoff and confidence-correction sweeps built on it.
"""

import logging
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from rankprune.calibrate import Calibrator, GridConfig, calibrate
from rankprune.data_model import CalibrationResult, Dataset, Threshold, TrialReport
from rankprune.distributed import map_trials
from rankprune.errors import ConfigurationError
from rankprune.ingest import apply_system, fit_system
from rankprune.metrics import Metric, parse_metric, prefix_losses, prefix_reciprocal_rank, full_mrr, retriever_mrr
from rankprune.util import trial_seed

logger = logging.getLogger(__name__)

METHODS = ('cec', 'est', 'ert')
# slack when comparing a mean loss against 1 - required score
RISK_SLACK = 1e-12


class TrialConfig(NamedTuple):
    n_trials: int = 100
    calib_size: int = 5000
    test_size: int = 6980
    mode: str = 'risk'
    master_seed: int = 0
    grid: GridConfig = GridConfig()
    bound: str = 'wsr'
    wsr_variant: str = 'predictable'
    metric: str = 'mrr@10'
    beta_step: float = 0.01
    scaling: str = 'platt'
    order_seed: Optional[int] = None
    workers: int = 1


class TrialSummary(NamedTuple):
    method: str
    alpha: float
    delta: float
    n_trials: int
    coverage: float
    mean_mrr: float
    mean_size: float
    mean_confidence: Optional[float]
    pool_size: int
    speedup: Optional[float]
    mean_full_mrr: float
    mean_retriever_mrr: float
    mean_test_risk: float
    mean_unreachable: float
    reports: List[TrialReport]

    def as_row(self) -> Dict:
        return {
            'method': self.method,
            'mrr_at_10': self.mean_mrr,
            'confidence': self.mean_confidence,
            'coverage': self.coverage,
            'size': self.mean_size
        }

    def to_dict(self) -> Dict:
        out = self._asdict()
        out.pop('reports')
        return out


def _check_config(pool: Dataset, config: TrialConfig):
    if config.n_trials < 1:
        raise ConfigurationError(f'n_trials must be positive, got {config.n_trials}')
    if config.calib_size < 1 or config.test_size < 1:
        raise ConfigurationError('calibration and test sizes must be positive')
    if config.calib_size + config.test_size > pool.m:
        raise ConfigurationError(
            f'calib_size + test_size = {config.calib_size + config.test_size} exceeds the pool of {pool.m} queries'
        )
    if config.workers < 1:
        raise ConfigurationError(f'workers must be at least 1, got {config.workers}')
    parse_metric(config.metric)


def _summary_risk(losses: np.ndarray, rr: np.ndarray, metric: Metric) -> Tuple[float, float]:
    mrr = float(rr.mean())
    risk = 1.0 - mrr if metric == Metric('mrr', 10) else float(losses.mean())
    return mrr, risk


def evaluate_sizes(test: Dataset, sizes: Sequence[int], alpha: float, metric: Union[str, Metric] = 'mrr@10') -> Dict:
    """
    Scores the test set when each query keeps its first sizes[i] candidates.
    """
    metric = parse_metric(metric)
    sizes = np.asarray(sizes, dtype=np.int64)
    rr = np.array([prefix_reciprocal_rank(r, int(s), 10) for r, s in zip(test, sizes)])
    losses = np.array([prefix_losses(r, metric=metric)[int(s)] for r, s in zip(test, sizes)])
    mrr, risk = _summary_risk(losses, rr, metric)
    return {
        'mrr_at_10': mrr,
        'mean_pruned_size': float(sizes.mean()) if sizes.size else 0.0,
        'test_risk': risk,
        'constraint_satisfied': bool(risk <= alpha)
    }


def evaluate_test(test: Dataset, result: CalibrationResult) -> TrialReport:
    """
    Prunes every test query at the calibrated threshold, reranks and scores.

    :param test: a fused test dataset
    :param result: the CalibrationResult to apply
    :return: A TrialReport
    """
    if test.m == 0:
        raise ConfigurationError('cannot evaluate an empty test set')
    sizes = [r.size_at(result.threshold_hat) for r in test]
    scored = evaluate_sizes(test, sizes, result.alpha_effective, result.metric)
    return TrialReport(
        seed=0,
        calibration=result,
        alpha_effective=result.alpha_effective,
        **scored
    )


def evaluate_rank_cutoff(test: Dataset, cutoff: int, alpha: float, metric: Union[str, Metric] = 'mrr@10') -> TrialReport:
    sizes = [min(cutoff, len(r)) for r in test]
    scored = evaluate_sizes(test, sizes, alpha, metric)
    return TrialReport(
        seed=0, calibration=None, method='ert', alpha_effective=alpha, rank_cutoff=int(cutoff), **scored
    )


def est_calibrate(calib: Union[Dataset, Calibrator], required_mrr: float) -> Optional[Threshold]:
    """
    Empirical score threshold: the largest breakpoint threshold at which the calibration MRR@10 after pruning and
    reranking reaches required_mrr. No guarantee is attached.

    :return: the Threshold or None when even the full pools miss the target
    """
    calibrator = calib if isinstance(calib, Calibrator) else Calibrator(calib, GridConfig(exact=True))
    grid = calibrator.breakpoints()
    risk, _ = calibrator.empirical_risk(grid)
    hits = np.flatnonzero(risk <= 1.0 - required_mrr + RISK_SLACK)
    if hits.size == 0:
        return None
    return Threshold(float(grid[hits[0]]))


def ert_calibrate(calib: Dataset, required_mrr: float, k: int = 10) -> Optional[int]:
    """
    Empirical rank threshold: the smallest cutoff r such that keeping every query's top r candidates by calibrated
    score and reranking reaches required_mrr on calibration data.

    :return: the cutoff or None when even the full pools miss the target
    """
    if calib.m == 0:
        raise ConfigurationError('cannot calibrate on an empty calibration set')
    width = max(len(r) for r in calib) + 1
    table = np.ones((calib.m, width))
    for i, record in enumerate(calib):
        losses = prefix_losses(record, k)
        table[i, :len(losses)] = losses
        table[i, len(losses):] = losses[-1]
    risk = table.mean(axis=0)
    hits = np.flatnonzero(risk[1:] <= 1.0 - required_mrr + RISK_SLACK)
    if hits.size == 0:
        return None
    return int(hits[0] + 1)


def split_indices(m: int, calib_size: int, test_size: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    permutation = np.random.default_rng(seed).permutation(m)
    return np.sort(permutation[:calib_size]), np.sort(permutation[calib_size:calib_size + test_size])


class TrialJob(NamedTuple):
    trial: int
    alphas: Tuple[float, ...]
    delta: float
    methods: Tuple[str, ...]
    config: TrialConfig


def run_trial(pool: Dataset, job: TrialJob) -> Dict[Tuple[str, float], TrialReport]:
    """
    One calibration/test split: fits the system on the calibration half only, then calibrates and evaluates every
    requested method and alpha on the same split.
    """
    config = job.config
    seed = trial_seed(config.master_seed, job.trial)
    calib_idx, test_idx = split_indices(pool.m, config.calib_size, config.test_size, seed)
    calib_raw, test_raw = pool.subset(calib_idx), pool.subset(test_idx)
    if set(calib_raw.query_ids) & set(test_raw.query_ids):
        raise RuntimeError(f'Trial {job.trial}: calibration and test splits share queries.')

    system = fit_system(calib_raw, beta_step=config.beta_step, scaling=config.scaling)
    calib = apply_system(calib_raw, system)
    test = apply_system(test_raw, system)
    extras = dict(
        seed=seed,
        trial=job.trial,
        full_mrr=full_mrr(test, 10),
        retriever_mrr=retriever_mrr(test, 10),
        unreachable=calib.unreachable_count
    )

    reports = {}
    if 'cec' in job.methods:
        calibrator = Calibrator(
            calib, config.grid, config.metric, config.bound, config.wsr_variant, config.order_seed
        )
        for alpha in job.alphas:
            result = calibrate(calibrator, alpha, job.delta, config.mode)
            reports[('cec', alpha)] = evaluate_test(test, result)._replace(**extras)

    if 'est' in job.methods:
        baseline = Calibrator(calib, GridConfig(exact=True))
        for alpha in job.alphas:
            threshold = est_calibrate(baseline, 1.0 - alpha)
            threshold = threshold if threshold is not None else Threshold(0.0)
            sizes = [r.size_at(threshold) for r in test]
            scored = evaluate_sizes(test, sizes, alpha)
            reports[('est', alpha)] = TrialReport(
                calibration=None, method='est', alpha_effective=alpha, **scored, **extras
            )

    if 'ert' in job.methods:
        for alpha in job.alphas:
            cutoff = ert_calibrate(calib, 1.0 - alpha)
            cutoff = cutoff if cutoff is not None else calib.pool_size
            reports[('ert', alpha)] = evaluate_rank_cutoff(test, cutoff, alpha)._replace(**extras)
    return reports


def _collect(
    pool: Dataset,
    config: TrialConfig,
    alphas: Sequence[float],
    delta: float,
    methods: Sequence[str],
    verbose: int = 0
) -> Dict[Tuple[str, float], List[TrialReport]]:
    _check_config(pool, config)
    for method in methods:
        if method not in METHODS:
            raise ConfigurationError(f'method must be one of {", ".join(METHODS)}, got {method!r}')
    for alpha in alphas:
        if not 0.0 < alpha <= 1.0:
            raise ConfigurationError(f'alpha must lie in (0, 1], got {alpha}')
    if not 0.0 < delta <= 1.0:
        raise ConfigurationError(f'delta must lie in (0, 1], got {delta}')

    jobs = [TrialJob(i, tuple(alphas), delta, tuple(methods), config) for i in range(config.n_trials)]
    outcomes = map_trials(run_trial, jobs, workers=config.workers, shared=pool)

    collected = {(method, alpha): [] for method in methods for alpha in alphas}
    for job, outcome in zip(jobs, outcomes):
        for key, report in outcome.items():
            collected[key].append(report)
            if verbose:
                logger.info(
                    f'Trial: {job.trial}. Method: {key[0]}. Alpha: {key[1]}. Seed: {report.seed}. '
                    f'MRR@10: {report.mrr_at_10:.4f}. Size: {report.mean_pruned_size:.2f}. '
                    f'Satisfied: {report.constraint_satisfied}'
                )
    return collected


def summarize(
    reports: List[TrialReport],
    method: str,
    alpha: float,
    delta: float,
    pool_size: int
) -> TrialSummary:
    mean_size = float(np.mean([r.mean_pruned_size for r in reports]))
    confidence = None
    if method == 'cec':
        confidence = float(np.mean([r.calibration.confidence for r in reports]))
    return TrialSummary(
        method=method,
        alpha=float(alpha),
        delta=float(delta),
        n_trials=len(reports),
        coverage=float(np.mean([r.constraint_satisfied for r in reports])),
        mean_mrr=float(np.mean([r.mrr_at_10 for r in reports])),
        mean_size=mean_size,
        mean_confidence=confidence,
        pool_size=pool_size,
        speedup=pool_size / mean_size if mean_size > 0 else None,
        mean_full_mrr=float(np.mean([r.full_mrr for r in reports])),
        mean_retriever_mrr=float(np.mean([r.retriever_mrr for r in reports])),
        mean_test_risk=float(np.mean([r.test_risk for r in reports])),
        mean_unreachable=float(np.mean([r.unreachable for r in reports])),
        reports=reports
    )


def _config(config: Optional[TrialConfig], overrides: Dict) -> TrialConfig:
    config = config if config is not None else TrialConfig()
    unknown = set(overrides) - set(TrialConfig._fields)
    if unknown:
        raise ConfigurationError(f'Unknown trial settings: {", ".join(sorted(unknown))}')
    return config._replace(**overrides)


def run_trials(
    pool: Dataset,
    alpha: float,
    delta: float,
    config: TrialConfig = None,
    method: str = 'cec',
    verbose: int = 0,
    **overrides
) -> TrialSummary:
    """
    Repeats calibrate-then-test on random disjoint splits of a query pool.

    :param pool: raw query pool with retriever and reranker scores
    :param alpha: tolerated risk
    :param delta: miscoverage level
    :param config: trial settings; keyword overrides replace single fields (n_trials, calib_size, mode, ...)
    :param method: 'cec' for the certified method or the 'est' / 'ert' baselines
    :return: A TrialSummary with coverage, mean MRR@10, mean size and all reports
    """
    config = _config(config, overrides)
    collected = _collect(pool, config, [alpha], delta, [method], verbose)
    summary = summarize(collected[(method, alpha)], method, alpha, delta, pool.pool_size)
    if verbose:
        logger.info(
            f'Method: {method}. Coverage: {summary.coverage:.3f}. MRR@10: {summary.mean_mrr:.4f}. '
            f'Size: {summary.mean_size:.2f}'
        )
    return summary


def compare_methods(
    pool: Dataset,
    alpha: float,
    delta: float,
    config: TrialConfig = None,
    methods: Sequence[str] = METHODS,
    verbose: int = 0,
    **overrides
) -> Dict[str, TrialSummary]:
    """
    Runs several methods on exactly the same splits and system fits.
    """
    config = _config(config, overrides)
    collected = _collect(pool, config, [alpha], delta, methods, verbose)
    return {
        method: summarize(collected[(method, alpha)], method, alpha, delta, pool.pool_size)
        for method in methods
    }


def tradeoff(
    pool: Dataset,
    alphas: Sequence[float],
    delta: float,
    config: TrialConfig = None,
    verbose: int = 0,
    **overrides
) -> pd.DataFrame:
    """
    Mean MRR@10, mean kept-set size and coverage for every alpha, sorted by alpha.
    """
    config = _config(config, overrides)
    alphas = sorted(set(float(a) for a in alphas))
    collected = _collect(pool, config, alphas, delta, ['cec'], verbose)
    rows = []
    for alpha in alphas:
        summary = summarize(collected[('cec', alpha)], 'cec', alpha, delta, pool.pool_size)
        rows.append({
            'alpha': alpha,
            'mean_mrr': summary.mean_mrr,
            'mean_size': summary.mean_size,
            'coverage': summary.coverage,
            'confidence': summary.mean_confidence,
            'speedup': summary.speedup
        })
    return pd.DataFrame(rows, columns=['alpha', 'mean_mrr', 'mean_size', 'coverage', 'confidence', 'speedup'])


def confidence_sweep(
    pool: Dataset,
    alphas: Sequence[float],
    delta: float,
    config: TrialConfig = None,
    verbose: int = 0,
    **overrides
) -> pd.DataFrame:
    """
    Runs confidence-corrected calibration for a descending list of alphas and reports the mean corrected confidence
    next to the coverage actually observed on the test splits.
    """
    overrides['mode'] = 'confidence'
    config = _config(config, overrides)
    alphas = sorted(set(float(a) for a in alphas), reverse=True)
    collected = _collect(pool, config, alphas, delta, ['cec'], verbose)
    rows = []
    for alpha in alphas:
        summary = summarize(collected[('cec', alpha)], 'cec', alpha, delta, pool.pool_size)
        rows.append({
            'alpha': alpha,
            'corrected_confidence': summary.mean_confidence,
            'empirical_coverage': summary.coverage,
            'mean_mrr': summary.mean_mrr,
            'mean_size': summary.mean_size
        })
    return pd.DataFrame(
        rows, columns=['alpha', 'corrected_confidence', 'empirical_coverage', 'mean_mrr', 'mean_size']
    )
