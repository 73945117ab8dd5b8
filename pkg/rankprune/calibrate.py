"""
Risk curves over thresholds, threshold selection and the risk/confidence corrections for unachievable requests.
"""

import copy
import logging
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from rankprune.bounds import ucb
from rankprune.data_model import CalibrationResult, Dataset, RiskCurve, Threshold
from rankprune.errors import ConfigurationError
from rankprune.metrics import LossCurve, Metric, loss_curve, monotonicity_violations, parse_metric
from rankprune.util import write_json

logger = logging.getLogger(__name__)

MODES = ('risk', 'confidence', 'both')
CONFIDENCE_STEP = 0.01
# minimizers of the ucb curve are matched within this tolerance
MIN_TOLERANCE = 1e-12


class GridConfig(NamedTuple):
    """
    step: spacing of the uniform threshold grid on [0, 1]. exact: use every per-query breakpoint instead.
    """
    step: float = 1e-4
    exact: bool = False


def uniform_grid(step: float) -> np.ndarray:
    if not 0.0 < step <= 1.0:
        raise ConfigurationError(f'grid step must lie in (0, 1], got {step}')
    return np.linspace(1.0, 0.0, int(round(1.0 / step)) + 1)


def exact_grid(curves: Sequence[LossCurve]) -> np.ndarray:
    points = [c.thresholds for c in curves if len(c.thresholds)]
    points.append(np.array([0.0, 1.0]))
    grid = np.unique(np.clip(np.concatenate(points), 0.0, 1.0))
    return grid[::-1].copy()


def check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size == 0:
        raise ConfigurationError('threshold grid must be a non-empty 1-d sequence')
    if grid.min() < 0.0 or grid.max() > 1.0:
        raise ConfigurationError('threshold grid must lie within [0, 1]')
    if np.any(np.diff(grid) >= 0):
        raise ConfigurationError('threshold grid must be strictly descending')
    return grid


class LossSweep(object):
    """
    All per-query loss curves flattened into one event list, so the loss vector of every query can be produced at
    any threshold, or at every point of a descending grid in a single pass.
    """

    def __init__(self, curves: Sequence[LossCurve]):
        self.m = len(curves)
        lengths = np.array([len(c.thresholds) for c in curves], dtype=np.int64)
        self.offsets = np.concatenate(([0], np.cumsum(lengths)[:-1])) if self.m else np.empty(0, dtype=np.int64)
        self.lengths = lengths
        self.owner = np.repeat(np.arange(self.m), lengths)
        self.thresholds = np.concatenate([c.thresholds for c in curves]) if self.m else np.empty(0)
        self.losses = np.concatenate([c.losses for c in curves]) if self.m else np.empty(0)
        self.sizes = np.concatenate([c.sizes for c in curves]).astype(np.float64) if self.m else np.empty(0)

    def __len__(self) -> int:
        return len(self.thresholds)

    def at(self, tau: float) -> Tuple[np.ndarray, np.ndarray]:
        """
        :return: (losses, sizes) for every query at one threshold
        """
        counts = np.bincount(self.owner[self.thresholds >= tau], minlength=self.m)
        index = self.offsets + counts - 1
        kept = counts > 0
        losses = np.ones(self.m)
        sizes = np.zeros(self.m)
        losses[kept] = self.losses[index[kept]]
        sizes[kept] = self.sizes[index[kept]]
        return losses, sizes

    def descending(self, grid: np.ndarray) -> Iterator[Tuple[int, np.ndarray, np.ndarray, bool]]:
        """
        Walks a descending grid, yielding (grid index, losses, sizes, changed) where changed says whether the loss
        vector differs from the previous grid point. The yielded arrays are updated in place.
        """
        order = np.argsort(-self.thresholds, kind='stable')
        events = self.thresholds[order]
        owners = self.owner[order]
        counts = np.searchsorted(-events, -grid, side='right')

        losses = np.ones(self.m)
        sizes = np.zeros(self.m)
        applied = 0
        for i, count in enumerate(counts):
            changed = i == 0
            if count > applied:
                batch = order[applied:count]
                batch_owners = owners[applied:count]
                # keep the last event per query; per-query events are in descending threshold order
                _, last = np.unique(batch_owners[::-1], return_index=True)
                picked = batch[len(batch) - 1 - last]
                who = self.owner[picked]
                new_losses = self.losses[picked]
                changed = changed or bool(np.any(losses[who] != new_losses))
                losses[who] = new_losses
                sizes[who] = self.sizes[picked]
                applied = count
            yield i, losses, sizes, changed


class Calibrator(object):
    """
    Holds everything about a calibration set that does not depend on alpha or delta: per-query loss curves, the
    threshold grid, the merged sweep and the order in which losses are fed to the bound. Risk curves are cached per
    delta, so several alphas or deltas can be served from one setup.
    """

    def __init__(
        self,
        calib: Dataset,
        grid: Union[GridConfig, Sequence[float], None] = None,
        metric: Union[str, Metric] = 'mrr@10',
        bound: str = 'wsr',
        variant: str = 'predictable',
        order_seed: Optional[int] = None
    ):
        if calib.m == 0:
            raise ConfigurationError('cannot calibrate on an empty calibration set')
        self.metric = parse_metric(metric)
        if bound not in ('wsr', 'hoeffding'):
            raise ConfigurationError(f'Unknown bound {bound!r}')
        self.bound = bound
        self.variant = variant
        self.m = calib.m
        self.unreachable = calib.unreachable_count

        self.curves = [loss_curve(r, metric=self.metric) for r in calib]
        self.violation_rate = monotonicity_violations(self.curves)
        if self.violation_rate > 0:
            logger.warning(
                f'{self.violation_rate:.2%} of calibration queries have a loss that rises as the threshold drops.'
            )
        self.sweep = LossSweep(self.curves)

        grid = grid if grid is not None else GridConfig()
        if isinstance(grid, GridConfig):
            self.grid = exact_grid(self.curves) if grid.exact else uniform_grid(grid.step)
        else:
            self.grid = check_grid(grid)

        self.order_seed = order_seed
        self.order = np.random.default_rng(order_seed).permutation(self.m) if order_seed is not None else None
        self._cache = {}
        self._full_set = None

    def reordered(self, order_seed: Optional[int]):
        other = copy.copy(self)
        other.order_seed = order_seed
        other.order = np.random.default_rng(order_seed).permutation(self.m) if order_seed is not None else None
        other._cache = {}
        return other

    def bound_of(self, losses: np.ndarray, delta: float) -> float:
        fed = losses[self.order] if self.order is not None else losses
        return max(ucb(fed, delta, self.bound, self.variant), float(losses.mean()))

    def full_set_losses(self) -> np.ndarray:
        if self._full_set is None:
            self._full_set, _ = self.sweep.at(float(self.grid[-1]))
        return self._full_set

    def breakpoints(self) -> np.ndarray:
        return exact_grid(self.curves)

    def empirical_risk(self, grid: np.ndarray = None) -> Tuple[np.ndarray, np.ndarray]:
        """
        Mean loss and mean kept-set size along a descending grid, without any bound.
        """
        grid = self.grid if grid is None else check_grid(grid)
        risk = np.empty(len(grid))
        mean_size = np.empty(len(grid))
        for i, losses, sizes, _ in self.sweep.descending(grid):
            risk[i] = losses.mean()
            mean_size[i] = sizes.mean()
        return risk, mean_size

    def risk_curve(self, delta: float, verbose: int = 0) -> RiskCurve:
        key = float(delta)
        if key in self._cache:
            return self._cache[key]

        n = len(self.grid)
        risk = np.empty(n)
        bounds = np.empty(n)
        mean_size = np.empty(n)
        current = None
        for i, losses, sizes, changed in self.sweep.descending(self.grid):
            risk[i] = losses.mean()
            mean_size[i] = sizes.mean()
            if changed or current is None:
                current = self.bound_of(losses, delta)
            bounds[i] = current
            if verbose > 1:
                logger.info(f'Grid point: {i}. Threshold: {self.grid[i]}. Risk: {risk[i]}. UCB: {bounds[i]}')

        curve = RiskCurve(
            thresholds=self.grid.copy(), empirical_risk=risk, ucb=bounds, mean_size=mean_size, delta=float(delta)
        )
        if verbose:
            logger.info(
                f'Risk curve: {n} points, delta={delta}, min UCB={bounds.min():.6f}, '
                f'floor={risk.min():.6f}'
            )
        self._cache[key] = curve
        return curve


def risk_curve(
    calib: Dataset,
    grid: Union[GridConfig, Sequence[float], None] = None,
    delta: float = 0.1,
    metric: Union[str, Metric] = 'mrr@10',
    bound: str = 'wsr',
    variant: str = 'predictable',
    order_seed: Optional[int] = None,
    verbose: int = 0
) -> RiskCurve:
    """
    Empirical risk, upper confidence bound and mean kept-set size at every grid threshold.

    :param calib: calibration dataset with fused scores
    :param grid: a GridConfig or an explicit strictly descending threshold sequence
    :param delta: miscoverage level of the bound
    :return: A RiskCurve
    """
    calibrator = Calibrator(calib, grid, metric, bound, variant, order_seed)
    return calibrator.risk_curve(delta, verbose)


def select_threshold(curve: RiskCurve, alpha: float) -> Optional[Threshold]:
    """
    Largest threshold whose bound, and the bound of every smaller grid threshold, is strictly below alpha.

    :return: the Threshold, or None when even the largest set misses alpha
    """
    if len(curve) == 0:
        raise ConfigurationError('risk curve is empty')
    ok = curve.ucb < alpha
    if not ok[-1]:
        return None
    failing = np.flatnonzero(~ok)
    start = failing[-1] + 1 if failing.size else 0
    return Threshold(float(curve.thresholds[start]))


def _min_ucb_index(curve: RiskCurve) -> int:
    lowest = curve.ucb.min()
    return int(np.flatnonzero(curve.ucb <= lowest + MIN_TOLERANCE)[-1])


def correct_risk(curve: RiskCurve, alpha: float) -> Tuple[float, Threshold]:
    """
    Replaces an unachievable alpha with the smallest bound on the curve.

    :return: (alpha_c, threshold_hat), where threshold_hat is the smallest threshold attaining the minimum
    """
    if len(curve) == 0:
        raise ConfigurationError('risk curve is empty')
    index = _min_ucb_index(curve)
    return float(curve.ucb[index]), Threshold(float(curve.thresholds[index]))


def confidence_levels(delta: float) -> List[float]:
    levels = []
    j = 0
    while True:
        level = round(delta + CONFIDENCE_STEP * j, 10)
        if level >= 1.0:
            break
        levels.append(level)
        j += 1
    levels.append(1.0)
    return levels


def _calibrator(calib, grid, metric, bound, variant, order_seed) -> Calibrator:
    if isinstance(calib, Calibrator):
        return calib
    return Calibrator(calib, grid, metric, bound, variant, order_seed)


def correct_confidence(
    calib: Union[Dataset, Calibrator],
    grid: Union[GridConfig, Sequence[float], None],
    alpha: float,
    delta: float,
    metric: Union[str, Metric] = 'mrr@10',
    bound: str = 'wsr',
    variant: str = 'predictable',
    order_seed: Optional[int] = None,
    verbose: int = 0
) -> Tuple[float, Threshold]:
    """
    Raises delta in steps of 0.01 until some threshold meets alpha. A threshold can only be selected when the
    largest set meets alpha, so each level is screened on the full-set losses before a whole curve is built.

    :return: (delta_c, threshold_hat). When no level below 1 works, delta_c is 1.0 and the threshold is the
        minimum-bound threshold at the requested delta.
    """
    calibrator = _calibrator(calib, grid, metric, bound, variant, order_seed)
    full_set = calibrator.full_set_losses()
    for level in confidence_levels(delta):
        if calibrator.bound_of(full_set, level) >= alpha:
            continue
        threshold = select_threshold(calibrator.risk_curve(level, verbose), alpha)
        if threshold is not None:
            if verbose:
                logger.info(f'Confidence correction: delta {delta} -> {level}')
            return level, threshold

    _, threshold = correct_risk(calibrator.risk_curve(delta), alpha)
    return 1.0, threshold


def _point(curve: RiskCurve, threshold: Threshold) -> Dict[str, float]:
    index = int(np.flatnonzero(curve.thresholds == threshold.tau)[0])
    return {
        'ucb_at_threshold': float(curve.ucb[index]),
        'empirical_risk_at_threshold': float(curve.empirical_risk[index]),
        'mean_size_at_threshold': float(curve.mean_size[index])
    }


def calibrate(
    calib: Union[Dataset, Calibrator],
    alpha: float,
    delta: float,
    mode: str = 'risk',
    grid: Union[GridConfig, Sequence[float], None] = None,
    metric: Union[str, Metric] = 'mrr@10',
    bound: str = 'wsr',
    variant: str = 'predictable',
    order_seed: Optional[int] = None,
    verbose: int = 0
) -> CalibrationResult:
    """
    Selects the pruning threshold for a risk level alpha at confidence 1 - delta, correcting alpha or delta when
    the request cannot be met.

    :param calib: calibration dataset with fused scores, or a prepared Calibrator
    :param alpha: tolerated risk in (0, 1]
    :param delta: miscoverage level in (0, 1]
    :param mode: 'risk', 'confidence' or 'both' ('report-both' is accepted)
    :param grid: threshold grid configuration
    :param verbose: log progress when non-zero
    :return: A CalibrationResult
    """
    if mode == 'report-both':
        mode = 'both'
    if mode not in MODES:
        raise ConfigurationError(f'mode must be one of {", ".join(MODES)}, got {mode!r}')
    if not 0.0 < alpha <= 1.0:
        raise ConfigurationError(f'alpha must lie in (0, 1], got {alpha}')
    if not 0.0 < delta <= 1.0:
        raise ConfigurationError(f'delta must lie in (0, 1], got {delta}')

    calibrator = _calibrator(calib, grid, metric, bound, variant, order_seed)
    curve = calibrator.risk_curve(delta, verbose)
    common = dict(
        alpha_requested=float(alpha),
        delta_requested=float(delta),
        metric=str(calibrator.metric),
        bound=calibrator.bound,
        m=calibrator.m,
        unreachable=calibrator.unreachable,
        monotonicity_violation_rate=calibrator.violation_rate
    )

    threshold = select_threshold(curve, alpha)
    if threshold is not None:
        return CalibrationResult(
            threshold_hat=threshold,
            alpha_effective=float(alpha),
            delta_effective=float(delta),
            correction='none',
            achievable=True,
            **_point(curve, threshold),
            **common
        )

    alpha_c, risk_threshold = correct_risk(curve, alpha)
    if mode == 'risk':
        logger.warning(f'alpha={alpha} is not achievable at delta={delta}; corrected to {alpha_c:.6f}.')
        return CalibrationResult(
            threshold_hat=risk_threshold,
            alpha_effective=max(float(alpha), alpha_c),
            delta_effective=float(delta),
            correction='risk',
            achievable=False,
            alpha_corrected=alpha_c,
            risk_threshold=risk_threshold,
            **_point(curve, risk_threshold),
            **common
        )

    delta_c, threshold = correct_confidence(calibrator, None, alpha, delta, verbose=verbose)
    logger.warning(f'alpha={alpha} is not achievable at delta={delta}; confidence corrected to {1.0 - delta_c:.2f}.')
    effective_curve = calibrator.risk_curve(delta_c) if delta_c < 1.0 else curve
    return CalibrationResult(
        threshold_hat=threshold,
        alpha_effective=float(alpha),
        delta_effective=float(delta_c),
        correction='confidence',
        achievable=False,
        alpha_corrected=alpha_c if mode == 'both' else None,
        risk_threshold=risk_threshold if mode == 'both' else None,
        **_point(effective_curve, threshold),
        **common
    )


class OrderSensitivity(NamedTuple):
    seeds: List[Optional[int]]
    thresholds: List[Optional[float]]
    min_ucb: List[float]
    threshold_spread: float
    min_ucb_spread: float


def order_sensitivity(
    calib: Union[Dataset, Calibrator],
    grid: Union[GridConfig, Sequence[float], None],
    alpha: float,
    delta: float,
    seeds: Sequence[Optional[int]],
    metric: Union[str, Metric] = 'mrr@10',
    bound: str = 'wsr',
    variant: str = 'predictable'
) -> OrderSensitivity:
    """
    Re-runs threshold selection with the losses fed to the bound in different seeded orders.
    """
    base = _calibrator(calib, grid, metric, bound, variant, None)
    thresholds = []
    lows = []
    for seed in seeds:
        curve = base.reordered(seed).risk_curve(delta)
        selected = select_threshold(curve, alpha)
        thresholds.append(selected.tau if selected is not None else None)
        lows.append(float(curve.ucb.min()))
    chosen = [t for t in thresholds if t is not None]
    return OrderSensitivity(
        seeds=list(seeds),
        thresholds=thresholds,
        min_ucb=lows,
        threshold_spread=float(max(chosen) - min(chosen)) if chosen else 0.0,
        min_ucb_spread=float(max(lows) - min(lows)) if lows else 0.0
    )


def curve_frame(curve: RiskCurve) -> pd.DataFrame:
    return pd.DataFrame({
        'threshold': curve.thresholds,
        'empirical_risk': curve.empirical_risk,
        'ucb': curve.ucb,
        'mean_size': curve.mean_size
    })


def export_curve(curve: RiskCurve, path: str):
    curve_frame(curve).to_csv(path, index=False)


def export_result(result: CalibrationResult, path: str, system: Dict = None, order: OrderSensitivity = None):
    out = {'calibration': result.to_dict(), 'system': system}
    if order is not None:
        out['order_sensitivity'] = order._asdict()
    write_json(out, path)
