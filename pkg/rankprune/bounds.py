"""
Upper confidence bounds on the mean of losses in [0, 1].
"""

import math
from typing import NamedTuple

import numpy as np
from scipy.optimize import bisect

from rankprune.errors import CalibrationError, ConfigurationError

BOUNDS = ('wsr', 'hoeffding')
WSR_VARIANTS = ('predictable', 'printed')


def _check(losses, delta: float) -> np.ndarray:
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 1 or losses.size == 0:
        raise CalibrationError('a confidence bound needs a non-empty vector of losses')
    if np.any(~np.isfinite(losses)) or losses.min() < 0.0 or losses.max() > 1.0:
        raise CalibrationError('losses must lie in [0, 1]')
    if not 0.0 < delta <= 1.0:
        raise CalibrationError(f'delta must lie in (0, 1], got {delta}')
    return losses


class WsrState(NamedTuple):
    """
    Running statistics of the betting martingale. mean and variance are the capped running estimates after each
    sample, nu the betting fraction applied to each sample.
    """
    count: int
    mean: np.ndarray
    variance: np.ndarray
    nu: np.ndarray
    losses: np.ndarray
    delta: float

    def log_capital(self, r: float) -> np.ndarray:
        """
        log K_i(r) for i = 1..count.
        """
        with np.errstate(divide='ignore'):
            return np.cumsum(np.log1p(-self.nu * (self.losses - r)))

    def rejects(self, r: float) -> float:
        # positive once the capital has exceeded 1/delta
        return float(self.log_capital(r).max()) - math.log(1.0 / self.delta)


def wsr_state(losses, delta: float, variant: str = 'predictable') -> WsrState:
    """
    :param losses: losses in [0, 1], in the order they are fed to the martingale
    :param delta: miscoverage level in (0, 1]
    :param variant: 'predictable' uses the lagged variance so betting fractions depend only on past samples;
        'printed' uses the variance including the current sample, centered on the current mean
    """
    losses = _check(losses, delta)
    if variant not in WSR_VARIANTS:
        raise ConfigurationError(f'Unknown WSR variant {variant!r}')
    m = losses.size
    steps = np.arange(1, m + 1)
    sums = np.cumsum(losses)
    mean = (0.5 + sums) / (1.0 + steps)

    if variant == 'predictable':
        variance = (0.25 + np.cumsum((losses - mean) ** 2)) / (1.0 + steps)
        betting_variance = np.concatenate(([0.25], variance[:-1]))
    else:
        squares = np.cumsum(losses ** 2)
        variance = (0.25 + squares - 2.0 * mean * sums + steps * mean ** 2) / (1.0 + steps)
        betting_variance = variance

    betting_variance = np.maximum(betting_variance, 1e-300)
    nu = np.minimum(1.0, np.sqrt(2.0 * math.log(1.0 / delta) / (m * betting_variance)))
    return WsrState(count=m, mean=mean, variance=variance, nu=nu, losses=losses, delta=delta)


def wsr_ucb(losses, delta: float, variant: str = 'predictable', xtol: float = 1e-6) -> float:
    """
    Waudby-Smith–Ramdas upper confidence bound: the smallest r in [0, 1] at which the betting capital
    prod_j (1 - nu_j (L_j - r)) exceeds 1/delta, floored at the sample mean and clamped to 1.

    :param losses: losses in [0, 1]
    :param delta: miscoverage level in (0, 1]
    :return: the bound
    """
    state = wsr_state(losses, delta, variant)
    sample_mean = float(state.losses.mean())
    if delta == 1.0 or state.rejects(1.0) <= 0.0:
        return 1.0
    if state.rejects(0.0) > 0.0:
        return sample_mean
    bound = bisect(state.rejects, 0.0, 1.0, xtol=xtol)
    return float(min(1.0, max(bound, sample_mean)))


def hoeffding_ucb(losses, delta: float) -> float:
    losses = _check(losses, delta)
    return float(min(1.0, losses.mean() + math.sqrt(math.log(1.0 / delta) / (2.0 * losses.size))))


def ucb(losses, delta: float, bound: str = 'wsr', variant: str = 'predictable') -> float:
    if bound == 'wsr':
        return wsr_ucb(losses, delta, variant)
    if bound == 'hoeffding':
        return hoeffding_ucb(losses, delta)
    raise ConfigurationError(f'Unknown bound {bound!r}. Use one of {", ".join(BOUNDS)}.')
