"""
Synthetic two-stage ranking systems with controllable difficulty.

Retriever scores of distractors are Logistic(0, noise_scale) and those of gold documents Logistic(signal_gap,
noise_scale), so the gold posterior is exactly logistic in the score. Every query draws from its own random stream,
keyed by (seed, stream, query index), so any subset of queries can be regenerated independently.
"""

import logging
from typing import NamedTuple, Tuple, Union

import numpy as np

from rankprune.data_model import Dataset, QueryRecord, Threshold
from rankprune.errors import ConfigurationError
from rankprune.ingest import apply_system, fit_system
from rankprune.metrics import loss_vector
from rankprune.util import check_keys, load_yaml

logger = logging.getLogger(__name__)

RERANKER_MODES = ('consistent', 'noisy', 'adversarial')
GOLD_MODES = ('fixed', 'uniform')

GENERATE_STREAM = 0
RISK_STREAM = 1
PILOT_STREAM = 2


class SynthConfig(NamedTuple):
    """
    n_gold_mode 'fixed' gives every query n_gold gold documents, 'uniform' draws between 1 and n_gold.
    gold_miss_rate is the chance that a query's gold documents are left out of the pool entirely.
    """
    n_queries: int = 6000
    pool_size: int = 200
    n_gold: int = 1
    n_gold_mode: str = 'fixed'
    signal_gap: float = 2.0
    noise_scale: float = 1.0
    reranker_mode: str = 'consistent'
    reranker_gap: float = 3.0
    reranker_noise: float = 1.0
    embedding: bool = False
    dim: int = 32
    gold_miss_rate: float = 0.0
    seed: int = 0

    def validate(self):
        if min(self.n_queries, self.pool_size, self.n_gold, self.dim) < 1:
            raise ConfigurationError('n_queries, pool_size, n_gold and dim must be positive')
        if self.n_gold > self.pool_size:
            raise ConfigurationError('n_gold cannot exceed pool_size')
        if self.noise_scale < 0 or self.reranker_noise < 0:
            raise ConfigurationError('noise scales must be non-negative')
        if self.reranker_mode not in RERANKER_MODES:
            raise ConfigurationError(f'reranker_mode must be one of {", ".join(RERANKER_MODES)}')
        if self.n_gold_mode not in GOLD_MODES:
            raise ConfigurationError(f'n_gold_mode must be one of {", ".join(GOLD_MODES)}')
        if not 0.0 <= self.gold_miss_rate <= 1.0:
            raise ConfigurationError('gold_miss_rate must lie in [0, 1]')
        return self


def load_config(path: str) -> SynthConfig:
    values = load_yaml(path, 'synthetic config')
    check_keys(values, SynthConfig._fields, 'synthetic config')
    return SynthConfig(**values).validate()


def _rng(config: SynthConfig, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(stream, index)))


def _logistic(rng: np.random.Generator, loc: np.ndarray, scale: float) -> np.ndarray:
    if scale == 0:
        return np.asarray(loc, dtype=np.float64) + 0.0
    return rng.logistic(loc, scale)


def _embedding_scores(rng: np.random.Generator, gold: np.ndarray, config: SynthConfig) -> np.ndarray:
    # dot products between a unit query vector and unit document vectors pulled toward it
    query = rng.standard_normal(config.dim)
    query /= np.linalg.norm(query)
    noise = rng.standard_normal((len(gold), config.dim)) * max(config.noise_scale, 1e-12)
    docs = noise + np.outer(np.where(gold, config.signal_gap, 0.0), query)
    docs /= np.linalg.norm(docs, axis=1, keepdims=True)
    return docs @ query


def _query(config: SynthConfig, stream: int, index: int) -> QueryRecord:
    rng = _rng(config, stream, index)
    n = config.pool_size
    n_gold = config.n_gold if config.n_gold_mode == 'fixed' else int(rng.integers(1, config.n_gold + 1))
    missed = config.gold_miss_rate > 0 and rng.random() < config.gold_miss_rate

    gold = np.zeros(n, dtype=bool)
    if not missed:
        gold[:n_gold] = True

    if config.embedding:
        retriever = _embedding_scores(rng, gold, config)
    else:
        retriever = _logistic(rng, np.where(gold, config.signal_gap, 0.0), config.noise_scale)

    if config.reranker_mode == 'consistent':
        reranker = retriever.copy()
    else:
        reranker = _logistic(rng, np.where(gold, config.reranker_gap, 0.0), config.reranker_noise)
        if config.reranker_mode == 'adversarial':
            distractors = np.flatnonzero(~gold)
            if distractors.size:
                planted = distractors[np.argmin(retriever[distractors])]
                reranker[planted] = reranker.max() + 1.0

    labels = rng.permutation(n)
    doc_ids = [f'd{label:06d}' for label in labels]
    gold_ids = [doc_ids[j] for j in range(n) if gold[j]]
    if missed:
        gold_ids = [f'unjudged{j}' for j in range(n_gold)]
    return QueryRecord(
        query_id=f'q{index:07d}',
        doc_ids=doc_ids,
        retriever_scores=retriever,
        reranker_scores=reranker,
        gold_ids=gold_ids
    )


def _draw(config: SynthConfig, stream: int, start: int, count: int) -> Dataset:
    records = [_query(config, stream, i) for i in range(start, start + count)]
    return Dataset(records, {
        'pool_size': config.pool_size,
        'sources': {'synthetic': config._asdict()},
        'beta': None
    })


def generate(config: SynthConfig, verbose: int = 0) -> Dataset:
    """
    Draws a reproducible raw dataset: retriever and reranker scores plus gold labels, no calibration or fusion.

    :param config: A SynthConfig
    :return: A Dataset of config.n_queries queries
    """
    config.validate()
    dataset = _draw(config, GENERATE_STREAM, 0, config.n_queries)
    if verbose:
        logger.info(
            f'Generated {dataset.m} queries, pool size {config.pool_size}, reranker mode {config.reranker_mode}.'
        )
    return dataset


def expected_uninformative_mrr(pool_size: int, k: int = 10) -> float:
    """
    Expected MRR@k with one gold document placed uniformly at random in a pool.
    """
    return float(sum(1.0 / r for r in range(1, min(k, pool_size) + 1)) / pool_size)


def true_risk(
    config: SynthConfig,
    tau: Union[Threshold, float],
    n_monte_carlo: int = 100000,
    system=None,
    metric: str = 'mrr@10',
    chunk: int = 5000,
    pilot_queries: int = 2000
) -> Tuple[float, float]:
    """
    Monte-Carlo estimate of the population risk at a threshold, drawn from a stream separate from `generate`.
    Thresholds live on the calibrated scale, so the estimate is taken through a fitted system. Without one, a
    system is fitted on a pilot draw.

    :return: (estimate, standard error)
    """
    config.validate()
    if n_monte_carlo < 2:
        raise ConfigurationError('n_monte_carlo must be at least 2')
    if system is None:
        system = fit_system(_draw(config, PILOT_STREAM, 0, min(pilot_queries, max(config.n_queries, 2))))

    losses = []
    for start in range(0, n_monte_carlo, chunk):
        count = min(chunk, n_monte_carlo - start)
        fused = apply_system(_draw(config, RISK_STREAM, start, count), system)
        losses.append(loss_vector(fused, tau, metric=metric))
    losses = np.concatenate(losses)
    return float(losses.mean()), float(losses.std(ddof=1) / np.sqrt(losses.size))
