"""
Truncated reciprocal-rank losses and per-query loss-vs-threshold step functions.

For a calibrated record the kept set at any threshold is a prefix of the candidate list, so every loss needed by
calibration is a function of the prefix length. `prefix_losses` computes the loss for all prefix lengths at once;
`LossCurve` maps those onto thresholds.
"""

import logging
from typing import Dict, Iterable, List, NamedTuple, Sequence, Set, Union

import numpy as np

from rankprune.data_model import Dataset, QueryRecord, Threshold, as_tau, prune, rerank
from rankprune.errors import ConfigurationError

logger = logging.getLogger(__name__)


class Metric(NamedTuple):
    name: str
    k: int = 10

    def __str__(self) -> str:
        return f'mrr@{self.k}' if self.name == 'mrr' else self.name


def parse_metric(metric: Union[str, Metric, None]) -> Metric:
    """
    Accepts `mrr@K` (K >= 1) or `recall`.
    """
    if metric is None:
        return Metric('mrr', 10)
    if isinstance(metric, Metric):
        return metric
    text = str(metric).strip().lower()
    if text == 'recall':
        return Metric('recall', 0)
    if text.startswith('mrr@'):
        try:
            k = int(text[4:])
        except ValueError:
            k = 0
        if k >= 1:
            return Metric('mrr', k)
    raise ConfigurationError(f'Unknown metric {metric!r}. Use mrr@K or recall.')


def _resolve(metric, k: int) -> Metric:
    return parse_metric(metric) if metric is not None else Metric('mrr', k)


def reciprocal_rank_at_k(ranked: Sequence[str], gold: Set[str], k: int = 10) -> float:
    """
    :param ranked: ranked document ids, best first
    :param gold: relevant document ids
    :param k: rank cutoff
    :return: 1/r for the best-ranked gold document, 0 when none appears in the top k
    """
    if k < 1:
        raise ConfigurationError(f'k must be at least 1, got {k}')
    for rank, doc_id in enumerate(ranked[:k], start=1):
        if doc_id in gold:
            return 1.0 / rank
    return 0.0


def reciprocal_ranks(ranks: np.ndarray, k: int = 10) -> np.ndarray:
    ranks = np.asarray(ranks)
    return np.where(ranks <= k, 1.0 / np.maximum(ranks, 1), 0.0)


def best_gold_ranks(fused: np.ndarray, doc_order: np.ndarray, gold_mask: np.ndarray) -> np.ndarray:
    """
    Rank of the best gold document after reranking by (fused desc, doc_id asc), for one or many fused score rows.

    :param fused: shape (n,) or (rows, n)
    :return: shape (rows,) integer ranks, 1-based
    """
    scores = np.atleast_2d(fused)
    gold_scores = scores[:, gold_mask]
    gold_order = doc_order[gold_mask]
    best = gold_scores.max(axis=1)
    tied = np.where(gold_scores == best[:, None], gold_order[None, :], np.iinfo(np.int64).max)
    best_doc = tied.min(axis=1)
    above = (scores > best[:, None]).sum(axis=1)
    ties_before = ((scores == best[:, None]) & (doc_order[None, :] < best_doc[:, None])).sum(axis=1)
    return above + ties_before + 1


def prefix_reciprocal_rank(record: QueryRecord, size: int, k: int = 10) -> float:
    """
    Reciprocal rank at k after keeping the first `size` candidates and reranking them.
    """
    record.require_fused()
    kept_gold = record.gold_mask[:size]
    if not kept_gold.any():
        return 0.0
    rank = best_gold_ranks(record.fused_scores[:size], record.doc_order[:size], kept_gold)[0]
    return float(reciprocal_ranks(rank, k))


def mrr_at_k(dataset: Dataset, ordering: Union[Dict[str, Sequence[str]], Sequence[Sequence[str]]], k: int = 10) -> float:
    """
    Mean reciprocal rank at k. Queries with empty gold sets count with reciprocal rank 0.

    :param dataset: the queries and their gold sets
    :param ordering: ranked doc ids per query, keyed by query id or aligned with dataset order
    """
    if dataset.m == 0:
        return 0.0
    total = 0.0
    for i, record in enumerate(dataset):
        if isinstance(ordering, dict):
            if record.query_id not in ordering:
                raise ConfigurationError(f'Ordering has no ranking for query {record.query_id}.')
            ranked = ordering[record.query_id]
        else:
            ranked = ordering[i]
        total += reciprocal_rank_at_k(list(ranked), record.gold_ids, k)
    return total / dataset.m


def full_mrr(dataset: Dataset, k: int = 10) -> float:
    """
    Reranked MRR@k on the full candidate pools.
    """
    if dataset.m == 0:
        return 0.0
    return float(np.mean([prefix_reciprocal_rank(r, len(r), k) for r in dataset]))


def retriever_mrr(dataset: Dataset, k: int = 10) -> float:
    """
    MRR@k of the first-stage order alone.
    """
    if dataset.m == 0:
        return 0.0
    rr = []
    for record in dataset:
        hits = np.flatnonzero(record.gold_mask)
        rr.append(float(reciprocal_ranks(hits[0] + 1, k)) if hits.size else 0.0)
    return float(np.mean(rr))


def pruned_loss(record: QueryRecord, tau: Union[Threshold, float], k: int = 10, metric=None) -> float:
    """
    Loss of one query after pruning at tau and reranking: 1 - RR@k, or 1 - [any gold kept] for recall.
    """
    metric = _resolve(metric, k)
    kept = prune(record, tau)
    if metric.name == 'recall':
        return 0.0 if any(c.doc_id in record.gold_ids for c in kept) else 1.0
    ranked = [c.doc_id for c in rerank(kept, record.query_id)]
    return 1.0 - reciprocal_rank_at_k(ranked, record.gold_ids, metric.k)


def prefix_losses(record: QueryRecord, k: int = 10, metric=None) -> np.ndarray:
    """
    Loss after keeping the first j candidates, for j = 0..n.

    The reranked position of every candidate is fixed by one sort. The best gold position over a growing prefix
    never increases, so candidate i is reranked above the best gold exactly for the prefixes j >= i before the
    best gold overtakes it. Those ranges are found with one binary search each and summed with a difference
    array, which makes the whole sweep O(n log n).

    :return: array of length n + 1
    """
    metric = _resolve(metric, k)
    n = len(record)
    losses = np.ones(n + 1)
    gold_positions = np.flatnonzero(record.gold_mask)
    if gold_positions.size == 0:
        return losses

    if metric.name == 'recall':
        losses[gold_positions[0] + 1:] = 0.0
        return losses

    record.require_fused()
    priority = np.empty(n, dtype=np.int64)
    priority[np.lexsort((record.doc_order, -record.fused_scores))] = np.arange(n)

    # n marks prefixes that hold no gold yet
    best = np.minimum.accumulate(np.where(record.gold_mask, priority, n))
    until = np.maximum(np.searchsorted(-best, -priority, side='left'), np.arange(n))
    diff = np.zeros(n + 1, dtype=np.int64)
    diff[:n] += 1
    np.add.at(diff, until, -1)
    ranks = np.cumsum(diff[:n]) + 1

    reached = best < n
    losses[1:] = np.where(reached & (ranks <= metric.k), 1.0 - 1.0 / ranks, 1.0)
    return losses


class LossCurve(NamedTuple):
    """
    One query's loss as a right-continuous step function of the threshold. thresholds are the distinct calibrated
    scores in descending order; losses[i] and sizes[i] apply for tau in (thresholds[i+1], thresholds[i]]. Above
    thresholds[0] the kept set is empty and the loss is 1.
    """
    thresholds: np.ndarray
    losses: np.ndarray
    sizes: np.ndarray

    @property
    def breakpoints(self) -> List[tuple]:
        return [(float(t), float(l)) for t, l in zip(self.thresholds, self.losses)]

    def index(self, tau: Union[Threshold, float]) -> int:
        return int(np.searchsorted(-self.thresholds, -as_tau(tau), side='right'))

    def evaluate(self, tau: Union[Threshold, float]) -> float:
        count = self.index(tau)
        return 1.0 if count == 0 else float(self.losses[count - 1])

    def size_at(self, tau: Union[Threshold, float]) -> int:
        count = self.index(tau)
        return 0 if count == 0 else int(self.sizes[count - 1])

    def is_monotone(self) -> bool:
        # losses must not increase as tau decreases
        return not np.any(np.diff(np.concatenate(([1.0], self.losses))) > 0)


def loss_curve(record: QueryRecord, k: int = 10, metric=None) -> LossCurve:
    record.require_calibrated()
    calibrated = record.calibrated_scores
    n = len(record)
    if n == 0:
        return LossCurve(np.empty(0), np.empty(0), np.empty(0, dtype=np.int64))
    group_end = np.ones(n, dtype=bool)
    group_end[:-1] = calibrated[1:] != calibrated[:-1]
    sizes = np.flatnonzero(group_end) + 1
    losses = prefix_losses(record, k, metric)
    return LossCurve(thresholds=calibrated[sizes - 1].copy(), losses=losses[sizes], sizes=sizes)


def loss_vector(dataset: Dataset, tau: Union[Threshold, float], k: int = 10, metric=None) -> np.ndarray:
    """
    Per-query losses at a fixed threshold, in dataset order.
    """
    metric = _resolve(metric, k)
    return np.array([prefix_losses(r, metric=metric)[r.size_at(tau)] for r in dataset], dtype=np.float64)


def monotonicity_violations(curves: Iterable[LossCurve]) -> float:
    """
    Fraction of per-query curves whose loss goes up somewhere as the threshold goes down.
    """
    flags = [not c.is_monotone() for c in curves]
    if not flags:
        return 0.0
    return float(np.mean(flags))
