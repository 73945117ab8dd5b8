"""
Reads standard retrieval artifacts (TREC run files and qrels), joins retriever and reranker scores into a Dataset,
Platt-scales retriever scores and applies evidence fusion.
"""

import logging
import math
from collections import defaultdict
from typing import BinaryIO, Dict, Iterable, Iterator, List, NamedTuple, Optional, Set, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import expit

from rankprune.data_model import Dataset, QueryRecord
from rankprune.errors import CalibrationError, ConfigurationError, ParseError
from rankprune.metrics import best_gold_ranks, reciprocal_ranks

logger = logging.getLogger(__name__)


class RunEntry(NamedTuple):
    query_id: str
    doc_id: str
    rank: int
    score: float
    tag: str = ''


class PlattModel(NamedTuple):
    """
    calibrated probability = 1 / (1 + exp(a * s + b)). A negative slope maps higher raw scores to higher
    probabilities.
    """
    a: float
    b: float
    intercept_only: bool = False
    iterations: int = 0

    def transform(self, scores) -> np.ndarray:
        scores = np.asarray(scores, dtype=np.float64)
        return expit(-(self.a * scores + self.b))


class SystemFit(NamedTuple):
    """
    Everything learned from calibration data that turns raw scores into calibrated and fused scores.
    """
    beta: float
    rr_low: float
    rr_high: float
    platt: Optional[PlattModel] = None
    scaling: str = 'platt'
    retriever_low: float = 0.0
    retriever_high: float = 1.0

    def to_dict(self) -> Dict:
        out = self._asdict()
        out['platt'] = self.platt._asdict() if self.platt is not None else None
        return out

    @classmethod
    def from_dict(cls, data: Dict):
        values = dict(data)
        if values.get('platt') is not None:
            values['platt'] = PlattModel(**values['platt'])
        return cls(**values)


def _lines(source: Iterable, name: str) -> Iterator[Tuple[int, List[str]]]:
    for number, line in enumerate(source, start=1):
        if isinstance(line, bytes):
            try:
                line = line.decode('utf-8')
            except UnicodeDecodeError:
                raise ParseError('line is not valid UTF-8', number, name)
        fields = line.split()
        if fields:
            yield number, fields


def parse_run(source: BinaryIO, name: str = 'run') -> Dict[str, List[RunEntry]]:
    """
    Parses a run file with lines `qid Q0 docid rank score tag`.

    :param source: A byte stream (or any iterable of lines)
    :param name: Name used in error messages
    :return: entries grouped by query id, each list sorted by rank
    """
    grouped = defaultdict(list)
    seen_docs = set()
    seen_ranks = set()
    for number, fields in _lines(source, name):
        if len(fields) != 6:
            raise ParseError(f'expected 6 fields, found {len(fields)}', number, name)
        qid, q0, doc_id, rank, score, tag = fields
        if q0 != 'Q0':
            raise ParseError(f'expected literal Q0 in the second column, found {q0!r}', number, name)
        try:
            rank = int(rank)
            score = float(score)
        except ValueError:
            raise ParseError('rank must be an integer and score a real number', number, name)
        if rank < 1:
            raise ParseError(f'rank must be positive, found {rank}', number, name)
        if (qid, doc_id) in seen_docs:
            raise ParseError(f'duplicate entry for query {qid} and document {doc_id}', number, name)
        if (qid, rank) in seen_ranks:
            raise ParseError(f'duplicate rank {rank} for query {qid}', number, name)
        seen_docs.add((qid, doc_id))
        seen_ranks.add((qid, rank))
        grouped[qid].append(RunEntry(qid, doc_id, rank, score, tag))

    return {qid: sorted(grouped[qid], key=lambda e: e.rank) for qid in sorted(grouped)}


def parse_qrels(source: BinaryIO, name: str = 'qrels') -> Dict[str, Set[Tuple[str, int]]]:
    """
    Parses a qrels file with lines `qid iteration docid relevance`.
    """
    grouped = defaultdict(set)
    seen = set()
    for number, fields in _lines(source, name):
        if len(fields) != 4:
            raise ParseError(f'expected 4 fields, found {len(fields)}', number, name)
        qid, _, doc_id, rel = fields
        try:
            rel = int(rel)
        except ValueError:
            raise ParseError(f'relevance must be an integer, found {rel!r}', number, name)
        if (qid, doc_id) in seen:
            raise ParseError(f'duplicate judgement for query {qid} and document {doc_id}', number, name)
        seen.add((qid, doc_id))
        grouped[qid].add((doc_id, rel))
    return {qid: grouped[qid] for qid in sorted(grouped)}


def gold_ids(qrels: Dict[str, Set[Tuple[str, int]]], query_id: str) -> Set[str]:
    # binary judgements: relevant at rel >= 1
    return {doc for doc, rel in qrels.get(query_id, ()) if rel >= 1}


def build_dataset(
    retriever_run: Dict[str, List[RunEntry]],
    reranker_run: Dict[str, List[RunEntry]],
    qrels: Dict[str, Set[Tuple[str, int]]],
    pool_size: int = 1000,
    sources: Dict[str, str] = None
) -> Dataset:
    """
    Joins the top `pool_size` retriever candidates of every query with their reranker scores and gold labels.
    Candidates the reranker never scored get a -inf reranker score and are flagged.
    """
    if pool_size < 1:
        raise ConfigurationError(f'pool_size must be positive, got {pool_size}')

    known = {(qid, e.doc_id) for qid, entries in retriever_run.items() for e in entries}
    for qid, entries in reranker_run.items():
        for e in entries:
            if (qid, e.doc_id) not in known:
                raise ConfigurationError(
                    f'Reranker score for query {qid} and document {e.doc_id} has no retriever candidate.'
                )

    records = []
    missing = 0
    for qid in sorted(retriever_run):
        pool = sorted(retriever_run[qid], key=lambda e: e.rank)[:pool_size]
        rr = {e.doc_id: e.score for e in reranker_run.get(qid, ())}
        flags = [e.doc_id not in rr for e in pool]
        missing += sum(flags)
        records.append(QueryRecord(
            query_id=qid,
            doc_ids=[e.doc_id for e in pool],
            retriever_scores=[e.score for e in pool],
            reranker_scores=[rr.get(e.doc_id, -math.inf) for e in pool],
            reranker_missing=flags,
            gold_ids=gold_ids(qrels, qid)
        ))

    dataset = Dataset(records, {'pool_size': pool_size, 'sources': dict(sources or {}), 'beta': None})
    if missing:
        logger.warning(f'{missing} candidates have no reranker score and were flagged.')
    if dataset.unreachable_count:
        logger.warning(f'{dataset.unreachable_count} of {dataset.m} queries have no gold document in the pool.')
    return dataset


def _nll(theta: torch.Tensor, z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    # P(positive) = sigmoid(-(a z + b))
    return F.binary_cross_entropy_with_logits(-(theta[0] * z + theta[1]), y, reduction='sum')


def fit_platt(
    scores,
    labels,
    max_iter: int = 100,
    tol: float = 1e-8,
    verbose: int = 0
) -> PlattModel:
    """
    Fits a Platt model by damped Newton iterations on the logistic negative log-likelihood against Platt's smoothed
    targets, (N+ + 1) / (N+ + 2) for gold and 1 / (N- + 2) otherwise, which keep the optimum finite when the classes
    are separable. Scores are standardized for the fit and the parameters mapped back. The slope is constrained to be
    non-positive so the calibrated score never reverses the retriever order; degenerate inputs fall back to an
    intercept-only fit.

    :param scores: raw retriever scores
    :param labels: booleans, True for gold documents
    :param max_iter: maximum Newton iterations
    :param tol: convergence tolerance on the parameter change
    :return: A PlattModel
    """
    s = np.asarray(scores, dtype=np.float64)
    y_np = np.asarray(labels, dtype=bool)
    if s.shape != y_np.shape:
        raise ConfigurationError('scores and labels must have the same length')
    n_pos = int(y_np.sum())
    n_neg = len(y_np) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise CalibrationError(
            'Platt scaling needs at least one positive and one negative label; '
            'skip calibration scaling (use scaling="minmax") for this data.'
        )

    intercept = math.log(n_neg / n_pos)
    spread = float(s.std())
    if spread == 0.0 or not np.isfinite(spread):
        logger.warning('Constant retriever scores: Platt scaling falls back to an intercept-only fit.')
        return PlattModel(a=0.0, b=intercept, intercept_only=True)

    center = float(s.mean())
    z = torch.from_numpy((s - center) / spread)
    hi_target = (n_pos + 1.0) / (n_pos + 2.0)
    lo_target = 1.0 / (n_neg + 2.0)
    y = torch.from_numpy(np.where(y_np, hi_target, lo_target))
    theta = torch.tensor([0.0, intercept], dtype=torch.float64)
    ridge = torch.eye(2, dtype=torch.float64) * 1e-12
    loss = _nll(theta, z, y)

    iteration = 0
    for iteration in range(1, max_iter + 1):
        x = theta[0] * z + theta[1]
        p = torch.sigmoid(-x)
        w = p * (1.0 - p)
        r = y - p
        grad = torch.stack([(r * z).sum(), r.sum()])
        hess = torch.stack([
            torch.stack([(w * z * z).sum(), (w * z).sum()]),
            torch.stack([(w * z).sum(), w.sum()])
        ])
        step = -torch.linalg.solve(hess + ridge * (1.0 + hess.trace()), grad)

        t = 1.0
        while True:
            candidate = theta + t * step
            candidate_loss = _nll(candidate, z, y)
            if candidate_loss <= loss or t < 1e-10:
                break
            t *= 0.5

        change = float((t * step).abs().max())
        theta, loss = candidate, candidate_loss
        if verbose:
            logger.info(f'Platt iteration: {iteration}. NLL: {float(loss)}. Change: {change}')
        if change < tol:
            break

    a_z, b_z = float(theta[0]), float(theta[1])
    if a_z > 0.0:
        logger.warning('Platt fit produced an order-reversing slope; falling back to an intercept-only fit.')
        return PlattModel(a=0.0, b=intercept, intercept_only=True, iterations=iteration)

    a = a_z / spread
    b = b_z - a_z * center / spread
    return PlattModel(a=a, b=b, intercept_only=False, iterations=iteration)


def reranker_bounds(dataset: Dataset) -> Tuple[float, float]:
    finite = [r.reranker_scores[~r.reranker_missing] for r in dataset]
    finite = np.concatenate(finite) if finite else np.empty(0)
    if finite.size == 0:
        raise ConfigurationError('No reranker scores present; fusion needs at least one scored candidate.')
    return float(finite.min()), float(finite.max())


def normalize_reranker(scores: np.ndarray, missing: np.ndarray, low: float, high: float) -> np.ndarray:
    if high > low:
        normalized = (scores - low) / (high - low)
    else:
        normalized = np.zeros_like(scores)
    return np.where(missing, -np.inf, normalized)


def fused_scores(beta: float, calibrated: np.ndarray, normalized: np.ndarray, missing: np.ndarray) -> np.ndarray:
    if beta == 1.0:
        return np.array(calibrated, dtype=np.float64)
    fused = beta * calibrated + (1.0 - beta) * normalized
    return np.where(missing, -np.inf, fused)


def fuse(dataset: Dataset, beta: float, bounds: Tuple[float, float] = None) -> Dataset:
    """
    Sets fused = beta * calibrated retriever score + (1 - beta) * min-max normalized reranker score on every
    candidate.

    :param dataset: A calibrated dataset with reranker scores
    :param beta: Fusion weight in [0, 1]
    :param bounds: (low, high) used for reranker normalization. Defaults to the dataset's own range.
    :return: A new Dataset with fused scores
    """
    if not 0.0 <= beta <= 1.0:
        raise ConfigurationError(f'beta must lie in [0, 1], got {beta}')
    low, high = bounds if bounds is not None else reranker_bounds(dataset)
    records = []
    for record in dataset:
        record.require_calibrated()
        normalized = normalize_reranker(record.reranker_scores, record.reranker_missing, low, high)
        records.append(record.with_scores(
            fused_scores=fused_scores(beta, record.calibrated_scores, normalized, record.reranker_missing)
        ))
    return dataset.replace(records, beta=float(beta), rr_bounds=[float(low), float(high)])


def beta_grid(grid_step: float) -> np.ndarray:
    if not 0.0 < grid_step <= 1.0:
        raise ConfigurationError(f'beta grid step must lie in (0, 1], got {grid_step}')
    count = int(math.floor(1.0 / grid_step + 1e-9))
    grid = np.round(np.arange(count + 1) * grid_step, 12)
    if grid[-1] < 1.0:
        grid = np.append(grid, 1.0)
    return grid


def search_beta(
    calib: Dataset,
    grid_step: float = 0.01,
    k: int = 10,
    bounds: Tuple[float, float] = None
) -> Tuple[float, float]:
    """
    Picks the fusion weight with the best full-pool reranked MRR@k on the calibration set. Ties go to the smaller
    beta.

    :return: (beta_star, MRR@k at beta_star)
    """
    if calib.m == 0:
        raise ConfigurationError('beta search needs a non-empty calibration set')
    betas = beta_grid(grid_step)
    low, high = bounds if bounds is not None else reranker_bounds(calib)

    rr = np.zeros((len(betas), calib.m))
    for j, record in enumerate(calib):
        record.require_calibrated()
        if not record.has_gold_in_pool:
            continue
        normalized = normalize_reranker(record.reranker_scores, record.reranker_missing, low, high)
        fused = np.stack([
            fused_scores(b, record.calibrated_scores, normalized, record.reranker_missing) for b in betas
        ])
        rr[:, j] = reciprocal_ranks(best_gold_ranks(fused, record.doc_order, record.gold_mask), k)

    mrr = rr.mean(axis=1)
    best = int(np.argmax(mrr))
    return float(betas[best]), float(mrr[best])


def calibrate_scores(dataset: Dataset, system: SystemFit) -> Dataset:
    records = []
    for record in dataset:
        if system.scaling == 'platt':
            calibrated = system.platt.transform(record.retriever_scores)
        else:
            span = system.retriever_high - system.retriever_low
            if span > 0:
                calibrated = (record.retriever_scores - system.retriever_low) / span
            else:
                calibrated = np.ones(len(record))
            calibrated = np.clip(calibrated, 0.0, 1.0)
        records.append(record.with_scores(calibrated_scores=calibrated))
    platt = system.platt._asdict() if system.platt is not None else None
    return dataset.replace(records, platt=platt, scaling=system.scaling)


def fit_system(
    calib: Dataset,
    beta_step: float = 0.01,
    k: int = 10,
    scaling: str = 'platt',
    beta: float = None,
    verbose: int = 0
) -> SystemFit:
    """
    Learns score calibration, reranker normalization and the fusion weight from calibration data only.

    :param calib: Calibration dataset with raw retriever and reranker scores
    :param beta_step: Grid step of the beta search
    :param k: MRR cutoff used by the beta search
    :param scaling: 'platt' or 'minmax'
    :param beta: A fixed fusion weight. Skips the search when given.
    :return: A SystemFit
    """
    if calib.m == 0:
        raise ConfigurationError('cannot fit a ranking system on an empty calibration set')
    if scaling not in ('platt', 'minmax'):
        raise ConfigurationError(f'scaling must be platt or minmax, got {scaling}')

    scores = np.concatenate([r.retriever_scores for r in calib])
    platt = None
    if scaling == 'platt':
        labels = np.concatenate([r.gold_mask for r in calib])
        platt = fit_platt(scores, labels, verbose=verbose)

    low, high = reranker_bounds(calib) if beta != 1.0 else (0.0, 1.0)
    system = SystemFit(
        beta=1.0 if beta is None else float(beta),
        rr_low=low,
        rr_high=high,
        platt=platt,
        scaling=scaling,
        retriever_low=float(scores.min()),
        retriever_high=float(scores.max())
    )
    if beta is None:
        calibrated = calibrate_scores(calib, system)
        best, mrr = search_beta(calibrated, beta_step, k, bounds=(low, high))
        system = system._replace(beta=best)
        if verbose:
            logger.info(f'Beta search: beta={best}, calibration MRR@{k}={mrr:.4f}')
    return system


def apply_system(dataset: Dataset, system: SystemFit) -> Dataset:
    """
    Applies frozen calibration and fusion transforms to any dataset.
    """
    calibrated = calibrate_scores(dataset, system)
    return fuse(calibrated, system.beta, bounds=(system.rr_low, system.rr_high))
