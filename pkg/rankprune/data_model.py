"""
Core domain types shared by every module.

Thresholds are kept as calibrated-score cutoffs tau in [0, 1]. A pruning function keeps the candidates whose
calibrated score is at least tau, so a larger tau gives a smaller set. The risk-control index lambda used in the
literature is the negated cutoff, lambda = -tau, which makes T_lambda grow with lambda. Every public report prints
tau.
"""

from typing import Any, Dict, Iterable, Iterator, List, NamedTuple, Optional, Sequence, Union
import numpy as np

from rankprune.errors import ConfigurationError

CORRECTIONS = ('none', 'risk', 'confidence')


class Candidate(NamedTuple):
    doc_id: str
    retriever_score: float
    calibrated_score: Optional[float] = None
    reranker_score: float = float('-inf')
    fused_score: Optional[float] = None
    reranker_missing: bool = False


class Threshold(NamedTuple):
    tau: float

    @property
    def lam(self) -> float:
        return -self.tau


def as_tau(tau: Union[Threshold, float]) -> float:
    if isinstance(tau, Threshold):
        return float(tau.tau)
    return float(tau)


def _frozen(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


class QueryRecord(object):
    """
    A query, its first-stage candidate pool and its judged gold set.

    Scores are stored column-wise as read-only numpy arrays, ordered by (calibrated desc, doc_id asc) once
    calibrated scores exist and by (retriever desc, doc_id asc) before that. The `candidates` property gives the
    same data as Candidate tuples.
    """

    __slots__ = (
        'query_id', 'doc_ids', 'retriever_scores', 'reranker_scores', 'calibrated_scores', 'fused_scores',
        'reranker_missing', 'gold_ids', 'gold_mask', 'doc_order', '_candidates'
    )

    def __init__(
        self,
        query_id: str,
        doc_ids: Sequence[str],
        retriever_scores: Sequence[float],
        reranker_scores: Sequence[float] = None,
        gold_ids: Iterable[str] = (),
        calibrated_scores: Sequence[float] = None,
        fused_scores: Sequence[float] = None,
        reranker_missing: Sequence[bool] = None
    ):
        doc_ids = np.array([str(d) for d in doc_ids], dtype=str)
        n = len(doc_ids)
        retriever_scores = np.asarray(retriever_scores, dtype=np.float64)
        if reranker_scores is None:
            reranker_scores = np.full(n, -np.inf)
            reranker_missing = np.ones(n, dtype=bool)
        reranker_scores = np.asarray(reranker_scores, dtype=np.float64)
        if reranker_missing is None:
            reranker_missing = np.isneginf(reranker_scores)
        reranker_missing = np.asarray(reranker_missing, dtype=bool)

        columns = [retriever_scores, reranker_scores, reranker_missing]
        if calibrated_scores is not None:
            calibrated_scores = np.asarray(calibrated_scores, dtype=np.float64)
            columns.append(calibrated_scores)
        if fused_scores is not None:
            fused_scores = np.asarray(fused_scores, dtype=np.float64)
            columns.append(fused_scores)
        if any(len(c) != n for c in columns):
            raise ConfigurationError(f'Query {query_id}: score columns do not match the number of documents.')

        by_doc = np.argsort(doc_ids, kind='stable')
        if n > 1 and np.any(doc_ids[by_doc][1:] == doc_ids[by_doc][:-1]):
            raise ConfigurationError(f'Query {query_id}: duplicate document ids in the candidate pool.')
        doc_order = np.empty(n, dtype=np.int64)
        doc_order[by_doc] = np.arange(n)

        primary = calibrated_scores if calibrated_scores is not None else retriever_scores
        order = np.lexsort((doc_order, -primary))

        self.query_id = str(query_id)
        self.doc_ids = doc_ids[order]
        self.doc_ids.setflags(write=False)
        self.retriever_scores = _frozen(retriever_scores[order])
        self.reranker_scores = _frozen(reranker_scores[order])
        self.reranker_missing = _frozen(reranker_missing[order], dtype=bool)
        self.calibrated_scores = _frozen(calibrated_scores[order]) if calibrated_scores is not None else None
        self.fused_scores = _frozen(fused_scores[order]) if fused_scores is not None else None
        self.doc_order = _frozen(np.argsort(np.argsort(self.doc_ids, kind='stable'), kind='stable'), dtype=np.int64)
        self.gold_ids = frozenset(str(g) for g in gold_ids)
        self.gold_mask = _frozen(np.isin(self.doc_ids, list(self.gold_ids)), dtype=bool)
        self._candidates = None

    @classmethod
    def from_candidates(cls, query_id: str, candidates: Iterable[Candidate], gold_ids: Iterable[str] = ()):
        candidates = list(candidates)
        calibrated = [c.calibrated_score for c in candidates]
        fused = [c.fused_score for c in candidates]
        return cls(
            query_id=query_id,
            doc_ids=[c.doc_id for c in candidates],
            retriever_scores=[c.retriever_score for c in candidates],
            reranker_scores=[c.reranker_score for c in candidates],
            reranker_missing=[c.reranker_missing for c in candidates],
            gold_ids=gold_ids,
            calibrated_scores=None if any(c is None for c in calibrated) else calibrated,
            fused_scores=None if any(f is None for f in fused) else fused
        )

    def __len__(self) -> int:
        return len(self.doc_ids)

    def __repr__(self) -> str:
        return f'QueryRecord(query_id={self.query_id!r}, n={len(self)}, gold={sorted(self.gold_ids)!r})'

    @property
    def candidates(self) -> List[Candidate]:
        if self._candidates is None:
            cal = self.calibrated_scores
            fused = self.fused_scores
            self._candidates = tuple(
                Candidate(
                    doc_id=str(self.doc_ids[i]),
                    retriever_score=float(self.retriever_scores[i]),
                    calibrated_score=float(cal[i]) if cal is not None else None,
                    reranker_score=float(self.reranker_scores[i]),
                    fused_score=float(fused[i]) if fused is not None else None,
                    reranker_missing=bool(self.reranker_missing[i])
                ) for i in range(len(self))
            )
        return list(self._candidates)

    @property
    def has_gold_in_pool(self) -> bool:
        return bool(self.gold_mask.any())

    def require_calibrated(self):
        if self.calibrated_scores is None:
            raise ConfigurationError(f'Query {self.query_id} has no calibrated scores. Calibrate the dataset first.')

    def require_fused(self):
        if self.fused_scores is None:
            raise ConfigurationError(f'Query {self.query_id} has no fused scores. Run fusion first.')

    def size_at(self, tau: Union[Threshold, float]) -> int:
        """
        Number of candidates kept at the threshold. Since candidates are sorted by calibrated score this is also the
        length of the kept prefix.
        """
        self.require_calibrated()
        return int(np.searchsorted(-self.calibrated_scores, -as_tau(tau), side='right'))

    def with_scores(self, calibrated_scores: Sequence[float] = None, fused_scores: Sequence[float] = None):
        """
        Returns a new record with new calibrated and/or fused columns, aligned with the current candidate order.
        """
        return QueryRecord(
            query_id=self.query_id,
            doc_ids=self.doc_ids,
            retriever_scores=self.retriever_scores,
            reranker_scores=self.reranker_scores,
            gold_ids=self.gold_ids,
            calibrated_scores=calibrated_scores if calibrated_scores is not None else self.calibrated_scores,
            fused_scores=fused_scores if fused_scores is not None else self.fused_scores,
            reranker_missing=self.reranker_missing
        )


class Dataset(object):
    """
    An ordered collection of QueryRecords with unique query ids. `m` is the number of records.
    """

    def __init__(self, records: Iterable[QueryRecord], metadata: Dict[str, Any] = None):
        self.records = tuple(records)
        self.metadata = dict(metadata or {})
        seen = set()
        for record in self.records:
            if record.query_id in seen:
                raise ConfigurationError(f'Duplicate query id {record.query_id} in dataset.')
            seen.add(record.query_id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[QueryRecord]:
        return iter(self.records)

    def __getitem__(self, item) -> QueryRecord:
        return self.records[item]

    def __repr__(self) -> str:
        return f'Dataset(m={self.m}, pool_size={self.pool_size}, beta={self.metadata.get("beta")})'

    @property
    def m(self) -> int:
        return len(self.records)

    @property
    def query_ids(self) -> List[str]:
        return [r.query_id for r in self.records]

    @property
    def pool_size(self) -> int:
        if 'pool_size' in self.metadata:
            return int(self.metadata['pool_size'])
        return max((len(r) for r in self.records), default=0)

    @property
    def has_calibrated(self) -> bool:
        return len(self.records) > 0 and all(r.calibrated_scores is not None for r in self.records)

    @property
    def has_fused(self) -> bool:
        return len(self.records) > 0 and all(r.fused_scores is not None for r in self.records)

    @property
    def unreachable_count(self) -> int:
        return sum(1 for r in self.records if not r.has_gold_in_pool)

    @property
    def missing_reranker_count(self) -> int:
        return int(sum(int(r.reranker_missing.sum()) for r in self.records))

    def subset(self, indices: Sequence[int]):
        return Dataset([self.records[i] for i in indices], self.metadata)

    def replace(self, records: Iterable[QueryRecord], **metadata):
        updated = dict(self.metadata)
        updated.update(metadata)
        return Dataset(records, updated)


class RiskCurve(NamedTuple):
    thresholds: np.ndarray
    empirical_risk: np.ndarray
    ucb: np.ndarray
    mean_size: np.ndarray
    delta: float

    def __len__(self) -> int:
        return len(self.thresholds)


class CalibrationResult(NamedTuple):
    threshold_hat: Threshold
    alpha_requested: float
    alpha_effective: float
    delta_requested: float
    delta_effective: float
    correction: str = 'none'
    achievable: bool = True
    alpha_corrected: Optional[float] = None
    risk_threshold: Optional[Threshold] = None
    ucb_at_threshold: Optional[float] = None
    empirical_risk_at_threshold: Optional[float] = None
    mean_size_at_threshold: Optional[float] = None
    metric: str = 'mrr@10'
    bound: str = 'wsr'
    m: int = 0
    unreachable: int = 0
    monotonicity_violation_rate: float = 0.0

    @property
    def confidence(self) -> float:
        return 1.0 - self.delta_effective

    def to_dict(self) -> Dict[str, Any]:
        out = self._asdict()
        out['threshold_hat'] = self.threshold_hat.tau
        out['risk_threshold'] = self.risk_threshold.tau if self.risk_threshold is not None else None
        out['confidence'] = self.confidence
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, Any]):
        values = {k: data[k] for k in cls._fields if k in data}
        values['threshold_hat'] = Threshold(float(values['threshold_hat']))
        if values.get('risk_threshold') is not None:
            values['risk_threshold'] = Threshold(float(values['risk_threshold']))
        return cls(**values)


class TrialReport(NamedTuple):
    seed: int
    mrr_at_10: float
    mean_pruned_size: float
    constraint_satisfied: bool
    calibration: Optional[CalibrationResult]
    trial: int = 0
    method: str = 'cec'
    test_risk: float = 1.0
    alpha_effective: float = 1.0
    rank_cutoff: Optional[int] = None
    full_mrr: Optional[float] = None
    retriever_mrr: Optional[float] = None
    unreachable: int = 0

    def to_dict(self) -> Dict[str, Any]:
        out = self._asdict()
        out['calibration'] = self.calibration.to_dict() if self.calibration is not None else None
        return out


def prune(record: QueryRecord, tau: Union[Threshold, float]) -> List[Candidate]:
    """
    Keeps the candidates whose calibrated score is at least tau. The result is a prefix of the candidate list.

    :param record: A calibrated QueryRecord
    :param tau: The calibrated-score cutoff
    :return: The kept candidates in their original order
    """
    size = record.size_at(tau)
    return record.candidates[:size]


def rerank(pruned: List[Candidate], query_id: str = None) -> List[Candidate]:
    """
    Orders candidates by (fused score desc, doc_id asc).
    """
    where = f'Query {query_id}: ' if query_id is not None else ''
    for candidate in pruned:
        if candidate.fused_score is None:
            raise ConfigurationError(f'{where}candidate {candidate.doc_id} has no fused score. Run fusion first.')
    return sorted(pruned, key=lambda c: (-c.fused_score, c.doc_id))
