"""
Serialization helpers: the dataset snapshot format, JSON output, seeds and the versioned settings file.

Snapshot format (UTF-8, one JSON object per line):

    {"format": "rankprune.snapshot", "version": 1, "metadata": {...}}
    {"query_id": "7", "gold_ids": ["d3"], "calibrated": true, "fused": true,
     "candidates": [["d3", 12.5, 4.1, 0.93, 0.88], ...]}

Candidate tuples are [doc_id, retriever_score, reranker_score, calibrated_score, fused_score]. A null reranker
score marks a candidate the reranker never scored; a null fused score on a fused record is a -inf fused score.
"""

import json
import math
from typing import Any, Dict, Iterable, Iterator

import numpy as np
import yaml

from rankprune.data_model import Dataset, QueryRecord
from rankprune.errors import ConfigurationError, InputError, ParseError

SNAPSHOT_FORMAT = 'rankprune.snapshot'
SNAPSHOT_VERSION = 1
SETTINGS_VERSION = 1


def json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    if hasattr(obj, '_asdict'):
        return obj._asdict()
    raise TypeError(f'{type(obj).__name__} is not JSON serializable')


def dumps(obj: Any) -> str:
    return json.dumps(obj, default=json_default, sort_keys=True)


def _finite_or_none(value: float):
    return None if value is None or not math.isfinite(value) else float(value)


def dataset_encoder(dataset: Dataset) -> Iterator[str]:
    """
    Encodes a dataset as snapshot lines.

    :param dataset: any Dataset
    :return: an iterator of JSON lines, header first
    """
    yield dumps({'format': SNAPSHOT_FORMAT, 'version': SNAPSHOT_VERSION, 'metadata': dataset.metadata})
    for record in dataset:
        calibrated = record.calibrated_scores
        fused = record.fused_scores
        candidates = []
        for i in range(len(record)):
            candidates.append([
                str(record.doc_ids[i]),
                float(record.retriever_scores[i]),
                None if record.reranker_missing[i] else _finite_or_none(record.reranker_scores[i]),
                float(calibrated[i]) if calibrated is not None else None,
                _finite_or_none(fused[i]) if fused is not None else None
            ])
        yield dumps({
            'query_id': record.query_id,
            'gold_ids': sorted(record.gold_ids),
            'calibrated': calibrated is not None,
            'fused': fused is not None,
            'candidates': candidates
        })


def dataset_decoder(lines: Iterable, name: str = 'snapshot') -> Dataset:
    """
    Decodes snapshot lines back into a Dataset.
    """
    metadata = None
    records = []
    for number, line in enumerate(lines, start=1):
        if isinstance(line, bytes):
            try:
                line = line.decode('utf-8')
            except UnicodeDecodeError:
                raise ParseError('line is not valid UTF-8', number, name)
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except ValueError as e:
            raise ParseError(f'invalid JSON: {e}', number, name)

        if metadata is None:
            if obj.get('format') != SNAPSHOT_FORMAT:
                raise ParseError('missing snapshot header', number, name)
            if obj.get('version') != SNAPSHOT_VERSION:
                raise ParseError(f'unsupported snapshot version {obj.get("version")}', number, name)
            metadata = obj.get('metadata') or {}
            continue

        try:
            records.append(_decode_record(obj))
        except (KeyError, TypeError, ValueError, IndexError) as e:
            raise ParseError(f'malformed query record: {e}', number, name)

    if metadata is None:
        raise ParseError('empty snapshot', None, name)
    return Dataset(records, metadata)


def _decode_record(obj: Dict) -> QueryRecord:
    rows = obj['candidates']
    calibrated = obj.get('calibrated', False)
    fused = obj.get('fused', False)
    return QueryRecord(
        query_id=obj['query_id'],
        doc_ids=[row[0] for row in rows],
        retriever_scores=[float(row[1]) for row in rows],
        reranker_scores=[-math.inf if row[2] is None else float(row[2]) for row in rows],
        reranker_missing=[row[2] is None for row in rows],
        gold_ids=obj.get('gold_ids', ()),
        calibrated_scores=[float(row[3]) for row in rows] if calibrated else None,
        fused_scores=[-math.inf if row[4] is None else float(row[4]) for row in rows] if fused else None
    )


def save_dataset(dataset: Dataset, path: str):
    try:
        with open(path, 'w', encoding='utf-8') as f:
            for line in dataset_encoder(dataset):
                f.write(line + '\n')
    except OSError as e:
        raise InputError(f'cannot write {path}: {e}')


def load_dataset(path: str) -> Dataset:
    try:
        with open(path, 'rb') as f:
            return dataset_decoder(f, name=path)
    except OSError as e:
        raise InputError(f'cannot read {path}: {e}')


def write_json(obj: Any, path: str):
    try:
        with open(path, 'w', encoding='utf-8') as f:
            f.write(json.dumps(obj, default=json_default, sort_keys=True, indent=2) + '\n')
    except OSError as e:
        raise InputError(f'cannot write {path}: {e}')


def read_json(path: str) -> Dict:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except OSError as e:
        raise InputError(f'cannot read {path}: {e}')
    except ValueError as e:
        raise ParseError(f'invalid JSON: {e}', None, path)


def write_jsonl(rows: Iterable[Any], path: str):
    try:
        with open(path, 'w', encoding='utf-8') as f:
            for row in rows:
                f.write(dumps(row) + '\n')
    except OSError as e:
        raise InputError(f'cannot write {path}: {e}')


def trial_seed(master_seed: int, trial: int) -> int:
    """
    Counter-based seed for one trial: depends only on (master_seed, trial), so trials can run in any order.
    """
    return int(np.random.SeedSequence([int(master_seed), int(trial)]).generate_state(1, dtype=np.uint32)[0])


def load_yaml(path: str, kind: str) -> Dict[str, Any]:
    """
    Loads a versioned YAML mapping and returns it without the version key, with dashes in keys turned into
    underscores.
    """
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise InputError(f'cannot read {path}: {e}')
    except yaml.YAMLError as e:
        raise ParseError(f'invalid YAML: {e}', None, path)

    if not isinstance(data, dict):
        raise ConfigurationError(f'{kind} file {path} must contain a mapping')
    version = data.pop('version', None)
    if version != SETTINGS_VERSION:
        raise ConfigurationError(f'{kind} file {path} must declare version: {SETTINGS_VERSION}, found {version!r}')
    return {str(k).replace('-', '_'): v for k, v in data.items()}


def check_keys(values: Dict[str, Any], allowed: Iterable[str], kind: str):
    unknown = sorted(set(values) - set(allowed))
    if unknown:
        raise ConfigurationError(f'Unknown {kind} keys: {", ".join(unknown)}')
