import json
import logging
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError
from .types import ScoredImpression


logger = logging.getLogger(__name__)

METRICS = ('auc', 'mrr', 'ndcg@5', 'ndcg@10')


def _check(s: ScoredImpression):
    if s.scores.shape != s.labels.shape or s.scores.ndim != 1:
        raise ContractError(f'scores {s.scores.shape} and labels {s.labels.shape} must be equal-length vectors')


def auc(s: ScoredImpression) -> float:
    '''
    Probability that a random positive outscores a random negative, ties
    counting one half, from the mid-rank (Mann-Whitney) statistic.
    '''
    _check(s)
    positives = int((s.labels == 1).sum())
    negatives = len(s.labels) - positives
    if not positives or not negatives:
        raise ContractError('auc needs at least one positive and one negative')
    ranks = rankdata(s.scores, method='average')
    return float((ranks[s.labels == 1].sum() - positives * (positives + 1) / 2) / (positives * negatives))


def _ranking(s: ScoredImpression) -> np.ndarray:
    # descending score, ties broken by original index
    return np.argsort(-s.scores, kind='stable')


def mrr(s: ScoredImpression) -> float:
    '''Mean reciprocal rank over every positive of the impression.'''
    _check(s)
    ranked = s.labels[_ranking(s)]
    ranks = np.flatnonzero(ranked == 1) + 1
    if not len(ranks):
        raise ContractError('mrr needs at least one positive')
    return float(np.mean(1.0 / ranks))


def _dcg(labels: np.ndarray, k: int) -> float:
    gains = (2.0 ** labels[:k] - 1.0)
    return float((gains / np.log2(np.arange(2, len(gains) + 2))).sum())


def ndcg_at(s: ScoredImpression, k: int) -> float:
    _check(s)
    if k <= 0:
        raise ContractError(f'ndcg cutoff must be positive, got {k}')
    if not (s.labels == 1).any():
        raise ContractError('ndcg needs at least one positive')
    ideal = _dcg(np.sort(s.labels)[::-1], k)
    return _dcg(s.labels[_ranking(s)], k) / ideal


@dataclass
class MetricSummary:
    mean: float
    std: float
    n: int


@dataclass
class MetricReport:
    metrics: 'OrderedDict[str, MetricSummary]'
    impressions: int
    excluded: Dict[str, int] = field(default_factory=dict)

    def __getitem__(self, name: str) -> float:
        return self.metrics[name].mean

    def to_dict(self) -> dict:
        return {
            'impressions': self.impressions,
            'excluded': dict(self.excluded),
            'metrics': OrderedDict(
                (name, {'mean': m.mean, 'std': m.std, 'n': m.n}) for name, m in self.metrics.items()),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        lines = [f'{"metric":<10}{"mean":>10}{"std":>10}{"n":>8}']
        for name, m in self.metrics.items():
            lines.append(f'{name:<10}{m.mean:>10.4f}{m.std:>10.4f}{m.n:>8}')
        for reason, count in self.excluded.items():
            lines.append(f'excluded {reason}: {count}')
        return '\n'.join(lines)


def _impression_metrics(s: ScoredImpression) -> Dict[str, Optional[float]]:
    has_pos = bool((s.labels == 1).any())
    has_neg = bool((s.labels == 0).any())
    return {
        'auc': auc(s) if has_pos and has_neg else None,
        'mrr': mrr(s) if has_pos else None,
        'ndcg@5': ndcg_at(s, 5) if has_pos else None,
        'ndcg@10': ndcg_at(s, 10) if has_pos else None,
    }


def evaluate(scored: Iterable[ScoredImpression], threads: int = 1,
             excluded: Optional[Dict[str, int]] = None) -> MetricReport:
    '''
    Per-impression metrics averaged over impressions. AUC skips single-class
    impressions and the rank metrics skip impressions without a positive;
    both are counted in `excluded`, next to any counts passed in.
    '''
    scored = list(scored)
    for s in scored:
        _check(s)

    if threads > 1 and len(scored) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows: List[Dict[str, Optional[float]]] = list(pool.map(_impression_metrics, scored))
    else:
        rows = [_impression_metrics(s) for s in scored]

    counts = dict(excluded or {})
    counts['single_class'] = sum(1 for r in rows if r['auc'] is None)
    counts['no_positive'] = sum(1 for r in rows if r['mrr'] is None)

    metrics: 'OrderedDict[str, MetricSummary]' = OrderedDict()
    for name in METRICS:
        values = np.array([r[name] for r in rows if r[name] is not None], dtype=np.float64)
        if len(values):
            metrics[name] = MetricSummary(float(values.mean()), float(values.std()), len(values))
        else:
            metrics[name] = MetricSummary(float('nan'), float('nan'), 0)

    if counts['single_class']:
        logger.warning('metrics: %d single-class impressions excluded from auc', counts['single_class'])
    return MetricReport(metrics, len(scored), counts)
