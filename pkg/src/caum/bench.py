import csv
import dataclasses
import logging
import re
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, ContractError
from .params import ParamStore
from .scorer import OpCounter, UserWeights, leading_order_count, naive_scores, precompute_user, score_candidates
from .user_encoder import register_user_params


logger = logging.getLogger(__name__)

CSV_HEADER = ['variant', 'N', 'M', 'd', 'reps', 'median_ns', 'mult_count']
DEFAULT_GRID = 'N=50,M=1,10,50,100,d=64'
TOLERANCE = {64: 1e-9, 32: 1e-4}

_GRID_KEY = re.compile(r',(?=[NMd]=)')


def parse_grid(text: str) -> Dict[str, List[int]]:
    '''"N=50,M=1,10,50,d=64" -> {"N": [50], "M": [1, 10, 50], "d": [64]}.'''
    grid: Dict[str, List[int]] = {}
    for part in _GRID_KEY.split(text.strip()):
        key, _, values = part.partition('=')
        key = key.strip()
        if key not in ('N', 'M', 'd') or not values:
            raise ConfigError(f'grid: cannot read {part!r}, expected N=..,M=..,d=..')
        try:
            numbers = [int(v) for v in values.split(',') if v.strip()]
        except ValueError:
            raise ConfigError(f'grid: {key} values must be integers, got {values!r}') from None
        if not numbers or min(numbers) <= 0:
            raise ConfigError(f'grid: {key} values must be positive, got {values!r}')
        grid[key] = numbers
    for key in ('N', 'M', 'd'):
        if key not in grid:
            raise ConfigError(f'grid: missing {key}')
    return grid


@dataclass
class BenchRow:
    variant: str
    n: int
    m: int
    d: int
    reps: int
    median_ns: int
    mult_count: int

    def csv(self) -> list:
        return [self.variant, self.n, self.m, self.d, self.reps, self.median_ns, self.mult_count]


def _median_ns(fn, reps: int) -> int:
    samples = []
    for _ in range(reps):
        start = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - start)
    return int(np.median(samples))


def bench_point(config: ModelConfig, n: int, m: int, d: int, reps: int, seed: int = 0) -> Tuple[BenchRow, BenchRow]:
    '''
    Time naive and amortized scoring of M random candidates for one random
    user, after checking that both paths give the same scores.
    '''
    point = dataclasses.replace(config, d=d, history=n)
    if d % point.heads:
        raise ConfigError(f'heads must divide d (K | d), got d={d}, heads={point.heads}')
    point.validate()

    store = ParamStore(seed, point.dtype)
    register_user_params(store, point)
    weights = UserWeights.from_store(store, point)
    rng = np.random.default_rng(seed)
    clicks = rng.normal(0.0, 1.0, size=(n, d)).astype(point.dtype)
    mask = np.ones(n, dtype=bool)
    candidates = rng.normal(0.0, 1.0, size=(m, d)).astype(point.dtype)

    naive_counter, amortized_counter = OpCounter(), OpCounter()
    expected = naive_scores(clicks, mask, candidates, weights, naive_counter)
    got = score_candidates(precompute_user(clicks, mask, weights, amortized_counter), candidates, weights,
                           amortized_counter)
    gap = float(np.max(np.abs(expected - got)))
    if gap > TOLERANCE[point.precision] * max(1.0, float(np.max(np.abs(expected)))):
        raise ContractError(f'bench N={n} M={m} d={d}: amortized and naive scores differ by {gap:.3e}')

    naive_ns = _median_ns(lambda: naive_scores(clicks, mask, candidates, weights), reps)
    amortized_ns = _median_ns(
        lambda: score_candidates(precompute_user(clicks, mask, weights), candidates, weights), reps)
    logger.info('bench N=%d M=%d d=%d: naive %d ns, amortized %d ns', n, m, d, naive_ns, amortized_ns)
    return (BenchRow('naive', n, m, d, reps, naive_ns, naive_counter.total),
            BenchRow('amortized', n, m, d, reps, amortized_ns, amortized_counter.total))


def run_bench(config: ModelConfig, grid: Dict[str, List[int]], reps: int = 10, seed: int = 0) -> List[BenchRow]:
    if reps <= 0:
        raise ConfigError(f'reps must be positive, got {reps}')
    rows: List[BenchRow] = []
    for n in grid['N']:
        for d in grid['d']:
            for m in grid['M']:
                rows.extend(bench_point(config, n, m, d, reps, seed))
    return rows


def write_csv(path: str, rows: List[BenchRow]):
    with open(path, 'w', newline='', encoding='utf-8') as fd:
        writer = csv.writer(fd)
        writer.writerow(CSV_HEADER)
        writer.writerows(row.csv() for row in rows)


def _slope(xs: List[int], ys: List[int]) -> Optional[float]:
    if len(set(xs)) < 2:
        return None
    return float(np.polyfit(np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64), 1)[0])


def summarize(rows: List[BenchRow]) -> str:
    '''
    Per grid point: speedup of the median time, amortized/naive count ratio and
    the amortized count over the leading-order expression. Per (N, d): slope
    of each variant's count in M.
    '''
    by_point: Dict[Tuple[int, int, int], Dict[str, BenchRow]] = {}
    for row in rows:
        by_point.setdefault((row.n, row.m, row.d), {})[row.variant] = row

    lines = [f'{"N":>5}{"M":>6}{"d":>6}{"naive ms":>12}{"amort ms":>12}{"speedup":>9}'
             f'{"count ratio":>13}{"vs leading":>12}']
    for (n, m, d), pair in sorted(by_point.items()):
        naive, amortized = pair['naive'], pair['amortized']
        speedup = naive.median_ns / max(amortized.median_ns, 1)
        ratio = amortized.mult_count / naive.mult_count
        leading = amortized.mult_count / leading_order_count(n, m, d)
        lines.append(f'{n:>5}{m:>6}{d:>6}{naive.median_ns / 1e6:>12.3f}{amortized.median_ns / 1e6:>12.3f}'
                     f'{speedup:>9.2f}{ratio:>13.4f}{leading:>12.2f}')

    slopes = []
    for n, d in sorted({(n, d) for n, _, d in by_point}):
        points = sorted((m, pair) for (pn, m, pd), pair in by_point.items() if (pn, pd) == (n, d))
        ms = [m for m, _ in points]
        naive = _slope(ms, [p['naive'].mult_count for _, p in points])
        amortized = _slope(ms, [p['amortized'].mult_count for _, p in points])
        if naive is not None:
            slopes.append(f'N={n} d={d}: count slope in M naive {naive:.0f}, amortized {amortized:.0f}')
    return '\n'.join(lines + slopes)
