import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import masked_softmax
from .config import ModelConfig
from .errors import ContractError, DegenerateRowError, DimensionError, StalenessError
from .metrics import MetricReport, evaluate
from .params import ParamStore
from .types import Phase, ScoredImpression


logger = logging.getLogger(__name__)


class OpCounter:
    '''
    Multiplications performed by the scoring kernels, counted at matrix
    product granularity (m·k·n per product) and tagged by phase.
    '''

    def __init__(self):
        self.counts: Dict[str, int] = {Phase.Precompute: 0, Phase.Candidate: 0}
        self._lock = threading.Lock()

    def add(self, phase: str, count: int):
        with self._lock:
            self.counts[phase] += int(count)

    @property
    def precompute(self) -> int:
        return self.counts[Phase.Precompute]

    @property
    def candidate(self) -> int:
        return self.counts[Phase.Candidate]

    @property
    def total(self) -> int:
        return self.precompute + self.candidate


class _Kernels:
    '''Counted array products for one phase.'''

    def __init__(self, counter: Optional[OpCounter], phase: str):
        self.counter = counter
        self.phase = phase

    def mm(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        out = a @ b
        if self.counter is not None:
            self.counter.add(self.phase, out.size * a.shape[-1])
        return out

    def dot(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        '''Row-wise inner products over the last axis.'''
        if self.counter is not None:
            self.counter.add(self.phase, a.size)
        return np.einsum('...d,...d->...', a, b)


@dataclass
class UserWeights:
    '''
    Frozen numpy snapshot of the user-side parameters, with W_c split into
    the click-window block and the candidate block and Φ's first layer split
    into its m_i and n_c halves.
    '''
    config: ModelConfig
    Q_u: np.ndarray
    Q_c: np.ndarray
    W_r: np.ndarray
    W_o: np.ndarray
    W_ctx: np.ndarray
    W_cand: np.ndarray
    b_cnn: Optional[np.ndarray]
    P_m: np.ndarray
    W1_m: np.ndarray
    W1_c: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    version: Tuple[int, int]

    @classmethod
    def from_store(cls, store: ParamStore, config: ModelConfig) -> 'UserWeights':
        d, h = config.d, config.window
        span = (2 * h + 1) * d
        a = {name: t.data.copy() for name, t in store.items() if name.startswith('user.')}
        return cls(
            config=config,
            Q_u=a['user.Q_u'],
            Q_c=a['user.Q_c'],
            W_r=np.stack([a[f'user.W_r.{k}'] for k in range(config.heads)]),
            W_o=np.stack([a[f'user.W_o.{k}'] for k in range(config.heads)]),
            W_ctx=a['user.W_c'][:span],
            W_cand=a['user.W_c'][span:],
            b_cnn=a.get('user.b_cnn') if config.cnn_bias else None,
            P_m=a['user.P_m'],
            W1_m=a['user.phi.W1'][:d],
            W1_c=a['user.phi.W1'][d:],
            b1=a['user.phi.b1'],
            w2=a['user.phi.w2'][:, 0],
            version=(id(store), store.version),
        )

    @property
    def dtype(self):
        return self.Q_u.dtype

    def activation(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(x, 0) if self.config.cnn_activation == 'relu' else x


@dataclass(frozen=True)
class UserPrecompute:
    '''
    Candidate-independent arrays of one user. `l`, `s`, `m`, `phi_m` and `u`
    are cached only when every block they depend on is candidate-agnostic.
    '''
    clicks: np.ndarray
    mask: np.ndarray
    q: np.ndarray
    v: np.ndarray
    r_hat: np.ndarray
    o: np.ndarray
    ctx: np.ndarray
    key_bias: np.ndarray
    version: Tuple[int, int]
    l: Optional[np.ndarray] = None
    s: Optional[np.ndarray] = None
    m: Optional[np.ndarray] = None
    phi_m: Optional[np.ndarray] = None
    u: Optional[np.ndarray] = None


def _check_user(clicks: np.ndarray, mask: np.ndarray, d: int):
    if clicks.ndim != 2 or clicks.shape[1] != d or mask.shape != clicks.shape[:1]:
        raise DimensionError('precompute_user', clicks.shape, mask.shape)
    if not mask.any():
        raise DegenerateRowError('user has no unmasked click')


def _window(clicks: np.ndarray, h: int) -> np.ndarray:
    '''(N, (2h+1)d) concatenation of c_{i-h} .. c_{i+h}, zeros past both ends.'''
    n, d = clicks.shape
    edge = np.zeros((h, d), dtype=clicks.dtype)
    padded = np.concatenate([edge, clicks, edge])
    return np.concatenate([padded[o: o + n] for o in range(2 * h + 1)], axis=1)


def _key_bias(mask: np.ndarray, dtype) -> np.ndarray:
    '''0 on clicked positions, -inf on padding, added to logits over the click axis.'''
    return np.where(mask, 0.0, -np.inf).astype(dtype)


def _softmax(logits: np.ndarray) -> np.ndarray:
    '''Row-max softmax over the last axis of biased logits, in place.'''
    logits -= logits.max(axis=-1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=-1, keepdims=True)
    return logits


def _attend(r: np.ndarray, o: np.ndarray, k: _Kernels) -> np.ndarray:
    '''Biased scores (..., K, N, N) and values (K, N, d/K) to heads side by side (..., N, d).'''
    heads = np.moveaxis(k.mm(_softmax(r), o), -3, -2)
    return heads.reshape(heads.shape[:-2] + (-1,))


def _pool(phi_hidden: np.ndarray, m: np.ndarray, bias: np.ndarray, w: UserWeights, k: _Kernels) -> np.ndarray:
    alpha = _softmax(k.mm(np.tanh(phi_hidden + w.b1), w.w2) + bias)
    return k.mm(alpha[..., None, :], m)[..., 0, :]


def precompute_user(clicks: np.ndarray, mask: np.ndarray, weights: UserWeights,
                    counter: Optional[OpCounter] = None) -> UserPrecompute:
    '''Cache every tensor of the user encoder that does not depend on n_c.'''
    config = weights.config
    clicks = np.asarray(clicks, dtype=weights.dtype)
    mask = np.asarray(mask, dtype=bool)
    _check_user(clicks, mask, config.d)
    k = _Kernels(counter, Phase.Precompute)

    c = clicks * mask[:, None]
    q = k.mm(c, weights.Q_u)
    v = np.stack([k.mm(c, w_r.T) for w_r in weights.W_r])
    r_hat = np.stack([k.mm(q, v_k.T) for v_k in v])
    o = np.stack([k.mm(c, w_o) for w_o in weights.W_o])
    ctx = k.mm(_window(c, config.window), weights.W_ctx)
    key_bias = _key_bias(mask, c.dtype)
    if weights.b_cnn is not None:
        ctx = ctx + weights.b_cnn

    cached = {}
    if not config.candi_self_att:
        cached['l'] = _attend(r_hat + key_bias, o, k)
    if not config.candi_cnn:
        cached['s'] = weights.activation(ctx)
    if not config.candi_self_att and not config.candi_cnn:
        m = k.mm(np.concatenate([cached['s'], cached['l']], axis=1), weights.P_m)
        cached['m'] = m
        cached['phi_m'] = k.mm(m, weights.W1_m)
        if not config.candi_att:
            cached['u'] = _pool(cached['phi_m'], m, key_bias, weights, k)

    return UserPrecompute(c, mask, q, v, r_hat, o, ctx, key_bias, weights.version, **cached)


def score_candidates(pre: UserPrecompute, candidates: np.ndarray, weights: UserWeights,
                     counter: Optional[OpCounter] = None) -> np.ndarray:
    '''
    Scores of M candidate vectors (M, d) against one precomputed user. Only
    the candidate-dependent work is done here, vectorized over candidates.
    '''
    if pre.version != weights.version:
        raise StalenessError(
            f'user cache was built for parameter version {pre.version[1]}, weights are at {weights.version[1]}')
    config = weights.config
    n_c = np.asarray(candidates, dtype=weights.dtype)
    if n_c.ndim != 2 or n_c.shape[1] != config.d:
        raise DimensionError('score_candidates', n_c.shape)
    k = _Kernels(counter, Phase.Candidate)
    m_count = n_c.shape[0]
    if not m_count:
        return np.zeros(0, dtype=weights.dtype)

    if pre.u is not None:
        return k.dot(np.broadcast_to(pre.u, n_c.shape), n_c)

    if pre.m is not None:
        m, phi_m = pre.m, pre.phi_m
    else:
        if pre.l is not None:
            l = np.broadcast_to(pre.l, (m_count,) + pre.l.shape)
        else:
            q_c = k.mm(n_c, weights.Q_c)
            # r^k_{ij} = r̂^k_{ij} + q_c · v^k_j, one increment row per candidate
            increments = np.stack([k.mm(q_c, v_k.T) for v_k in pre.v], axis=1)
            r = pre.r_hat[None] + (increments + pre.key_bias)[:, :, None, :]
            l = _attend(r, pre.o, k)

        if pre.s is not None:
            s = np.broadcast_to(pre.s, (m_count,) + pre.s.shape)
        else:
            s = weights.activation(pre.ctx[None] + k.mm(n_c, weights.W_cand)[:, None, :])

        m = k.mm(np.concatenate([s, l], axis=-1), weights.P_m)
        phi_m = k.mm(m, weights.W1_m)

    if config.candi_att:
        phi = phi_m + k.mm(n_c, weights.W1_c)[:, None, :]
    else:
        phi = np.broadcast_to(phi_m, (m_count,) + phi_m.shape[-2:])
    if m.ndim == 2:
        m = np.broadcast_to(m, (m_count,) + m.shape)
    u = _pool(phi, m, pre.key_bias, weights, k)
    return k.dot(u, n_c)


def naive_scores(clicks: np.ndarray, mask: np.ndarray, candidates: np.ndarray, weights: UserWeights,
                 counter: Optional[OpCounter] = None) -> np.ndarray:
    '''
    One full user encoding per candidate, the way the model computes it.
    Everything is counted as per-candidate work.
    '''
    config = weights.config
    clicks = np.asarray(clicks, dtype=weights.dtype)
    mask = np.asarray(mask, dtype=bool)
    _check_user(clicks, mask, config.d)
    k = _Kernels(counter, Phase.Candidate)
    c = clicks * mask[:, None]
    keys = c.T
    key_bias = _key_bias(mask, c.dtype)

    scores = []
    for n_c in np.asarray(candidates, dtype=weights.dtype):
        q = k.mm(c, weights.Q_u)
        q_c = k.mm(n_c, weights.Q_c) if config.candi_self_att else None
        heads = []
        for w_r, w_o in zip(weights.W_r, weights.W_o):
            r = k.mm(k.mm(q, w_r), keys)
            if q_c is not None:
                r = r + k.mm(k.mm(q_c, w_r), keys)
            gamma = masked_softmax(r, mask)
            heads.append(k.mm(k.mm(gamma, c), w_o))
        l = np.concatenate(heads, axis=1)

        window = _window(c, config.window)
        if config.candi_cnn:
            tiled = np.broadcast_to(n_c, (len(c), config.d))
            s = k.mm(np.concatenate([window, tiled], axis=1), np.concatenate([weights.W_ctx, weights.W_cand]))
        else:
            s = k.mm(window, weights.W_ctx)
        if weights.b_cnn is not None:
            s = s + weights.b_cnn
        s = weights.activation(s)

        m = k.mm(np.concatenate([s, l], axis=1), weights.P_m)
        if config.candi_att:
            tiled = np.broadcast_to(n_c, m.shape)
            phi = k.mm(np.concatenate([m, tiled], axis=1), np.concatenate([weights.W1_m, weights.W1_c]))
        else:
            phi = k.mm(m, weights.W1_m)
        u = _pool(phi, m, key_bias, weights, k)
        scores.append(k.dot(u, n_c))
    return np.array(scores, dtype=weights.dtype)


def amortized_count(config: ModelConfig, n: int, m: int) -> Tuple[int, int]:
    '''
    Closed-form (precompute, per-candidate total) multiplication counts of
    precompute_user and score_candidates for N clicks and M candidates.
    '''
    d, big_k, dh, hidden = config.d, config.heads, config.head_dim, config.phi_hidden
    span = 2 * config.window + 1
    self_att, cnn, att = config.candi_self_att, config.candi_cnn, config.candi_att

    pre = n * d * d + big_k * n * d * d + big_k * n * n * d + big_k * n * d * dh + span * n * d * d
    if not self_att:
        pre += big_k * n * n * dh
    cached_m = not self_att and not cnn
    if cached_m:
        pre += 2 * n * d * d + n * d * hidden
        if not att:
            pre += n * hidden + n * d
            return pre, m * d

    per = 0
    if self_att:
        per += d * d + big_k * n * d + big_k * n * n * dh
    if cnn:
        per += d * d
    if not cached_m:
        per += 2 * n * d * d + n * d * hidden
    if att:
        per += d * hidden
    per += n * hidden + n * d + d
    return pre, m * per


def leading_order_count(n: int, m: int, d: int) -> int:
    '''The leading-order expression (3N+M)d² + (N²+MN)d.'''
    return (3 * n + m) * d * d + (n * n + m * n) * d


def score_user(clicks: np.ndarray, mask: np.ndarray, candidates: np.ndarray, weights: UserWeights,
               naive: bool = False, counter: Optional[OpCounter] = None) -> np.ndarray:
    if naive:
        return naive_scores(clicks, mask, candidates, weights, counter)
    return score_candidates(precompute_user(clicks, mask, weights, counter), candidates, weights, counter)


def score_users(users: Sequence[Tuple[np.ndarray, np.ndarray, np.ndarray]], weights: UserWeights,
                threads: int = 1, naive: bool = False) -> List[np.ndarray]:
    '''Scores of many (clicks, mask, candidates) triples against shared frozen weights.'''
    def run(user):
        return score_user(*user, weights, naive=naive)

    if threads <= 1 or len(users) <= 1:
        return [run(u) for u in users]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run, users))


def score_dataset(model, dataset, threads: int = 1, naive: bool = False) -> Tuple[List[ScoredImpression], int]:
    '''
    Score every impression of an encoded dataset with a model. Impressions
    whose history is empty cannot be scored; their count is returned.
    '''
    config = model.config
    vectors = model.news_vectors(dataset.news)
    weights = UserWeights.from_store(model.store, config)

    kept, users = [], []
    for impression in dataset.impressions:
        if not len(impression.history):
            continue
        history = dataset.history_rows(impression, config.history)
        users.append((vectors[history.rows], history.mask, vectors[impression.candidates]))
        kept.append(impression)

    skipped = len(dataset.impressions) - len(kept)
    if skipped:
        logger.info('score: %d impressions without history were not scored', skipped)

    scores = score_users(users, weights, threads=threads, naive=naive)
    return [ScoredImpression(s, i.labels, i.impression_id) for s, i in zip(scores, kept)], skipped


def evaluate_model(model, dataset, threads: int = 1) -> MetricReport:
    if not dataset.impressions:
        raise ContractError('cannot evaluate on an empty dataset')
    scored, skipped = score_dataset(model, dataset, threads=threads)
    return evaluate(scored, threads=threads, excluded={'empty_history': skipped})
