import math
import subprocess
from itertools import product

import numpy as np

from caum.data import build_vocabs, encode_dataset, parse_behaviors_tsv, parse_news_tsv
from caum.types import ScoredImpression


GRAD_MISMATCH = 'Gradient of %s at %s: analytic %.6e, finite differences %.6e (relative error %.2e)'
NOT_CLOSE = 'Values of %s differ by %.3e (tolerance %.1e)'
UNEXPECTED_OUTPUT = 'The output of %s is not the expected one:\n%s\nExpected:\n%s'
MUST_FAIL = 'The command %s must fail'
MUST_SUCCEED = 'The command %s must succeed:\n%s'
BAD_ERROR_FORMAT = 'The error is not a single line of the form error: <ErrorClass>: <message>\n\n%s'

ERROR_FORMAT = r'^error: (\w+): (.+)$'

FD_EPS = 1e-6
GRAD_RTOL = 1e-4
GRAD_FLOOR = 1e-5


def assert_close(name, actual, expected, tol):
    actual, expected = np.asarray(actual), np.asarray(expected)
    assert actual.shape == expected.shape, f'{name}: shape {actual.shape} != {expected.shape}'
    gap = float(np.max(np.abs(actual - expected))) if actual.size else 0.0
    assert gap <= tol, NOT_CLOSE % (name, gap, tol)


def check_gradients(loss_fn, tensors, eps=FD_EPS, rtol=GRAD_RTOL, max_coords=None, seed=0):
    '''
    Compare backward gradients of the scalar `loss_fn()` with central finite
    differences on every coordinate (or `max_coords` sampled ones) of every
    tensor whose analytic gradient exceeds 1e-8.
    '''
    for t in tensors:
        t.zero_grad()
    loss_fn().backward()
    analytic = {id(t): (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for t in tensors}

    rng = np.random.default_rng(seed)
    for t in tensors:
        coords = list(product(*(range(n) for n in t.shape)))
        if max_coords is not None and len(coords) > max_coords:
            coords = [coords[i] for i in rng.choice(len(coords), size=max_coords, replace=False)]
        for index in coords:
            original = t.data[index]
            t.data[index] = original + eps
            up = loss_fn().item()
            t.data[index] = original - eps
            down = loss_fn().item()
            t.data[index] = original
            numeric = (up - down) / (2 * eps)
            a = analytic[id(t)][index]
            if abs(a) <= 1e-8:
                continue
            rel = abs(a - numeric) / max(abs(a), abs(numeric), GRAD_FLOOR)
            assert rel < rtol, GRAD_MISMATCH % (t.name or 'tensor', index, a, numeric, rel)


def brute_force_auc(labels, scores):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def ranked_labels(labels, scores):
    # descending score, earlier index first on ties
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return [labels[i] for i in order]


def mrr_loop(labels, scores):
    ranked = ranked_labels(labels, scores)
    reciprocal = [1.0 / (rank + 1) for rank, l in enumerate(ranked) if l == 1]
    return sum(reciprocal) / len(reciprocal)


def ndcg_loop(labels, scores, k):
    ranked = ranked_labels(labels, scores)
    dcg = sum((2 ** l - 1) / math.log2(rank + 2) for rank, l in enumerate(ranked[:k]))
    ideal = sorted(labels, reverse=True)
    idcg = sum((2 ** l - 1) / math.log2(rank + 2) for rank, l in enumerate(ideal[:k]))
    return dcg / idcg


def random_impression(rng, size):
    labels = rng.integers(0, 2, size=size)
    labels[rng.integers(size)] = 1
    labels[(rng.integers(size - 1) + 1 + np.flatnonzero(labels == 1)[0]) % size] = 0
    scores = np.round(rng.normal(size=size), 1)
    return ScoredImpression(scores, labels)


def dot_loop(u, v):
    total = 0.0
    for a, b in zip(u, v):
        total += a * b
    return total


def self_attention_loop(clicks, mask, n_c, Q_u, Q_c, W_r, W_o):
    '''
    Scalar evaluation of candidate-aware self-attention for one user, with
    matrices in right-multiply layout (y = x @ W).
    '''
    n, d = len(clicks), len(clicks[0])
    heads = len(W_r)

    def vecmat(x, w):
        return [sum(x[a] * w[a][b] for a in range(len(x))) for b in range(len(w[0]))]

    def bilinear(x, w, y):
        return sum(x[a] * w[a][b] * y[b] for a in range(d) for b in range(d))

    q = [vecmat(c, Q_u) for c in clicks]
    q_c = vecmat(n_c, Q_c)
    out = []
    for i in range(n):
        row = []
        for k in range(heads):
            r = [bilinear(q[i], W_r[k], clicks[j]) + bilinear(q_c, W_r[k], clicks[j]) for j in range(n)]
            top = max(r[j] for j in range(n) if mask[j])
            e = [math.exp(r[j] - top) if mask[j] else 0.0 for j in range(n)]
            total = sum(e)
            gamma = [x / total for x in e]
            pooled = [sum(gamma[j] * clicks[j][a] for j in range(n)) for a in range(d)]
            row.extend(vecmat(pooled, W_o[k]))
        out.append(row)
    return out


def run_caum(caum_path, args, timeout=300):
    sp = subprocess.run(['bash', caum_path, *args], capture_output=True, timeout=timeout)
    return sp.returncode, sp.stdout.decode(), sp.stderr.decode()


def ingest_report(news_path, behaviors_path, title_len=6, entity_len=3):
    catalog = parse_news_tsv(news_path)
    impressions, behaviors = parse_behaviors_tsv(behaviors_path)
    vocabs = build_vocabs(catalog)
    dataset = encode_dataset(catalog, impressions, vocabs, title_len, entity_len)
    news, encoded = catalog.stats, dataset.stats
    return [
        f'news lines={news.lines} parsed={news.parsed} malformed={news.malformed} duplicates={news.duplicates}',
        f'behaviors lines={behaviors.lines} parsed={behaviors.parsed} malformed={behaviors.malformed} '
        f'bad_candidates={behaviors.bad_candidates} empty_histories={behaviors.empty_histories}',
        f'vocab words={len(vocabs.words)} entities={len(vocabs.entities)} topics={len(vocabs.topics)}',
        f'encoded articles={len(dataset.news_ids) - 1} impressions={encoded.impressions} '
        f'positives={encoded.positives} negatives={encoded.negatives} '
        f'dropped_history={encoded.dropped_history} dropped_candidates={encoded.dropped_candidates} '
        f'dropped_positives={encoded.dropped_positives} empty_histories={encoded.empty_histories}',
    ]


def get_file_name(path: str):
    return path.rpartition('/')[2]


def compare_ingest(news_path, behaviors_path, output_path):
    with open(output_path, 'r') as fd:
        expected = fd.read().strip().split('\n')
    report = ingest_report(news_path, behaviors_path)
    assert report == expected, UNEXPECTED_OUTPUT % (get_file_name(news_path), '\n'.join(report), '\n'.join(expected))


def compare_ingest_error(news_path, behaviors_path, error_path):
    with open(error_path, 'r') as fd:
        expected = fd.read().strip()
    try:
        ingest_report(news_path, behaviors_path)
    except Exception as e:
        assert type(e).__name__ == expected, UNEXPECTED_OUTPUT % (get_file_name(news_path), type(e).__name__, expected)
        return
    assert False, MUST_FAIL % get_file_name(news_path)
