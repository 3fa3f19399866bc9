import logging

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .errors import DimensionError
from .params import Init, ParamStore


logger = logging.getLogger(__name__)


def register_user_params(store: ParamStore, config: ModelConfig):
    d, dh, h = config.d, config.head_dim, config.window
    store.add('user.Q_u', (d, d))
    store.add('user.Q_c', (d, d))
    for k in range(config.heads):
        store.add(f'user.W_r.{k}', (d, d))
        store.add(f'user.W_o.{k}', (d, dh))
    # rows [0, (2h+1)d) read the click window, the last d rows read n_c
    store.add('user.W_c', ((2 * h + 2) * d, d))
    if config.cnn_bias:
        store.add('user.b_cnn', (d,), Init.Zeros)
    store.add('user.P_m', (2 * d, d))
    # rows [0, d) read m_i, rows [d, 2d) read n_c
    store.add('user.phi.W1', (2 * d, config.phi_hidden))
    store.add('user.phi.b1', (config.phi_hidden,), Init.Zeros)
    store.add('user.phi.w2', (config.phi_hidden, 1))


def _rows(x: Tensor, start: int, stop: int) -> Tensor:
    return ad.take(x, np.arange(start, stop), axis=0)


def _broadcast_rows(x: Tensor, batch: int) -> Tensor:
    '''(B, k) -> (B, 1, k), added to every row of a (B, N, k) tensor.'''
    return ad.reshape(x, batch, 1, x.shape[-1])


class UserEncoder:
    '''
    Candidate-aware user modeling over batched inputs:
    clicks (B, N, d), click mask (B, N), candidate vectors n_c (B, d).
    Each block takes `aware`; with aware=False the n_c contribution is dropped,
    which is its candidate-agnostic counterpart.
    '''

    def __init__(self, store: ParamStore, config: ModelConfig):
        self.store = store
        self.config = config

    def candi_self_att(self, clicks: Tensor, mask: np.ndarray, n_c: Tensor, aware: bool = True) -> Tensor:
        store, config = self.store, self.config
        batch, n, d = clicks.shape

        q = clicks @ store['user.Q_u']
        keys = ad.transpose(clicks)
        if aware:
            q_c = _broadcast_rows(n_c @ store['user.Q_c'], batch)

        heads = []
        for k in range(config.heads):
            w_r = store[f'user.W_r.{k}']
            r = (q @ w_r) @ keys
            if aware:
                r = r + (q_c @ w_r) @ keys
            gamma = ad.softmax(r, mask[:, None, :])
            heads.append((gamma @ clicks) @ store[f'user.W_o.{k}'])
        return ad.concat(heads, axis=-1)

    def candi_cnn(self, clicks: Tensor, mask: np.ndarray, n_c: Tensor, aware: bool = True) -> Tensor:
        store, config = self.store, self.config
        batch, n, d = clicks.shape
        h = config.window
        span = (2 * h + 1) * d

        padded = clicks
        if h:
            edge = ad.constant(np.zeros((batch, h, d), dtype=clicks.dtype))
            padded = ad.concat([edge, clicks, edge], axis=1)
        window = ad.concat([ad.take(padded, np.arange(o, o + n), axis=1) for o in range(2 * h + 1)], axis=-1)

        w_c = store['user.W_c']
        s = window @ _rows(w_c, 0, span)
        if aware:
            s = s + _broadcast_rows(n_c @ _rows(w_c, span, span + d), batch)
        if config.cnn_bias:
            s = s + store['user.b_cnn']
        return ad.relu(s) if config.cnn_activation == 'relu' else s

    def fuse(self, s: Tensor, l: Tensor) -> Tensor:
        if s.shape != l.shape:
            raise DimensionError('fuse', s.shape, l.shape)
        return ad.concat([s, l], axis=-1) @ self.store['user.P_m']

    def candi_att(self, m: Tensor, mask: np.ndarray, n_c: Tensor, aware: bool = True) -> Tensor:
        store = self.store
        batch, n, d = m.shape

        w1 = store['user.phi.W1']
        hidden = m @ _rows(w1, 0, d)
        if aware:
            hidden = hidden + _broadcast_rows(n_c @ _rows(w1, d, 2 * d), batch)
        hidden = ad.tanh(hidden + store['user.phi.b1'])
        logits = ad.reshape(hidden @ store['user.phi.w2'], batch, n)

        alpha = ad.softmax(logits, mask)
        return ad.reshape(ad.reshape(alpha, batch, 1, n) @ m, batch, d)

    def encode(self, clicks: Tensor, mask: np.ndarray, n_c: Tensor) -> Tensor:
        '''u of shape (B, d). Padded click rows are zeroed before use.'''
        config = self.config
        mask = np.asarray(mask, dtype=bool)
        if clicks.ndim != 3 or mask.shape != clicks.shape[:2] or n_c.shape != (clicks.shape[0], clicks.shape[2]):
            raise DimensionError('encode_user', clicks.shape, mask.shape, n_c.shape)

        clicks = clicks * mask[:, :, None].astype(clicks.dtype)
        l = self.candi_self_att(clicks, mask, n_c, aware=config.candi_self_att)
        s = self.candi_cnn(clicks, mask, n_c, aware=config.candi_cnn)
        m = self.fuse(s, l)
        return self.candi_att(m, mask, n_c, aware=config.candi_att)


def _batched(clicks, mask, n_c):
    clicks = ad.constant(clicks)
    n_c = ad.constant(n_c, clicks)
    mask = np.asarray(mask, dtype=bool)
    single = clicks.ndim == 2
    if single:
        clicks = ad.reshape(clicks, 1, *clicks.shape)
        mask = mask[None]
        n_c = ad.reshape(n_c, 1, n_c.shape[0])
    return clicks, mask, n_c, single


def encode_user(clicks, mask, n_c, encoder: UserEncoder) -> Tensor:
    '''
    Single-user form: clicks (N, d), mask (N,), n_c (d,) gives u (d,).
    Batched inputs pass straight through to UserEncoder.encode.
    '''
    clicks, mask, n_c, single = _batched(clicks, mask, n_c)
    u = encoder.encode(clicks, mask, n_c)
    return ad.reshape(u, u.shape[-1]) if single else u


def candi_self_att(clicks, mask, n_c, encoder: UserEncoder, aware: bool = True) -> Tensor:
    clicks, mask, n_c, single = _batched(clicks, mask, n_c)
    out = encoder.candi_self_att(clicks, mask, n_c, aware=aware)
    return ad.reshape(out, *out.shape[1:]) if single else out


def candi_cnn(clicks, mask, n_c, encoder: UserEncoder, aware: bool = True) -> Tensor:
    clicks, mask, n_c, single = _batched(clicks, mask, n_c)
    out = encoder.candi_cnn(clicks, mask, n_c, aware=aware)
    return ad.reshape(out, *out.shape[1:]) if single else out


def candi_att(m, mask, n_c, encoder: UserEncoder, aware: bool = True) -> Tensor:
    m, mask, n_c, single = _batched(m, mask, n_c)
    u = encoder.candi_att(m, mask, n_c, aware=aware)
    return ad.reshape(u, u.shape[-1]) if single else u
