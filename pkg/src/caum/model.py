import logging
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .container import CHECKPOINT_VERSION, read_container, write_container
from .errors import ContractError, DimensionError, FormatError
from .news_encoder import NewsEncoder, register_news_params
from .params import ParamStore
from .types import NewsBatch
from .user_encoder import UserEncoder, register_user_params


logger = logging.getLogger(__name__)

NEWS_CHUNK = 512


def match_score(u: Tensor, n_c: Tensor) -> Tensor:
    '''ŷ = n_cᵀ u over the last axis.'''
    u, n_c = ad.constant(u), ad.constant(n_c)
    if u.shape != n_c.shape:
        raise DimensionError('match_score', u.shape, n_c.shape)
    return ad.sum(u * n_c, axis=-1)


class CaumModel:
    '''
    The news encoder and the candidate-aware user encoder over one ParamStore.
    Vocabulary sizes count the padding id 0.
    '''

    def __init__(self, config: ModelConfig, words: int, entities: int, topics: int, seed: int = 0):
        self.config = config.validate()
        self.sizes = (words, entities, topics)
        self.store = ParamStore(seed, config.dtype)
        register_news_params(self.store, config, words, entities, topics)
        register_user_params(self.store, config)
        self.news_encoder = NewsEncoder(self.store, config)
        self.user_encoder = UserEncoder(self.store, config)
        logger.debug('model: %d parameter arrays, %d values', len(self.store),
                     sum(t.data.size for _, t in self.store.items()))

    @classmethod
    def for_vocabs(cls, config: ModelConfig, vocabs, seed: int = 0) -> 'CaumModel':
        return cls(config, len(vocabs.words), len(vocabs.entities), len(vocabs.topics), seed)

    def encode_news(self, news: NewsBatch) -> Tensor:
        return self.news_encoder.encode(news)

    def news_vectors(self, news: NewsBatch) -> np.ndarray:
        '''Forward-only news vectors, encoded in chunks.'''
        out = np.zeros((len(news), self.config.d), dtype=self.store.dtype)
        for start in range(0, len(news), NEWS_CHUNK):
            rows = np.arange(start, min(start + NEWS_CHUNK, len(news)))
            chunk = NewsBatch(news.title_ids[rows], news.entity_ids[rows], news.topic_ids[rows])
            out[rows] = self.news_encoder.encode(chunk).data
        return out

    def score(self, table: NewsBatch, history: np.ndarray, mask: np.ndarray, candidates: np.ndarray) -> Tensor:
        '''
        Scores (B, M) of candidate rows (B, M) for histories (B, N) of rows
        into `table`. Each article used in the batch is encoded once; the
        user vector is recomputed per candidate.
        '''
        history = np.asarray(history, dtype=np.int64)
        candidates = np.asarray(candidates, dtype=np.int64)
        mask = np.asarray(mask, dtype=bool)
        batch, n = history.shape
        if candidates.ndim != 2 or candidates.shape[0] != batch or mask.shape != history.shape:
            raise DimensionError('score', history.shape, mask.shape, candidates.shape)
        if not mask.any(axis=1).all():
            raise ContractError('score: every user needs at least one click')
        m = candidates.shape[1]

        # padded slots point at a used row; their vectors are zeroed by the mask
        history = np.where(mask, history, candidates[:, :1])
        rows, inverse = np.unique(np.concatenate([history.ravel(), candidates.ravel()]), return_inverse=True)
        vectors = self.encode_news(NewsBatch(table.title_ids[rows], table.entity_ids[rows], table.topic_ids[rows]))

        clicks = ad.reshape(ad.take(vectors, inverse[:batch * n]), batch, n, self.config.d)
        n_c = ad.take(vectors, inverse[batch * n:])

        per_user = np.repeat(np.arange(batch), m)
        u = self.user_encoder.encode(ad.take(clicks, per_user), mask[per_user], n_c)
        return ad.reshape(match_score(u, n_c), batch, m)

    def save(self, path: str):
        write_container(path, self.store.arrays(), version=CHECKPOINT_VERSION)

    def load(self, path: str) -> 'CaumModel':
        self.store.load(read_container(path))
        return self

    @classmethod
    def from_checkpoint(cls, path: str, config: ModelConfig) -> 'CaumModel':
        '''Rebuild a model whose vocabulary sizes are read off the checkpoint.'''
        entries = read_container(path)
        try:
            sizes = [entries[name].shape[0] for name in ('news.words', 'news.entities', 'news.topics')]
        except KeyError as missing:
            raise FormatError(f'{path}: checkpoint has no entry {missing}') from None

        model = cls(config, *sizes)
        for name, tensor in model.store.items():
            if name in entries and entries[name].shape != tensor.shape:
                raise FormatError(
                    f'{path}: {name} has shape {entries[name].shape}, the config expects {tensor.shape}')
        model.store.load(entries)
        return model


def parameter_count(model: CaumModel, prefix: Optional[str] = None) -> int:
    return sum(t.data.size for name, t in model.store.items() if prefix is None or name.startswith(prefix))
