import logging
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .errors import ContractError, EncodeError
from .params import Init, ParamStore
from .types import EncodedNews, NewsBatch


logger = logging.getLogger(__name__)

TITLE = 'title'
ENTITY = 'entity'


def register_news_params(store: ParamStore, config: ModelConfig, words: int, entities: int, topics: int):
    d, dh = config.d, config.head_dim
    store.add('news.words', (words, d), Init.Embedding)
    store.add('news.entities', (entities, d), Init.Embedding)
    store.add('news.topics', (topics, d), Init.Embedding)
    for field in (TITLE, ENTITY):
        for k in range(config.heads):
            store.add(f'news.{field}.W_q.{k}', (d, dh))
            store.add(f'news.{field}.W_k.{k}', (d, dh))
            store.add(f'news.{field}.W_v.{k}', (d, dh))
        store.add(f'news.{field}.pool.W', (d, d))
        store.add(f'news.{field}.pool.b', (d,), Init.Zeros)
        store.add(f'news.{field}.pool.q', (d, 1))
        store.add(f'news.{field}.empty', (d,), Init.Embedding)


class NewsEncoder:
    '''
    n = n^t + n^e + n^v. Titles and entity lists go through masked multi-head
    self-attention and additive attention pooling; topics are a table lookup.
    Clicked and candidate news share these weights.
    '''

    def __init__(self, store: ParamStore, config: ModelConfig):
        self.store = store
        self.config = config

    def _sequence(self, field: str, table: str, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        store, config = self.store, self.config
        batch, length = ids.shape
        has = mask.any(axis=1)

        # rows without any token attend to a dummy slot and are replaced below
        safe = mask.copy()
        safe[~has, 0] = True

        x = ad.embedding_lookup(store[table], ids)
        heads = []
        for k in range(config.heads):
            q = x @ store[f'news.{field}.W_q.{k}']
            key = x @ store[f'news.{field}.W_k.{k}']
            v = x @ store[f'news.{field}.W_v.{k}']
            scores = ad.scale(q @ ad.transpose(key), 1.0 / np.sqrt(config.head_dim))
            weights = ad.softmax(scores, safe[:, None, :])
            heads.append(weights @ v)
        h = ad.concat(heads, axis=-1)

        logits = ad.tanh(h @ store[f'news.{field}.pool.W'] + store[f'news.{field}.pool.b'])
        logits = ad.reshape(logits @ store[f'news.{field}.pool.q'], batch, length)
        alpha = ad.reshape(ad.softmax(logits, safe), batch, 1, length)
        pooled = ad.reshape(alpha @ h, batch, config.d)

        if has.all():
            return pooled
        keep = has[:, None].astype(self.store.dtype)
        empty = ad.take(ad.reshape(store[f'news.{field}.empty'], 1, config.d), np.zeros(batch, np.int64))
        return pooled * keep + empty * (1.0 - keep)

    def encode_titles(self, batch: NewsBatch) -> Tensor:
        return self._sequence(TITLE, 'news.words', batch.title_ids, batch.title_mask)

    def encode_entities(self, batch: NewsBatch) -> Tensor:
        return self._sequence(ENTITY, 'news.entities', batch.entity_ids, batch.entity_mask)

    def encode_topics(self, batch: NewsBatch) -> Tensor:
        return ad.embedding_lookup(self.store['news.topics'], batch.topic_ids)

    def encode(self, batch: NewsBatch) -> Tensor:
        '''(B, d) news vectors of a batch of articles.'''
        if len(batch) == 0:
            raise ContractError('cannot encode an empty batch of news')
        return self.encode_titles(batch) + self.encode_entities(batch) + self.encode_topics(batch)


def _single(title_ids=None, entity_ids=None, topic_id=0, config: Optional[ModelConfig] = None) -> NewsBatch:
    title = np.zeros((1, config.title_len), np.int64) if title_ids is None else np.asarray(title_ids, np.int64)[None]
    entity = np.zeros((1, config.entity_len), np.int64) if entity_ids is None else np.asarray(entity_ids, np.int64)[None]
    return NewsBatch(title, entity, np.array([topic_id], dtype=np.int64))


def encode_title(title_ids, title_mask, encoder: NewsEncoder) -> Tensor:
    '''n^t of one article; a title without unmasked tokens is an encode error.'''
    mask = np.asarray(title_mask, dtype=bool)
    if not mask.any():
        raise EncodeError('title has no unmasked token')
    ids = np.where(mask, np.asarray(title_ids), 0)
    batch = _single(title_ids=ids, config=encoder.config)
    return ad.reshape(encoder.encode_titles(batch), encoder.config.d)


def encode_entities(entity_ids, entity_mask, encoder: NewsEncoder) -> Tensor:
    '''n^e of one article; no entities gives the learned empty-entity vector.'''
    ids = np.where(np.asarray(entity_mask, dtype=bool), np.asarray(entity_ids), 0)
    batch = _single(entity_ids=ids, config=encoder.config)
    return ad.reshape(encoder.encode_entities(batch), encoder.config.d)


def encode_topic(topic_id: int, encoder: NewsEncoder) -> Tensor:
    return ad.reshape(encoder.encode_topics(_single(topic_id=topic_id, config=encoder.config)), encoder.config.d)


def encode_news(article: EncodedNews, encoder: NewsEncoder) -> Tensor:
    batch = NewsBatch.stack([article])
    return ad.reshape(encoder.encode(batch), encoder.config.d)
