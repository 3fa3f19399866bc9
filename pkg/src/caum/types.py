from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np


PAD = 0


class Phase:
    Precompute = 'precompute'
    Candidate = 'candidate'


@dataclass
class NewsArticle:
    news_id: str
    topic: str
    title: str
    title_tokens: List[str] = field(default_factory=list)
    entities: List[str] = field(default_factory=list)
    subtopic: str = ''


@dataclass
class Impression:
    impression_id: str
    user_id: str
    history: List[str]
    candidates: List[Tuple[str, int]]

    @property
    def positives(self) -> List[str]:
        return [news_id for news_id, label in self.candidates if label == 1]

    @property
    def negatives(self) -> List[str]:
        return [news_id for news_id, label in self.candidates if label == 0]


@dataclass
class EncodedNews:
    '''Fixed-length id arrays of one article; id 0 is padding.'''
    title_ids: np.ndarray
    entity_ids: np.ndarray
    topic_id: int

    @property
    def title_mask(self) -> np.ndarray:
        return self.title_ids != PAD

    @property
    def entity_mask(self) -> np.ndarray:
        return self.entity_ids != PAD


@dataclass
class NewsBatch:
    '''Stacked EncodedNews: (B, L_t), (B, L_e) and (B,) arrays.'''
    title_ids: np.ndarray
    entity_ids: np.ndarray
    topic_ids: np.ndarray

    @classmethod
    def stack(cls, articles: List[EncodedNews]) -> 'NewsBatch':
        return cls(
            np.stack([a.title_ids for a in articles]).astype(np.int64),
            np.stack([a.entity_ids for a in articles]).astype(np.int64),
            np.array([a.topic_id for a in articles], dtype=np.int64),
        )

    def __len__(self):
        return len(self.topic_ids)

    @property
    def title_mask(self) -> np.ndarray:
        return self.title_ids != PAD

    @property
    def entity_mask(self) -> np.ndarray:
        return self.entity_ids != PAD


@dataclass
class HistoryRows:
    '''Catalog rows of the N most recent clicks, right-padded with row 0.'''
    rows: np.ndarray
    mask: np.ndarray
    dropped: int = 0


@dataclass
class ScoredImpression:
    scores: np.ndarray
    labels: np.ndarray
    impression_id: Optional[str] = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
