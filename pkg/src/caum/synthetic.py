import json
import os
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .lexer import tokenize_title
from .types import Impression, NewsArticle


_LETTERS = 'abcdefghijklmnopqrstuvwxyz'


def _topic_word(topic: int, index: int) -> str:
    # letters only, so the title lexer keeps it as one token
    return f'{_LETTERS[topic % 26]}q{_LETTERS[index % 26]}{_LETTERS[index // 26 % 26]}'


@dataclass
class SyntheticSpec:
    users: int = 200
    news: int = 500
    topics: int = 8
    words_per_topic: int = 24
    shared_words: int = 16
    entities_per_topic: int = 6
    interests: Tuple[int, int] = (1, 3)
    history: Tuple[int, int] = (8, 30)
    impressions_per_user: int = 3
    positives: Tuple[int, int] = (1, 2)
    negatives: Tuple[int, int] = (2, 6)
    click_bias: float = 0.9
    seed: int = 0


def generate_corpus(spec: SyntheticSpec = SyntheticSpec()) -> Tuple[List[NewsArticle], List[Impression]]:
    '''
    Topic-biased click logs. Each user holds a few topic interests; histories
    are drawn mostly from them, each impression's positives come from one of
    them and its negatives from topics outside them.
    '''
    rng = np.random.default_rng(spec.seed)

    topic_names = [f'topic{t}' for t in range(spec.topics)]
    shared = [f'filler{_LETTERS[i % 26]}{_LETTERS[i // 26]}' for i in range(spec.shared_words)]
    articles: List[NewsArticle] = []
    by_topic: List[List[str]] = [[] for _ in range(spec.topics)]

    for i in range(spec.news):
        topic = int(rng.integers(spec.topics))
        length = int(rng.integers(4, 11))
        own = rng.integers(spec.words_per_topic, size=length)
        words = [
            _topic_word(topic, int(w)) if rng.random() < 0.75 else shared[int(rng.integers(len(shared)))]
            for w in own
        ]
        title = ' '.join(words).capitalize() + ('?' if rng.random() < 0.2 else '')
        count = int(rng.integers(0, 3))
        entities = [f'Q{topic}{int(e):02d}' for e in rng.integers(spec.entities_per_topic, size=count)]
        news_id = f'N{i + 1}'
        articles.append(NewsArticle(news_id, topic_names[topic], title, tokenize_title(title),
                                    entities, f'{topic_names[topic]}sub'))
        by_topic[topic].append(news_id)

    populated = [t for t in range(spec.topics) if by_topic[t]]
    impressions: List[Impression] = []
    for u in range(spec.users):
        k = int(rng.integers(spec.interests[0], spec.interests[1] + 1))
        interests = [int(t) for t in rng.choice(populated, size=min(k, len(populated)), replace=False)]
        others = [t for t in populated if t not in interests] or populated

        length = int(rng.integers(spec.history[0], spec.history[1] + 1))
        history = []
        for _ in range(length):
            pool = interests if rng.random() < spec.click_bias else others
            topic = int(rng.choice(pool))
            history.append(str(rng.choice(by_topic[topic])))

        for _ in range(spec.impressions_per_user):
            focus = int(rng.choice(interests))
            n_pos = int(rng.integers(spec.positives[0], spec.positives[1] + 1))
            n_neg = int(rng.integers(spec.negatives[0], spec.negatives[1] + 1))
            pos = [str(rng.choice(by_topic[focus])) for _ in range(n_pos)]
            neg = [str(rng.choice(by_topic[int(rng.choice(others))])) for _ in range(n_neg)]
            shown = [(n, 1) for n in pos] + [(n, 0) for n in neg]
            order = rng.permutation(len(shown))
            impressions.append(Impression(
                str(len(impressions) + 1), f'U{u + 1}', list(history), [shown[o] for o in order]))

    return articles, impressions


def split_impressions(impressions: List[Impression], every: int = 3) -> Tuple[List[Impression], List[Impression]]:
    '''Every `every`-th impression of the log goes to validation.'''
    train = [imp for i, imp in enumerate(impressions) if (i + 1) % every]
    valid = [imp for i, imp in enumerate(impressions) if not (i + 1) % every]
    return train, valid


def write_news_tsv(path: str, articles: List[NewsArticle]):
    with open(path, 'w', encoding='utf-8') as fd:
        for a in articles:
            entities = json.dumps([
                {'Label': e, 'Type': 'O', 'WikidataId': e, 'Confidence': 1.0,
                 'OccurrenceOffsets': [0], 'SurfaceForms': [e]}
                for e in a.entities
            ])
            fd.write('\t'.join([a.news_id, a.topic, a.subtopic, a.title, '', '', entities, '[]']) + '\n')


def write_behaviors_tsv(path: str, impressions: List[Impression]):
    with open(path, 'w', encoding='utf-8') as fd:
        for imp in impressions:
            shown = ' '.join(f'{news_id}-{label}' for news_id, label in imp.candidates)
            fd.write('\t'.join([imp.impression_id, imp.user_id, '11/15/2019 8:55:22 AM',
                                ' '.join(imp.history), shown]) + '\n')


def write_corpus(directory: str, spec: SyntheticSpec = SyntheticSpec(), valid_every: int = 3) -> dict:
    os.makedirs(directory, exist_ok=True)
    articles, impressions = generate_corpus(spec)
    train, valid = split_impressions(impressions, valid_every)
    paths = {
        'news': os.path.join(directory, 'news.tsv'),
        'behaviors': os.path.join(directory, 'behaviors.tsv'),
        'valid_behaviors': os.path.join(directory, 'valid_behaviors.tsv'),
    }
    write_news_tsv(paths['news'], articles)
    write_behaviors_tsv(paths['behaviors'], train)
    write_behaviors_tsv(paths['valid_behaviors'], valid)
    return paths
