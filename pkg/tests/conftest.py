import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'src'))

from caum.config import ModelConfig
from caum.data import build_vocabs, encode_dataset, parse_behaviors_tsv, parse_news_tsv
from caum.synthetic import SyntheticSpec, write_corpus

MARKERS = {
    'autodiff': 'reverse-mode differentiation, parameters and checkpoints',
    'ingest': 'MIND parsing, vocabularies and encoding',
    'news': 'news encoder',
    'user': 'candidate-aware user encoder',
    'metrics': 'ranking metrics',
    'scorer': 'amortized scoring and operation counts',
    'trainer': 'BPR training',
    'cli': 'command line',
    'slow': 'long training or paper-scale runs',
}


def pytest_configure(config):
    for name, text in MARKERS.items():
        config.addinivalue_line('markers', f'{name}: {text}')


@pytest.fixture
def caum_path():
    return os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'src', 'caum.sh')


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_config():
    return ModelConfig(d=8, heads=2, window=1, history=4, title_len=6, entity_len=3, phi_hidden=4)


@pytest.fixture
def corpus(tmp_path):
    spec = SyntheticSpec(users=12, news=40, topics=4, impressions_per_user=2, seed=3)
    return write_corpus(str(tmp_path / 'raw'), spec)


@pytest.fixture
def encoded(corpus, toy_config):
    catalog = parse_news_tsv(corpus['news'])
    impressions, _ = parse_behaviors_tsv(corpus['behaviors'])
    vocabs = build_vocabs(catalog)
    return encode_dataset(catalog, impressions, vocabs, toy_config.title_len, toy_config.entity_len), vocabs
