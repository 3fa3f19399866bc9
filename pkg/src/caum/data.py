import csv
import json
import logging
import os
import re
import warnings
from collections import Counter, OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .container import DATASET_VERSION, read_container, write_container
from .errors import ContractError, FormatError
from .lexer import tokenize_title
from .types import PAD, EncodedNews, HistoryRows, Impression, NewsArticle, NewsBatch


logger = logging.getLogger(__name__)

NEWS_COLUMNS = ['news_id', 'category', 'subcategory', 'title', 'abstract', 'url', 'title_entities',
                'abstract_entities']
BEHAVIOR_COLUMNS = ['impression_id', 'user_id', 'time', 'history', 'impressions']
MALFORMED_LIMIT = 0.10
PAD_TOKEN = '<pad>'
CHUNK_LINES = 4096

_OVERFLOW = '_overflow'
# surrogateescape maps each byte that is not UTF-8 to one of these
_UNDECODABLE = re.compile('[\udc80-\udcff]')


@dataclass
class NewsStats:
    lines: int = 0
    parsed: int = 0
    malformed: int = 0
    duplicates: int = 0


@dataclass
class BehaviorStats:
    lines: int = 0
    parsed: int = 0
    malformed: int = 0
    bad_candidates: int = 0
    empty_histories: int = 0


class NewsCatalog(OrderedDict):
    '''news_id -> NewsArticle in file order; the last duplicate wins.'''

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.stats = NewsStats()


def read_lines(path: str) -> List[str]:
    '''Lines of a small UTF-8 text artifact (vocabulary, id list).'''
    try:
        with open(path, 'r', encoding='utf-8') as fd:
            return [line.rstrip('\r\n') for line in fd]
    except UnicodeDecodeError as e:
        raise FormatError(f'{path}: not UTF-8 text at byte {e.start}') from None


def _undecodable(value) -> bool:
    return isinstance(value, str) and _UNDECODABLE.search(value) is not None


def read_tsv(path: str, columns: Sequence[str]) -> pd.DataFrame:
    '''
    Headerless MIND TSV as strings, one row per non-blank line, plus a
    `well_formed` column: False when the line does not have exactly
    len(columns) fields or holds bytes that are not UTF-8.
    '''
    names = [*columns, _OVERFLOW]
    with warnings.catch_warnings():
        # rows longer than `names` are cut to it; _OVERFLOW already marks them
        warnings.simplefilter('ignore', pd.errors.ParserWarning)
        try:
            frame = pd.read_csv(path, sep='\t', header=None, names=names, index_col=False, dtype=object,
                                quoting=csv.QUOTE_NONE, keep_default_na=False, engine='python',
                                encoding='utf-8', encoding_errors='surrogateescape')
        except pd.errors.EmptyDataError:
            frame = pd.DataFrame(columns=names, dtype=object)
        except pd.errors.ParserError as e:
            raise FormatError(f'{path}: {e}') from None

    fields = frame[list(columns)]
    undecodable = fields.apply(lambda col: col.map(_undecodable)).any(axis=1)
    well_formed = fields.notna().all(axis=1) & frame[_OVERFLOW].isna() & ~undecodable
    return fields.assign(well_formed=well_formed.astype(bool))


def _row_chunks(frame: pd.DataFrame) -> List[List[tuple]]:
    rows = list(frame.itertuples(index=False, name=None))
    return [rows[i: i + CHUNK_LINES] for i in range(0, len(rows), CHUNK_LINES)]


def _map_chunks(fn, frame: pd.DataFrame, workers: int) -> list:
    chunks = _row_chunks(frame)
    if workers <= 1 or len(chunks) <= 1:
        return [fn(chunk) for chunk in chunks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))


def _parse_entities(raw: str) -> List[str]:
    if raw.strip() == '':
        return []
    items = json.loads(raw)
    if not isinstance(items, list):
        raise ValueError('title entities must be a list')
    return [str(item['WikidataId']) for item in items]


def parse_news_fields(fields: Sequence[str]) -> NewsArticle:
    news_id, topic, subtopic, title, _, _, title_entities, _ = fields
    if not news_id:
        raise ValueError('empty news id')
    return NewsArticle(news_id, topic, title, tokenize_title(title), _parse_entities(title_entities), subtopic)


def _parse_news_rows(rows: Sequence[tuple]) -> List[Optional[NewsArticle]]:
    parsed = []
    for *fields, well_formed in rows:
        try:
            parsed.append(parse_news_fields(fields) if well_formed else None)
        except (ValueError, KeyError, TypeError):
            parsed.append(None)
    return parsed


def parse_news_tsv(path: str, workers: int = 1) -> NewsCatalog:
    '''
    Read a MIND news.tsv. Malformed lines are skipped and counted; more than
    10% of them is a format error.
    '''
    frame = read_tsv(path, NEWS_COLUMNS)
    catalog = NewsCatalog()
    stats = catalog.stats

    for chunk in _map_chunks(_parse_news_rows, frame, workers):
        for article in chunk:
            stats.lines += 1
            if article is None:
                stats.malformed += 1
                continue
            if article.news_id in catalog:
                stats.duplicates += 1
                del catalog[article.news_id]
            catalog[article.news_id] = article
            stats.parsed += 1

    if stats.lines and stats.malformed / stats.lines > MALFORMED_LIMIT:
        raise FormatError(
            f'{path}: {stats.malformed} of {stats.lines} lines malformed (limit {MALFORMED_LIMIT:.0%})')
    if stats.malformed or stats.duplicates:
        logger.warning('%s: skipped %d malformed lines, %d duplicate ids replaced',
                       path, stats.malformed, stats.duplicates)
    return catalog


class _BadCandidate(ValueError):
    pass


def parse_candidate(token: str) -> Tuple[str, int]:
    news_id, sep, label = token.rpartition('-')
    if not sep or not news_id or label not in ('0', '1'):
        raise _BadCandidate(token)
    return news_id, int(label)


def parse_behavior_fields(fields: Sequence[str]) -> Impression:
    impression_id, user_id, _, history, shown = fields
    candidates = [parse_candidate(token) for token in shown.split()]
    if not candidates:
        raise ValueError('impression without candidates')
    return Impression(impression_id, user_id, history.split(), candidates)


def _parse_behavior_rows(rows: Sequence[tuple]) -> List[object]:
    parsed = []
    for *fields, well_formed in rows:
        if not well_formed:
            parsed.append('malformed')
            continue
        try:
            parsed.append(parse_behavior_fields(fields))
        except _BadCandidate:
            parsed.append('bad_candidate')
        except ValueError:
            parsed.append('malformed')
    return parsed


def parse_behaviors_tsv(path: str, workers: int = 1) -> Tuple[List[Impression], BehaviorStats]:
    frame = read_tsv(path, BEHAVIOR_COLUMNS)
    impressions: List[Impression] = []
    stats = BehaviorStats()

    for chunk in _map_chunks(_parse_behavior_rows, frame, workers):
        for item in chunk:
            stats.lines += 1
            if item == 'bad_candidate':
                stats.bad_candidates += 1
            elif item == 'malformed':
                stats.malformed += 1
            else:
                if not item.history:
                    stats.empty_histories += 1
                impressions.append(item)
                stats.parsed += 1

    if stats.malformed or stats.bad_candidates:
        logger.warning('%s: skipped %d malformed lines, %d lines with bad candidate labels',
                       path, stats.malformed, stats.bad_candidates)
    return impressions, stats


class Vocab:
    '''Token list where line number is id; id 0 is reserved for padding and OOV.'''

    def __init__(self, tokens: Iterable[str]):
        self.tokens = [PAD_TOKEN, *tokens]
        self.index = {token: i for i, token in enumerate(self.tokens)}

    @classmethod
    def from_counts(cls, counts: Counter) -> 'Vocab':
        ordered = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
        return cls(token for token, _ in ordered)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index and self.index[token] != PAD

    def id_of(self, token: str) -> int:
        return self.index.get(token, PAD)

    def save(self, path: str):
        with open(path, 'w', encoding='utf-8') as fd:
            fd.write('\n'.join(self.tokens) + '\n')

    @classmethod
    def load(cls, path: str) -> 'Vocab':
        tokens = read_lines(path)
        if not tokens or tokens[0] != PAD_TOKEN:
            raise FormatError(f'{path}: vocabulary must start with {PAD_TOKEN}')
        return cls(tokens[1:])


@dataclass
class Vocabs:
    words: Vocab
    entities: Vocab
    topics: Vocab

    FILES = ('words.vocab', 'entities.vocab', 'topics.vocab')

    def save(self, directory: str):
        for name, vocab in zip(self.FILES, (self.words, self.entities, self.topics)):
            vocab.save(os.path.join(directory, name))

    @classmethod
    def load(cls, directory: str) -> 'Vocabs':
        return cls(*(Vocab.load(os.path.join(directory, name)) for name in cls.FILES))


def build_vocabs(catalog: NewsCatalog) -> Vocabs:
    if not catalog:
        raise ContractError('cannot build vocabularies from an empty catalog')
    words, entities, topics = Counter(), Counter(), Counter()
    for article in catalog.values():
        words.update(article.title_tokens)
        entities.update(article.entities)
        topics[article.topic] += 1
    return Vocabs(Vocab.from_counts(words), Vocab.from_counts(entities), Vocab.from_counts(topics))


def _fit(ids: List[int], length: int) -> np.ndarray:
    out = np.full(length, PAD, dtype=np.int64)
    ids = ids[:length]
    out[:len(ids)] = ids
    return out


def encode_article(article: NewsArticle, vocabs: Vocabs, title_len: int, entity_len: int) -> EncodedNews:
    '''Truncate right, pad right; OOV words and entities are dropped, OOV topics map to 0.'''
    title = [vocabs.words.id_of(t) for t in article.title_tokens]
    entities = [vocabs.entities.id_of(e) for e in article.entities]
    return EncodedNews(
        _fit([i for i in title if i != PAD], title_len),
        _fit([i for i in entities if i != PAD], entity_len),
        vocabs.topics.id_of(article.topic),
    )


def encode_history(history: Sequence[str], row_of: Dict[str, int], n: int) -> HistoryRows:
    '''
    Keep the N most recent resolvable clicks (oldest first) and pad on the
    right with masked row-0 slots. Unresolvable ids are dropped and counted.
    '''
    rows = [row_of[news_id] for news_id in history if news_id in row_of]
    dropped = len(history) - len(rows)
    rows = rows[-n:] if n else []
    out = np.zeros(n, dtype=np.int64)
    out[:len(rows)] = rows
    mask = np.zeros(n, dtype=bool)
    mask[:len(rows)] = True
    return HistoryRows(out, mask, dropped)


def pad_rows(rows: np.ndarray, n: int) -> HistoryRows:
    '''Most recent n catalog rows, right-padded with masked row 0.'''
    rows = np.asarray(rows, dtype=np.int64)[-n:] if n else np.zeros(0, dtype=np.int64)
    out = np.zeros(n, dtype=np.int64)
    out[:len(rows)] = rows
    mask = np.zeros(n, dtype=bool)
    mask[:len(rows)] = True
    return HistoryRows(out, mask)


@dataclass
class EncodedImpression:
    impression_id: str
    user_id: str
    history: np.ndarray
    candidates: np.ndarray
    labels: np.ndarray


@dataclass
class EncodeStats:
    impressions: int = 0
    positives: int = 0
    negatives: int = 0
    dropped_history: int = 0
    dropped_candidates: int = 0
    dropped_positives: int = 0
    empty_histories: int = 0


@dataclass
class EncodedDataset:
    '''Encoded news table (row 0 is the padding article) plus encoded impressions.'''
    news_ids: List[str]
    news: NewsBatch
    impressions: List[EncodedImpression]
    stats: EncodeStats = field(default_factory=EncodeStats)

    def __post_init__(self):
        self.row_of = {news_id: row for row, news_id in enumerate(self.news_ids) if row}

    def history_rows(self, impression: EncodedImpression, n: int) -> HistoryRows:
        return pad_rows(impression.history, n)

    def articles(self, rows: np.ndarray) -> NewsBatch:
        rows = np.asarray(rows, dtype=np.int64)
        return NewsBatch(self.news.title_ids[rows], self.news.entity_ids[rows], self.news.topic_ids[rows])


def encode_dataset(catalog: NewsCatalog, impressions: Sequence[Impression], vocabs: Vocabs,
                   title_len: int, entity_len: int) -> EncodedDataset:
    news_ids = ['', *catalog.keys()]
    encoded = [EncodedNews(np.zeros(title_len, np.int64), np.zeros(entity_len, np.int64), PAD)]
    encoded += [encode_article(a, vocabs, title_len, entity_len) for a in catalog.values()]
    row_of = {news_id: row for row, news_id in enumerate(news_ids) if row}

    stats = EncodeStats()
    rows: List[EncodedImpression] = []
    for impression in impressions:
        history = [row_of[h] for h in impression.history if h in row_of]
        stats.dropped_history += len(impression.history) - len(history)

        candidates, labels = [], []
        for news_id, label in impression.candidates:
            if news_id in row_of:
                candidates.append(row_of[news_id])
                labels.append(label)
            else:
                stats.dropped_candidates += 1
                stats.dropped_positives += label

        if not candidates:
            continue
        if not history:
            stats.empty_histories += 1
        stats.impressions += 1
        stats.positives += sum(labels)
        stats.negatives += len(labels) - sum(labels)
        rows.append(EncodedImpression(
            impression.impression_id, impression.user_id,
            np.array(history, dtype=np.int64),
            np.array(candidates, dtype=np.int64),
            np.array(labels, dtype=np.int64),
        ))

    if stats.dropped_history or stats.dropped_candidates:
        logger.warning('encode: dropped %d unresolvable history ids, %d candidates (%d positives)',
                       stats.dropped_history, stats.dropped_candidates, stats.dropped_positives)
    return EncodedDataset(news_ids, NewsBatch.stack(encoded), rows, stats)


def _ragged(arrays: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    offsets = np.zeros(len(arrays) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(a) for a in arrays])
    flat = np.concatenate(arrays) if arrays else np.zeros(0, dtype=np.int64)
    return offsets, flat.astype(np.int64)


def _unragged(offsets: np.ndarray, flat: np.ndarray) -> List[np.ndarray]:
    offsets = offsets.astype(np.int64)
    return [flat[offsets[i]: offsets[i + 1]].astype(np.int64) for i in range(len(offsets) - 1)]


DATASET_FILE = 'dataset.caum'
NEWS_IDS_FILE = 'news.ids'
IMPRESSION_IDS_FILE = 'impressions.ids'


def save_dataset(dataset: EncodedDataset, directory: str, name: str = DATASET_FILE):
    os.makedirs(directory, exist_ok=True)
    impressions = dataset.impressions
    history_offsets, history = _ragged([i.history for i in impressions])
    cand_offsets, candidates = _ragged([i.candidates for i in impressions])
    _, labels = _ragged([i.labels for i in impressions])

    write_container(os.path.join(directory, name), OrderedDict([
        ('news.title_ids', dataset.news.title_ids.astype(np.uint32)),
        ('news.entity_ids', dataset.news.entity_ids.astype(np.uint32)),
        ('news.topic_ids', dataset.news.topic_ids.astype(np.uint32)),
        ('imp.history_offsets', history_offsets.astype(np.uint32)),
        ('imp.history', history.astype(np.uint32)),
        ('imp.candidate_offsets', cand_offsets.astype(np.uint32)),
        ('imp.candidates', candidates.astype(np.uint32)),
        ('imp.labels', labels.astype(np.uint32)),
    ]), version=DATASET_VERSION)

    stem = os.path.splitext(name)[0]
    with open(os.path.join(directory, f'{stem}.{NEWS_IDS_FILE}'), 'w', encoding='utf-8') as fd:
        fd.write('\n'.join(dataset.news_ids[1:]) + '\n')
    with open(os.path.join(directory, f'{stem}.{IMPRESSION_IDS_FILE}'), 'w', encoding='utf-8') as fd:
        fd.write(''.join(f'{i.impression_id}\t{i.user_id}\n' for i in impressions))


def load_dataset(directory: str, name: str = DATASET_FILE) -> EncodedDataset:
    entries = read_container(os.path.join(directory, name))
    try:
        news = NewsBatch(
            entries['news.title_ids'].astype(np.int64),
            entries['news.entity_ids'].astype(np.int64),
            entries['news.topic_ids'].astype(np.int64),
        )
        histories = _unragged(entries['imp.history_offsets'], entries['imp.history'])
        candidates = _unragged(entries['imp.candidate_offsets'], entries['imp.candidates'])
        labels = _unragged(entries['imp.candidate_offsets'], entries['imp.labels'])
    except KeyError as missing:
        raise FormatError(f'{directory}/{name}: missing entry {missing}') from None

    stem = os.path.splitext(name)[0]
    news_ids = ['', *read_lines(os.path.join(directory, f'{stem}.{NEWS_IDS_FILE}'))]
    ids = [line.split('\t') for line in read_lines(os.path.join(directory, f'{stem}.{IMPRESSION_IDS_FILE}'))]
    if len(news_ids) != len(news) or len(ids) != len(histories):
        raise FormatError(f'{directory}: id files do not match {name}')

    impressions = [
        EncodedImpression(imp_id, user_id, h, c, l)
        for (imp_id, user_id), h, c, l in zip(ids, histories, candidates, labels)
    ]
    return EncodedDataset(news_ids, news, impressions)
