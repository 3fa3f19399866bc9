import csv
import logging
import os
import queue
import threading
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainConfig
from .data import EncodedDataset, EncodedImpression, pad_rows
from .errors import ContractError, TrainingError
from .metrics import METRICS, MetricReport
from .model import CaumModel
from .params import adam_step
from .scorer import evaluate_model


logger = logging.getLogger(__name__)

LOSS_FILE = 'loss.csv'
VALID_FILE = 'valid_metrics.csv'
CHECKPOINT_NAME = 'epoch-{}.caum'
PIPELINE_DEPTH = 4


@dataclass
class TrainPair:
    impression_id: str
    history: np.ndarray
    positive: int
    negative: int


@dataclass
class SampleStats:
    pairs: int = 0
    no_history: int = 0
    single_class: int = 0


def bpr_loss(positive, negative) -> Tensor:
    '''mean(-log σ(ŷ⁺ - ŷ⁻)) over a batch of score pairs.'''
    positive, negative = ad.constant(positive), ad.constant(negative)
    if positive.data.size == 0:
        raise ContractError('bpr_loss needs a nonempty batch')
    if positive.shape != negative.shape:
        raise ContractError(f'bpr_loss: {positive.shape} positive and {negative.shape} negative scores')
    return ad.scale(ad.mean(ad.log_sigmoid(positive - negative)), -1.0)


def sample_pairs(impression: EncodedImpression, rng: np.random.Generator,
                 negatives_per_positive: int = 1) -> List[TrainPair]:
    '''
    For every positive, draw negatives of the same impression uniformly,
    without replacement when there are enough of them. Impressions without a
    positive or a negative give no pairs.
    '''
    labels = impression.labels
    positives = impression.candidates[labels == 1]
    negatives = impression.candidates[labels == 0]
    if not len(positives) or not len(negatives):
        return []

    replace = len(negatives) < negatives_per_positive
    pairs = []
    for positive in positives:
        for negative in rng.choice(negatives, size=negatives_per_positive, replace=replace):
            pairs.append(TrainPair(impression.impression_id, impression.history, int(positive), int(negative)))
    return pairs


def epoch_pairs(dataset: EncodedDataset, rng: np.random.Generator,
                negatives_per_positive: int) -> Tuple[List[TrainPair], SampleStats]:
    '''Shuffle impressions, then sample their pairs in that order.'''
    stats = SampleStats()
    pairs: List[TrainPair] = []
    for index in rng.permutation(len(dataset.impressions)):
        impression = dataset.impressions[index]
        if not len(impression.history):
            stats.no_history += 1
            continue
        sampled = sample_pairs(impression, rng, negatives_per_positive)
        if not sampled:
            stats.single_class += 1
        pairs.extend(sampled)
    stats.pairs = len(pairs)
    return pairs, stats


@dataclass
class Batch:
    step: int
    history: np.ndarray
    mask: np.ndarray
    candidates: np.ndarray


def make_batch(step: int, pairs: List[TrainPair], history_len: int) -> Batch:
    rows = [pad_rows(p.history, history_len) for p in pairs]
    return Batch(
        step,
        np.stack([r.rows for r in rows]),
        np.stack([r.mask for r in rows]),
        np.array([[p.positive, p.negative] for p in pairs], dtype=np.int64),
    )


class BatchPipeline:
    '''
    Producer thread turning pairs into index batches while the consumer
    trains. Batches come out in production order.
    '''

    _DONE = object()

    def __init__(self, pairs: List[TrainPair], batch_size: int,
                 history_len: int, first_step: int = 0):
        self.pairs = pairs
        self.batch_size = batch_size
        self.history_len = history_len
        self.first_step = first_step
        self.queue: 'queue.Queue' = queue.Queue(maxsize=PIPELINE_DEPTH)
        self.error: Optional[BaseException] = None
        self.stopped = threading.Event()

    def _produce(self):
        try:
            for i, start in enumerate(range(0, len(self.pairs), self.batch_size)):
                if self.stopped.is_set():
                    return
                chunk = self.pairs[start: start + self.batch_size]
                self.queue.put(make_batch(self.first_step + i, chunk, self.history_len))
        except BaseException as e:
            self.error = e
        finally:
            self.queue.put(self._DONE)

    def __iter__(self) -> Iterator[Batch]:
        worker = threading.Thread(target=self._produce, name='caum-batches', daemon=True)
        worker.start()
        try:
            while True:
                item = self.queue.get()
                if item is self._DONE:
                    break
                yield item
        finally:
            self.stopped.set()
            while worker.is_alive():
                try:
                    self.queue.get_nowait()
                except queue.Empty:
                    worker.join(timeout=0.01)
        if self.error is not None:
            raise self.error


@dataclass
class TrainResult:
    losses: List[Tuple[int, int, float]] = field(default_factory=list)
    checkpoints: List[str] = field(default_factory=list)
    valid: List[MetricReport] = field(default_factory=list)
    samples: List[SampleStats] = field(default_factory=list)


def train_step(model: CaumModel, batch: Batch, dataset: EncodedDataset, config: TrainConfig) -> float:
    model.store.zero_grad()
    scores = model.score(dataset.news, batch.history, batch.mask, batch.candidates)
    size = len(batch.candidates)
    positive = ad.reshape(ad.take(scores, [0], axis=1), size)
    negative = ad.reshape(ad.take(scores, [1], axis=1), size)
    loss = bpr_loss(positive, negative)

    value = loss.item()
    if not np.isfinite(value):
        raise TrainingError(f'loss is {value} at batch {batch.step}', batch=batch.step)
    loss.backward()
    adam_step(model.store, config.lr, config.beta1, config.beta2, config.eps)
    return value


def _append_rows(path: str, header: List[str], rows: List[list]):
    fresh = not os.path.exists(path)
    with open(path, 'a', newline='', encoding='utf-8') as fd:
        writer = csv.writer(fd)
        if fresh:
            writer.writerow(header)
        writer.writerows(rows)


def train(model: CaumModel, dataset: EncodedDataset, config: TrainConfig, out: Optional[str] = None,
          valid: Optional[EncodedDataset] = None) -> TrainResult:
    '''
    Shuffled mini-batch BPR training with Adam. With `out`, the loss log, one
    checkpoint per epoch and the per-epoch validation metrics are written there.
    '''
    if not dataset.impressions:
        raise ContractError('cannot train on an empty dataset')
    if out is not None:
        os.makedirs(out, exist_ok=True)
        for name in (LOSS_FILE, VALID_FILE):
            if os.path.exists(os.path.join(out, name)):
                os.remove(os.path.join(out, name))

    rng = np.random.default_rng(config.seed)
    result = TrainResult()
    step = 0

    for epoch in range(1, config.epochs + 1):
        pairs, stats = epoch_pairs(dataset, rng, config.negatives)
        result.samples.append(stats)
        if stats.no_history or stats.single_class:
            logger.warning('epoch %d: skipped %d impressions without history, %d without both labels',
                           epoch, stats.no_history, stats.single_class)
        if not pairs:
            raise TrainingError('no training pairs: every impression lacks a history or a label class')

        epoch_losses = []
        pipeline = BatchPipeline(pairs, config.batch_size, model.config.history, first_step=step)
        for batch in pipeline:
            loss = train_step(model, batch, dataset, config)
            epoch_losses.append((epoch, batch.step, loss))
            step = batch.step + 1
        result.losses.extend(epoch_losses)
        logger.info('epoch %d: %d batches, mean loss %.6f', epoch, len(epoch_losses),
                    float(np.mean([l for _, _, l in epoch_losses])))

        report = None
        if valid is not None:
            report = evaluate_model(model, valid, threads=config.threads)
            result.valid.append(report)
            logger.info('epoch %d: validation %s', epoch,
                        ' '.join(f'{name}={report[name]:.4f}' for name in METRICS))

        if out is not None:
            _append_rows(os.path.join(out, LOSS_FILE), ['epoch', 'step', 'loss'],
                         [[e, s, repr(l)] for e, s, l in epoch_losses])
            path = os.path.join(out, CHECKPOINT_NAME.format(epoch))
            model.save(path)
            result.checkpoints.append(path)
            if report is not None:
                _append_rows(os.path.join(out, VALID_FILE), ['epoch', *METRICS],
                             [[epoch, *(repr(report[name]) for name in METRICS)]])

    return result
