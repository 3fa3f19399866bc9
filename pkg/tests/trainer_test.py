import dataclasses
import math

import numpy as np
import pytest

from caum import autodiff as ad
from caum import trainer
from caum.config import PRESETS, VARIANT_FLAGS, ModelConfig, TrainConfig
from caum.data import EncodedImpression, build_vocabs, encode_dataset, parse_behaviors_tsv, parse_news_tsv
from caum.errors import ContractError, DimensionError, TrainingError
from caum.model import CaumModel, match_score
from caum.scorer import evaluate_model
from caum.synthetic import SyntheticSpec, write_corpus
from caum.trainer import (LOSS_FILE, VALID_FILE, BatchPipeline, TrainPair, bpr_loss, epoch_pairs, make_batch,
                          sample_pairs, train, train_step)
from caum.types import NewsBatch
from utils import assert_close, check_gradients, dot_loop


def impression(labels, history=(1, 2, 3)):
    labels = np.asarray(labels, dtype=np.int64)
    return EncodedImpression('1', 'U1', np.asarray(history, dtype=np.int64), np.arange(10, 10 + len(labels)), labels)


def toy_train(**kwargs):
    values = dict(epochs=1, lr=1e-3, batch_size=8, seed=0)
    values.update(kwargs)
    return TrainConfig(**values).validate()


@pytest.mark.trainer
@pytest.mark.run(order=7)
def test_bpr_loss_values():
    assert abs(bpr_loss(np.zeros(1), np.zeros(1)).item() - math.log(2)) < 1e-12
    assert abs(bpr_loss(np.ones(1), np.zeros(1)).item() - 0.313262) < 1e-6
    assert abs(bpr_loss(np.array([1.0, 0.0]), np.array([0.0, 0.0])).item() - (0.3132617 + math.log(2)) / 2) < 1e-6


@pytest.mark.trainer
@pytest.mark.run(order=7)
def test_bpr_loss_falls_as_the_margin_grows():
    margins = np.linspace(-5, 5, 41)
    losses = [bpr_loss(np.array([m]), np.zeros(1)).item() for m in margins]
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert bpr_loss(np.array([800.0]), np.zeros(1)).item() >= 0.0
    assert np.isfinite(bpr_loss(np.array([-800.0]), np.zeros(1)).item())


@pytest.mark.trainer
@pytest.mark.run(order=7)
def test_bpr_loss_gradient(rng):
    positive = ad.Tensor(rng.normal(size=5), requires_grad=True)
    negative = ad.Tensor(rng.normal(size=5), requires_grad=True)
    check_gradients(lambda: bpr_loss(positive, negative), [positive, negative])


@pytest.mark.trainer
@pytest.mark.run(order=7)
def test_bpr_loss_contract():
    with pytest.raises(ContractError):
        bpr_loss(np.zeros(0), np.zeros(0))
    with pytest.raises(ContractError):
        bpr_loss(np.zeros(2), np.zeros(3))


@pytest.mark.trainer
@pytest.mark.run(order=7)
@pytest.mark.parametrize('labels, pairs', [
    ([1, 0], 1),
    ([1, 0, 1, 0, 0], 2),
    ([1, 1], 0),
    ([0, 0, 0], 0),
])
def test_pairs_per_impression(rng, labels, pairs):
    imp = impression(labels)
    sampled = sample_pairs(imp, rng)
    assert len(sampled) == pairs
    positives = set(imp.candidates[imp.labels == 1].tolist())
    negatives = set(imp.candidates[imp.labels == 0].tolist())
    for pair in sampled:
        assert pair.positive in positives and pair.negative in negatives
        assert np.array_equal(pair.history, imp.history)


@pytest.mark.trainer
@pytest.mark.run(order=7)
def test_negatives_are_drawn_uniformly(rng):
    imp = impression([1, 0, 0, 0, 0])
    counts = {}
    for _ in range(10000):
        negative = sample_pairs(imp, rng)[0].negative
        counts[negative] = counts.get(negative, 0) + 1
    assert sorted(counts) == [11, 12, 13, 14]
    for count in counts.values():
        assert abs(count - 2500) <= 150


@pytest.mark.trainer
@pytest.mark.run(order=7)
def test_several_negatives_per_positive(rng):
    distinct = sample_pairs(impression([1, 0, 0, 0]), rng, negatives_per_positive=3)
    assert len({p.negative for p in distinct}) == 3

    # fewer negatives than asked: drawn with replacement
    assert len(sample_pairs(impression([1, 0, 0]), rng, negatives_per_positive=3)) == 3


@pytest.mark.trainer
@pytest.mark.run(order=7)
def test_epoch_pairs_counts_skipped_impressions(encoded, rng):
    dataset, _ = encoded
    dataset.impressions[0].history = np.zeros(0, dtype=np.int64)
    dataset.impressions[1].labels = np.zeros_like(dataset.impressions[1].labels)
    pairs, stats = epoch_pairs(dataset, rng, 1)
    assert stats.no_history == 1
    assert stats.single_class >= 1
    assert stats.pairs == len(pairs) > 0
    assert all(p.impression_id not in ('1', '2') for p in pairs)


@pytest.mark.trainer
@pytest.mark.run(order=7)
def test_match_score(rng):
    u = np.array([[1.0, 0.0, 0.0], [0.6, 0.8, 0.0]])
    n_c = np.array([[0.0, 1.0, 0.0], [0.6, 0.8, 0.0]])
    assert_close('match', match_score(u, n_c).data, [0.0, 1.0], 1e-12)

    a, b = rng.normal(size=(4, 16)), rng.normal(size=(4, 16))
    assert_close('dot', match_score(a, b).data, [dot_loop(x, y) for x, y in zip(a, b)], 1e-12)

    with pytest.raises(DimensionError):
        match_score(a, b[:, :8])


def small_table(rng, words, entities, topics, size=6, config=None):
    titles = rng.integers(1, words, size=(size, config.title_len))
    titles[:, 4:] = 0
    entity_ids = rng.integers(0, entities, size=(size, config.entity_len))
    return NewsBatch(titles, entity_ids, rng.integers(1, topics, size=size))


@pytest.mark.trainer
@pytest.mark.run(order=7)
def test_end_to_end_gradient(rng, toy_config):
    model = CaumModel(toy_config, 12, 7, 4, seed=3)
    table = small_table(rng, 12, 7, 4, config=toy_config)
    history = np.array([[1, 2, 3, 0], [4, 5, 1, 2]])
    mask = history != 0
    candidates = np.array([[4, 5], [3, 1]])

    def loss():
        scores = model.score(table, history, mask, candidates)
        positive = ad.reshape(ad.take(scores, [0], axis=1), 2)
        negative = ad.reshape(ad.take(scores, [1], axis=1), 2)
        return bpr_loss(positive, negative)

    store = model.store
    names = ('news.words', 'news.entities', 'news.title.W_k.0', 'news.title.pool.q', 'news.entity.W_v.1',
             'user.Q_u', 'user.Q_c', 'user.W_r.1', 'user.W_o.0', 'user.W_c', 'user.b_cnn', 'user.P_m',
             'user.phi.W1', 'user.phi.w2')
    check_gradients(loss, [store[name] for name in names], max_coords=15)


@pytest.mark.trainer
@pytest.mark.run(order=7)
@pytest.mark.parametrize('name', sorted(VARIANT_FLAGS))
def test_gradient_reaches_the_active_blocks(encoded, rng, toy_config, name):
    dataset, vocabs = encoded
    config = dataclasses.replace(toy_config, **dict(zip(('candi_self_att', 'candi_cnn', 'candi_att'),
                                                        VARIANT_FLAGS[name])))
    model = CaumModel.for_vocabs(config, vocabs)
    pairs, _ = epoch_pairs(dataset, rng, 1)
    train_step(model, make_batch(0, pairs[:6], config.history), dataset, toy_train())

    norms = model.store.grad_norms()
    for param in ('news.words', 'news.title.W_q.0', 'user.Q_u', 'user.W_r.0', 'user.W_o.1', 'user.W_c',
                  'user.P_m', 'user.phi.W1', 'user.phi.w2'):
        assert norms[param] > 0.0, param
    assert (norms['user.Q_c'] > 0.0) == config.candi_self_att


@pytest.mark.trainer
@pytest.mark.run(order=7)
def test_loss_is_ln2_with_zeroed_fusion(encoded, rng, toy_config):
    dataset, vocabs = encoded
    model = CaumModel.for_vocabs(toy_config, vocabs)
    model.store.set('user.P_m', np.zeros(model.store['user.P_m'].shape))
    pairs, _ = epoch_pairs(dataset, rng, 1)
    loss = train_step(model, make_batch(0, pairs[:6], toy_config.history), dataset, toy_train())
    assert abs(loss - math.log(2)) < 1e-12


@pytest.mark.trainer
@pytest.mark.run(order=7)
def test_zero_learning_rate_keeps_parameters(encoded, toy_config):
    dataset, vocabs = encoded
    model = CaumModel.for_vocabs(toy_config, vocabs)
    before = {name: value.copy() for name, value in model.store.arrays().items()}
    train(model, dataset, toy_train(lr=0.0))
    for name, value in model.store.arrays().items():
        assert np.array_equal(value, before[name]), name


@pytest.mark.trainer
@pytest.mark.run(order=7)
def test_training_is_deterministic(tmp_path, encoded, toy_config):
    dataset, vocabs = encoded
    for run in ('first', 'second'):
        train(CaumModel.for_vocabs(toy_config, vocabs, seed=2), dataset, toy_train(epochs=2, seed=2),
              out=str(tmp_path / run))
    for name in (LOSS_FILE, 'epoch-1.caum', 'epoch-2.caum'):
        assert (tmp_path / 'first' / name).read_bytes() == (tmp_path / 'second' / name).read_bytes()


@pytest.mark.trainer
@pytest.mark.run(order=7)
def test_training_outputs(tmp_path, encoded, toy_config):
    dataset, vocabs = encoded
    model = CaumModel.for_vocabs(toy_config, vocabs)
    result = train(model, dataset, toy_train(epochs=2), out=str(tmp_path), valid=dataset)

    lines = (tmp_path / LOSS_FILE).read_text().splitlines()
    assert lines[0] == 'epoch,step,loss'
    assert len(lines) == len(result.losses) + 1
    steps = [step for _, step, _ in result.losses]
    assert steps == list(range(len(steps)))
    assert all(np.isfinite(loss) for _, _, loss in result.losses)

    valid = (tmp_path / VALID_FILE).read_text().splitlines()
    assert valid[0] == 'epoch,auc,mrr,ndcg@5,ndcg@10'
    assert [line.split(',')[0] for line in valid[1:]] == ['1', '2']
    assert len(result.valid) == 2

    assert result.checkpoints == [str(tmp_path / 'epoch-1.caum'), str(tmp_path / 'epoch-2.caum')]
    restored = CaumModel.from_checkpoint(result.checkpoints[-1], toy_config)
    # checkpoints hold float32 values
    for name, value in model.store.arrays().items():
        assert np.array_equal(restored.store[name].data, value.astype(np.float32)), name


@pytest.mark.trainer
@pytest.mark.run(order=7)
def test_nan_loss_stops_training(encoded, toy_config):
    dataset, vocabs = encoded
    model = CaumModel.for_vocabs(toy_config, vocabs)
    model.store.set('news.words', np.full(model.store['news.words'].shape, np.nan))
    with pytest.raises(TrainingError) as error:
        train(model, dataset, toy_train())
    assert error.value.batch == 0


@pytest.mark.trainer
@pytest.mark.run(order=7)
def test_nothing_to_train_on(encoded, toy_config):
    dataset, vocabs = encoded
    model = CaumModel.for_vocabs(toy_config, vocabs)
    with pytest.raises(ContractError):
        train(model, dataclasses.replace(dataset, impressions=[]), toy_train())

    for imp in dataset.impressions:
        imp.labels = np.ones_like(imp.labels)
    with pytest.raises(TrainingError):
        train(model, dataset, toy_train())


def pairs_of(count):
    return [TrainPair(str(i), np.array([1, 2]), 3, 4) for i in range(count)]


@pytest.mark.trainer
@pytest.mark.run(order=7)
def test_pipeline_keeps_batch_order():
    batches = list(BatchPipeline(pairs_of(10), batch_size=3, history_len=4, first_step=5))
    assert [b.step for b in batches] == [5, 6, 7, 8]
    assert [len(b.candidates) for b in batches] == [3, 3, 3, 1]
    assert batches[0].history.shape == (3, 4)
    assert batches[0].mask[0].tolist() == [True, True, False, False]
    assert batches[0].candidates[0].tolist() == [3, 4]


@pytest.mark.trainer
@pytest.mark.run(order=7)
def test_pipeline_reraises_producer_errors(monkeypatch):
    real = trainer.make_batch

    def failing(step, pairs, history_len):
        if step == 1:
            raise ValueError('broken batch')
        return real(step, pairs, history_len)

    monkeypatch.setattr(trainer, 'make_batch', failing)
    seen = []
    with pytest.raises(ValueError):
        for batch in BatchPipeline(pairs_of(9), batch_size=3, history_len=4):
            seen.append(batch.step)
    assert seen == [0]


def synthetic_dataset(tmp_path, spec, config):
    paths = write_corpus(str(tmp_path / 'raw'), spec)
    catalog = parse_news_tsv(paths['news'])
    vocabs = build_vocabs(catalog)

    def encode(path):
        impressions, _ = parse_behaviors_tsv(path)
        return encode_dataset(catalog, impressions, vocabs, config.title_len, config.entity_len)

    return encode(paths['behaviors']), encode(paths['valid_behaviors']), vocabs


@pytest.mark.trainer
@pytest.mark.slow
@pytest.mark.run(order=7)
def test_tiny_corpus_is_overfit(tmp_path):
    config = ModelConfig(d=32, heads=4, history=20, phi_hidden=16)
    dataset, _, vocabs = synthetic_dataset(tmp_path, SyntheticSpec(users=20, news=40, seed=1), config)
    model = CaumModel.for_vocabs(config, vocabs, seed=1)
    result = train(model, dataset, toy_train(epochs=100, lr=1e-3, batch_size=16, seed=1))

    means = [np.mean([l for e, _, l in result.losses if e == epoch]) for epoch in range(1, 6)]
    assert all(a > b for a, b in zip(means, means[1:]))
    assert evaluate_model(model, dataset)['auc'] >= 0.95


@pytest.mark.trainer
@pytest.mark.slow
@pytest.mark.run(order=7)
def test_desk_preset_learns_the_topic_signal(tmp_path):
    desk = PRESETS['desk']
    base_config = ModelConfig(**{k: v for k, v in desk.items() if k in ('d', 'heads', 'history', 'phi_hidden')})
    train_config = toy_train(epochs=desk['epochs'], lr=desk['lr'], batch_size=32, seed=0)
    dataset, valid, vocabs = synthetic_dataset(tmp_path, SyntheticSpec(seed=0), base_config)

    results = {}
    for name in ('caum', 'base'):
        flags = dict(zip(('candi_self_att', 'candi_cnn', 'candi_att'), VARIANT_FLAGS[name]))
        config = dataclasses.replace(base_config, **flags)
        model = CaumModel.for_vocabs(config, vocabs, seed=0)
        train(model, dataset, train_config)
        results[name] = (evaluate_model(model, dataset)['auc'], evaluate_model(model, valid)['auc'])

    train_auc, valid_auc = results['caum']
    assert train_auc >= 0.95
    assert valid_auc >= 0.70
    assert valid_auc > results['base'][1]
