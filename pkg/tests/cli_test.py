import json
import os
import re

import numpy as np
import pytest

from caum.cli import COMMAND_FLAGS, EFFECTIVE_CONF, main
from caum.config import MODEL_KEYS, TRAIN_KEYS, build_config, read_config_file
from caum.data import load_dataset
from caum.errors import ConfigError
from caum.model import CaumModel
from caum.scorer import score_dataset
from utils import BAD_ERROR_FORMAT, ERROR_FORMAT, MUST_FAIL, MUST_SUCCEED, run_caum


def caum(capsys, *args):
    code = main([str(a) for a in args])
    out, err = capsys.readouterr()
    return code, out, err


def expect_ok(capsys, *args):
    code, out, err = caum(capsys, *args)
    assert code == 0, MUST_SUCCEED % (' '.join(map(str, args)), err)
    return out


def expect_error(capsys, *args):
    code, out, err = caum(capsys, *args)
    assert code == 1, MUST_FAIL % ' '.join(map(str, args))
    last = err.strip().split('\n')[-1]
    match = re.match(ERROR_FORMAT, last)
    assert match, BAD_ERROR_FORMAT % err
    return match.group(1)


@pytest.fixture
def prepared(tmp_path, corpus, capsys):
    out = tmp_path / 'data'
    expect_ok(capsys, 'prepare', '--preset', 'toy', '--news', corpus['news'], '--behaviors', corpus['behaviors'],
              '--valid-behaviors', corpus['valid_behaviors'], '--out', out)
    return out


@pytest.fixture
def trained(tmp_path, prepared, capsys):
    out = tmp_path / 'run'
    expect_ok(capsys, 'train', '--preset', 'toy', '--data', prepared, '--valid-data', prepared / 'valid.caum',
              '--out', out, '--seed', 1)
    return out


@pytest.mark.cli
@pytest.mark.run(order=8)
def test_prepare_writes_the_dataset(prepared):
    for name in ('dataset.caum', 'dataset.news.ids', 'dataset.impressions.ids', 'valid.caum', 'words.vocab',
                 'entities.vocab', 'topics.vocab', EFFECTIVE_CONF):
        assert (prepared / name).exists(), name
    effective = read_config_file(str(prepared / EFFECTIVE_CONF))
    assert effective['d'] == '8'
    assert effective['preset'] == 'toy'


@pytest.mark.cli
@pytest.mark.run(order=8)
def test_prepare_synthetic(tmp_path, capsys):
    out = expect_ok(capsys, 'prepare', '--synthetic', '--preset', 'toy', '--out', tmp_path / 'synthetic')
    assert 'vocabulary:' in out
    assert out.splitlines()[-2].startswith('train:')
    assert out.splitlines()[-1].startswith('valid:')
    for name in ('raw/news.tsv', 'raw/behaviors.tsv', 'dataset.caum', 'valid.caum'):
        assert (tmp_path / 'synthetic' / name).exists(), name


@pytest.mark.cli
@pytest.mark.run(order=8)
def test_train_writes_its_run(trained, capsys):
    for name in ('epoch-1.caum', 'loss.csv', 'valid_metrics.csv', EFFECTIVE_CONF):
        assert (trained / name).exists(), name
    assert read_config_file(str(trained / EFFECTIVE_CONF))['seed'] == '1'


@pytest.mark.cli
@pytest.mark.run(order=8)
def test_train_twice_with_the_same_seed(tmp_path, prepared, capsys):
    for run in ('first', 'second'):
        expect_ok(capsys, 'train', '--preset', 'toy', '--data', prepared, '--out', tmp_path / run, '--seed', 7)
    assert (tmp_path / 'first' / 'loss.csv').read_bytes() == (tmp_path / 'second' / 'loss.csv').read_bytes()


@pytest.mark.cli
@pytest.mark.run(order=8)
def test_eval_reads_the_model_shape_next_to_the_checkpoint(tmp_path, prepared, trained, capsys):
    out = expect_ok(capsys, 'eval', '--checkpoint', trained / 'epoch-1.caum', '--data', prepared / 'valid.caum',
                    '--out', tmp_path / 'eval')
    assert out.splitlines()[0].split() == ['metric', 'mean', 'std', 'n']
    metrics = json.loads((tmp_path / 'eval' / 'metrics.json').read_text())
    for name in ('auc', 'mrr', 'ndcg@5', 'ndcg@10'):
        assert 0.0 <= metrics['metrics'][name]['mean'] <= 1.0


@pytest.mark.cli
@pytest.mark.run(order=8)
def test_eval_with_a_mismatched_model_shape(prepared, trained, capsys):
    error = expect_error(capsys, 'eval', '--checkpoint', trained / 'epoch-1.caum', '--data', prepared, '--d', '16',
                         '--heads', '2')
    assert error == 'FormatError'


@pytest.mark.cli
@pytest.mark.run(order=8)
def test_eval_of_a_perfect_ranking(tmp_path, corpus, prepared, trained, capsys):
    checkpoint = trained / 'epoch-1.caum'
    saved = read_config_file(str(trained / EFFECTIVE_CONF))
    config = build_config('eval', {k: v for k, v in saved.items() if k in MODEL_KEYS}).model
    dataset = load_dataset(str(prepared))
    scored, _ = score_dataset(CaumModel.from_checkpoint(str(checkpoint), config), dataset)
    scores = {s.impression_id: s.scores for s in scored}

    # relabel so that the model's top candidates are exactly the clicked ones
    lines = []
    for imp in dataset.impressions:
        if imp.impression_id not in scores:
            continue
        top = scores[imp.impression_id].max()
        shown = ' '.join(f'{dataset.news_ids[row]}-{int(score == top)}'
                         for row, score in zip(imp.candidates, scores[imp.impression_id]))
        history = ' '.join(dataset.news_ids[row] for row in imp.history)
        lines.append(f'{imp.impression_id}\t{imp.user_id}\t11/15/2019 8:55:22 AM\t{history}\t{shown}\n')
    behaviors = tmp_path / 'perfect_behaviors.tsv'
    behaviors.write_text(''.join(lines))

    expect_ok(capsys, 'prepare', '--preset', 'toy', '--news', corpus['news'], '--behaviors', behaviors,
              '--out', tmp_path / 'perfect')
    expect_ok(capsys, 'eval', '--checkpoint', checkpoint, '--data', tmp_path / 'perfect', '--out', tmp_path / 'eval')
    metrics = json.loads((tmp_path / 'eval' / 'metrics.json').read_text())
    for name in ('auc', 'mrr', 'ndcg@5', 'ndcg@10'):
        assert metrics['metrics'][name]['mean'] == pytest.approx(1.0), name


def ranking(out):
    rows = [line.split('\t') for line in out.strip().splitlines()]
    return [(int(rank), news_id, float(score)) for rank, news_id, score in rows]


@pytest.mark.cli
@pytest.mark.run(order=8)
def test_score_naive_and_amortized_agree(tmp_path, prepared, trained, capsys):
    history, candidates = tmp_path / 'history.txt', tmp_path / 'candidates.txt'
    history.write_text('N1 N2 N3 N7\n')
    candidates.write_text('N4\nN5\nN6\nN404\n')
    args = ['score', '--checkpoint', trained / 'epoch-1.caum', '--data', prepared, '--user-history', history,
            '--candidates', candidates]

    amortized = ranking(expect_ok(capsys, *args, '--out', tmp_path / 'scores'))
    naive = ranking(expect_ok(capsys, *args, '--naive'))
    assert [r for r, _, _ in amortized] == [1, 2, 3]
    assert sorted(n for _, n, _ in amortized) == ['N4', 'N5', 'N6']
    assert [n for _, n, _ in amortized] == [n for _, n, _ in naive]
    assert np.allclose([s for _, _, s in amortized], [s for _, _, s in naive], rtol=1e-7, atol=1e-9)
    assert [s for _, _, s in amortized] == sorted((s for _, _, s in amortized), reverse=True)
    assert (tmp_path / 'scores' / 'scores.tsv').exists()


@pytest.mark.cli
@pytest.mark.run(order=8)
def test_score_needs_a_known_click(tmp_path, prepared, trained, capsys):
    history, candidates = tmp_path / 'history.txt', tmp_path / 'candidates.txt'
    history.write_text('N900 N901\n')
    candidates.write_text('N4\n')
    error = expect_error(capsys, 'score', '--checkpoint', trained / 'epoch-1.caum', '--data', prepared,
                         '--user-history', history, '--candidates', candidates)
    assert error == 'ContractError'


@pytest.mark.cli
@pytest.mark.run(order=8)
def test_bench(tmp_path, capsys):
    out = expect_ok(capsys, 'bench', '--preset', 'toy', '--grid', 'N=4,M=1,2,3,d=8', '--reps', 1,
                    '--out', tmp_path / 'bench')
    assert out.splitlines()[-1] == 'N=4 d=8: count slope in M naive 3640, amortized 1048'
    lines = (tmp_path / 'bench' / 'bench.csv').read_text().splitlines()
    assert lines[0] == 'variant,N,M,d,reps,median_ns,mult_count'
    assert len(lines) == 7


@pytest.mark.cli
@pytest.mark.run(order=8)
def test_config_file_then_flags(tmp_path, capsys):
    conf = tmp_path / 'run.conf'
    conf.write_text('# bench settings\npreset = toy\nepochs = 2\nvariant = base\n\ngrid = N=4,M=1,d=8\nreps = 1\n')
    expect_ok(capsys, 'bench', '--config', conf, '--epochs', 5, '--out', tmp_path / 'out')

    effective = read_config_file(str(tmp_path / 'out' / EFFECTIVE_CONF))
    assert effective['epochs'] == '5'
    assert effective['d'] == '8'
    assert effective['variant'] == 'base'
    assert effective['candi_att'] == 'off'
    assert effective['grid'] == 'N=4,M=1,d=8'


@pytest.mark.cli
@pytest.mark.run(order=8)
@pytest.mark.parametrize('args, error', [
    (['train'], 'ConfigError'),
    (['frobnicate'], 'ConfigError'),
    (['bench', '--d', '10', '--heads', '4'], 'ConfigError'),
    (['bench', '--window', '3', '--history', '4'], 'ConfigError'),
    (['bench', '--lr', 'fast'], 'ConfigError'),
    (['bench', '--grid', 'N=4,M=1'], 'ConfigError'),
    (['bench', '--preset', 'huge'], 'ConfigError'),
    (['eval', '--checkpoint', '/nonexistent/epoch-1.caum', '--data', '/nonexistent'], None),
])
def test_errors_are_one_line(capsys, args, error):
    name = expect_error(capsys, *args)
    if error is not None:
        assert name == error


@pytest.mark.cli
@pytest.mark.run(order=8)
def test_unknown_key_in_config_file(tmp_path, capsys):
    conf = tmp_path / 'bad.conf'
    conf.write_text('colour = blue\n')
    assert expect_error(capsys, 'bench', '--config', conf) == 'ConfigError'


@pytest.mark.cli
@pytest.mark.run(order=8)
def test_inputs_that_are_not_utf8(tmp_path, capsys):
    news, behaviors = tmp_path / 'news.tsv', tmp_path / 'behaviors.tsv'
    news.write_bytes(b'N1\tnews\tworld\t\xff\xfe\t\t\t[]\t[]\nN2\tnews\tworld\tOk\t\t\t[]\t[]\n')
    behaviors.write_bytes(b'1\tU1\ttime\tN2\tN1-1 N2-0\n')
    assert expect_error(capsys, 'prepare', '--preset', 'toy', '--news', news, '--behaviors', behaviors,
                        '--out', tmp_path / 'data') == 'FormatError'

    conf = tmp_path / 'latin1.conf'
    conf.write_bytes(b'd = \xff\n')
    assert expect_error(capsys, 'bench', '--config', conf) == 'FormatError'


@pytest.mark.cli
@pytest.mark.run(order=8)
@pytest.mark.parametrize('command', sorted(COMMAND_FLAGS))
def test_help_lists_every_flag(capsys, command):
    with pytest.raises(SystemExit) as done:
        main([command, '--help'])
    assert done.value.code == 0
    out = capsys.readouterr().out
    for key in (*COMMAND_FLAGS[command], *MODEL_KEYS, *TRAIN_KEYS, 'config', 'out', 'preset', 'variant'):
        assert '--' + key.replace('_', '-') in out, key


@pytest.mark.cli
@pytest.mark.run(order=8)
def test_resolution_order():
    run = build_config('train', {'preset': 'desk', 'variant': 'base', 'candi_att': 'on'}, {'d': '32'})
    assert (run.model.d, run.model.heads, run.train.lr) == (32, 4, 1e-3)
    assert (run.model.candi_self_att, run.model.candi_cnn, run.model.candi_att) == (False, False, True)

    defaults = build_config('train')
    assert (defaults.model.d, defaults.model.heads, defaults.model.window) == (400, 20, 1)
    assert (defaults.train.lr, defaults.train.batch_size, defaults.train.epochs) == (5e-5, 32, 3)

    with pytest.raises(ConfigError):
        build_config('train', {'candi_cnn': 'maybe'})


@pytest.mark.cli
@pytest.mark.run(order=8)
def test_command_line_script(caum_path, tmp_path):
    code, _, err = run_caum(caum_path, ['train', '--out', str(tmp_path)])
    assert code == 1, MUST_FAIL % 'train'
    assert re.match(ERROR_FORMAT, err.strip().split('\n')[-1]), BAD_ERROR_FORMAT % err
    assert not os.path.exists(tmp_path / EFFECTIVE_CONF)
