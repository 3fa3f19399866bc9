import argparse
import logging
import os
import sys
from typing import Dict, List, Optional

import numpy as np

from . import bench as benchmark
from .config import MODEL_KEYS, PRESETS, TRAIN_KEYS, VARIANT_FLAGS, RunConfig, build_config, read_config_file
from .data import (DATASET_FILE, Vocabs, build_vocabs, encode_dataset, encode_history, load_dataset,
                   parse_behaviors_tsv, parse_news_tsv, read_lines, save_dataset)
from .errors import CaumError, ConfigError, ContractError
from .log import configure_logging
from .metrics import evaluate
from .model import CaumModel, parameter_count
from .scorer import UserWeights, score_dataset, score_user
from .synthetic import SyntheticSpec, write_corpus
from .trainer import train


logger = logging.getLogger(__name__)

VALID_FILE = 'valid.caum'
EFFECTIVE_CONF = 'effective.conf'

FLAG_HELP = {
    'd': 'news and user vector width',
    'heads': 'attention heads K (must divide d)',
    'window': 'Candi-CNN half window h (window size 2h+1)',
    'history': 'clicks kept per user N',
    'title_len': 'title tokens kept per article',
    'entity_len': 'entities kept per article',
    'phi_hidden': 'hidden width of the Candi-Att scoring MLP',
    'candi_self_att': 'candidate-aware self-attention on|off',
    'candi_cnn': 'candidate-aware CNN on|off',
    'candi_att': 'candidate-aware attention pooling on|off',
    'cnn_activation': 'Candi-CNN activation relu|linear',
    'cnn_bias': 'Candi-CNN bias on|off',
    'precision': 'float width 32|64',
    'epochs': 'training epochs',
    'lr': 'Adam learning rate',
    'batch_size': 'training pairs per batch',
    'seed': 'seed of initialization, shuffling and sampling',
    'negatives': 'negatives sampled per positive',
    'beta1': 'Adam beta1',
    'beta2': 'Adam beta2',
    'eps': 'Adam epsilon',
    'threads': 'worker cap for scoring threads and TSV parsing processes',
}

COMMAND_FLAGS = {
    'prepare': {
        'news': 'news.tsv of the training split',
        'behaviors': 'behaviors.tsv of the training split',
        'valid_news': 'news.tsv of the validation split (defaults to --news)',
        'valid_behaviors': 'behaviors.tsv of the validation split',
        'synthetic': 'generate a synthetic MIND-format corpus instead of reading one',
    },
    'train': {
        'data': 'prepared dataset directory or .caum file',
        'valid_data': 'prepared validation directory or .caum file',
    },
    'eval': {
        'checkpoint': 'checkpoint file',
        'data': 'prepared dataset directory or .caum file',
    },
    'score': {
        'checkpoint': 'checkpoint file',
        'data': 'prepared dataset directory holding the news catalog',
        'user_history': 'file of clicked news ids, oldest first',
        'candidates': 'file of candidate news ids',
        'naive': 'score with one full user encoding per candidate',
    },
    'bench': {
        'grid': f'benchmark grid, e.g. {benchmark.DEFAULT_GRID}',
        'reps': 'timed repetitions per grid point',
    },
}

SWITCHES = {'synthetic', 'naive'}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _flag(key: str) -> str:
    return '--' + key.replace('_', '-')


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='caum', description='Candidate-aware user modeling for news recommendation.')
    commands = parser.add_subparsers(dest='command', parser_class=_Parser)
    commands.required = True

    for command, flags in COMMAND_FLAGS.items():
        sub = commands.add_parser(command)
        sub.add_argument('--config', help='flat key = value file; flags override it')
        sub.add_argument('--out', help='output directory')
        sub.add_argument('--preset', choices=sorted(PRESETS), help='hyperparameter preset')
        sub.add_argument('--variant', choices=sorted(VARIANT_FLAGS), help='ablation variant')
        for key, text in flags.items():
            if key in SWITCHES:
                sub.add_argument(_flag(key), dest=key, action='store_const', const='on', help=text)
            else:
                sub.add_argument(_flag(key), dest=key, help=text)
        group = sub.add_argument_group('model and training')
        for key in (*MODEL_KEYS, *TRAIN_KEYS):
            group.add_argument(_flag(key), dest=key, help=FLAG_HELP[key])
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, str]:
    skip = {'command', 'config'}
    return {k: v for k, v in vars(args).items() if k not in skip and v is not None}


def _write_effective(run: RunConfig):
    if run.out:
        os.makedirs(run.out, exist_ok=True)
        with open(os.path.join(run.out, EFFECTIVE_CONF), 'w', encoding='utf-8') as fd:
            fd.write(run.dump())


def _require(run: RunConfig, *keys: str):
    for key in keys:
        if getattr(run, key) is None:
            raise ConfigError(f'{run.command} needs {_flag(key)}')


def _split_path(path: str, default: str = DATASET_FILE):
    if os.path.isfile(path):
        return os.path.dirname(path) or '.', os.path.basename(path)
    return path, default


def _load(path: str, default: str = DATASET_FILE):
    directory, name = _split_path(path, default)
    return load_dataset(directory, name), directory


def _print_stats(title: str, dataset):
    s = dataset.stats
    print(f'{title}: {len(dataset.news_ids) - 1} articles, {s.impressions} impressions, '
          f'{s.positives} positives, {s.negatives} negatives, {s.empty_histories} empty histories, '
          f'{s.dropped_history} unresolved clicks, {s.dropped_candidates} unresolved candidates')


def cmd_prepare(run: RunConfig) -> int:
    _require(run, 'out')
    if run.synthetic:
        paths = write_corpus(os.path.join(run.out, 'raw'), SyntheticSpec(seed=run.train.seed))
        run.news = run.news or paths['news']
        run.behaviors = run.behaviors or paths['behaviors']
        run.valid_behaviors = run.valid_behaviors or paths['valid_behaviors']
    _require(run, 'news', 'behaviors')
    threads = run.train.threads

    catalog = parse_news_tsv(run.news, threads)
    impressions, behavior_stats = parse_behaviors_tsv(run.behaviors, threads)
    vocabs = build_vocabs(catalog)
    model = run.model
    dataset = encode_dataset(catalog, impressions, vocabs, model.title_len, model.entity_len)

    vocabs.save(run.out)
    save_dataset(dataset, run.out)
    print(f'news: {catalog.stats.parsed} parsed, {catalog.stats.malformed} malformed, '
          f'{catalog.stats.duplicates} duplicates')
    print(f'behaviors: {behavior_stats.parsed} parsed, {behavior_stats.malformed} malformed, '
          f'{behavior_stats.bad_candidates} bad candidate tokens, {behavior_stats.empty_histories} empty histories')
    print(f'vocabulary: {len(vocabs.words)} words, {len(vocabs.entities)} entities, {len(vocabs.topics)} topics')
    _print_stats('train', dataset)

    if run.valid_behaviors:
        valid_catalog = parse_news_tsv(run.valid_news, threads) if run.valid_news else catalog
        valid_impressions, _ = parse_behaviors_tsv(run.valid_behaviors, threads)
        valid = encode_dataset(valid_catalog, valid_impressions, vocabs, model.title_len, model.entity_len)
        save_dataset(valid, run.out, VALID_FILE)
        _print_stats('valid', valid)
    _write_effective(run)
    return 0


def cmd_train(run: RunConfig) -> int:
    _require(run, 'data', 'out')
    dataset, directory = _load(run.data)
    valid = _load(run.valid_data, VALID_FILE)[0] if run.valid_data else None

    model = CaumModel.for_vocabs(run.model, Vocabs.load(directory), seed=run.train.seed)
    logger.info('train: %d parameters', parameter_count(model))
    _write_effective(run)

    result = train(model, dataset, run.train, out=run.out, valid=valid)
    last = [loss for epoch, _, loss in result.losses if epoch == run.train.epochs]
    print(f'trained {run.train.epochs} epochs, {len(result.losses)} batches, '
          f'final epoch mean loss {float(np.mean(last)):.6f}')
    if result.valid:
        print(result.valid[-1].to_table())
    return 0


def _checkpoint_run(command: str, file_values: Dict[str, str], overrides: Dict[str, str]) -> RunConfig:
    '''Model keys default to the effective.conf written next to the checkpoint.'''
    checkpoint = overrides.get('checkpoint') or file_values.get('checkpoint')
    values = {}
    if checkpoint:
        saved = os.path.join(os.path.dirname(checkpoint), EFFECTIVE_CONF)
        if os.path.exists(saved):
            values = {k: v for k, v in read_config_file(saved).items() if k in MODEL_KEYS}
    values.update(file_values)
    return build_config(command, values, overrides)


def cmd_eval(run: RunConfig) -> int:
    _require(run, 'checkpoint', 'data')
    dataset, _ = _load(run.data)
    model = CaumModel.from_checkpoint(run.checkpoint, run.model)
    scored, skipped = score_dataset(model, dataset, threads=run.train.threads)
    report = evaluate(scored, threads=run.train.threads, excluded={'empty_history': skipped})

    print(report.to_table())
    print(report.to_json())
    if run.out:
        os.makedirs(run.out, exist_ok=True)
        with open(os.path.join(run.out, 'metrics.json'), 'w', encoding='utf-8') as fd:
            fd.write(report.to_json() + '\n')
        _write_effective(run)
    return 0


def _read_ids(path: str) -> List[str]:
    return [news_id for line in read_lines(path) for news_id in line.split()]


def cmd_score(run: RunConfig) -> int:
    _require(run, 'checkpoint', 'data', 'user_history', 'candidates')
    dataset, _ = _load(run.data)
    model = CaumModel.from_checkpoint(run.checkpoint, run.model)

    history = encode_history(_read_ids(run.user_history), dataset.row_of, run.model.history)
    if history.dropped:
        logger.warning('score: %d clicked ids are not in the catalog', history.dropped)
    if not history.mask.any():
        raise ContractError('score: no clicked news id resolves in the catalog')

    ids = [news_id for news_id in _read_ids(run.candidates) if news_id in dataset.row_of]
    if not ids:
        raise ContractError('score: no candidate id resolves in the catalog')
    rows = np.array([dataset.row_of[news_id] for news_id in ids], dtype=np.int64)

    clicks = model.news_vectors(dataset.articles(history.rows))
    candidates = model.news_vectors(dataset.articles(rows))
    weights = UserWeights.from_store(model.store, run.model)
    scores = score_user(clicks, history.mask, candidates, weights, naive=run.naive)

    order = np.argsort(-scores, kind='stable')
    lines = [f'{rank}\t{ids[i]}\t{scores[i]:.9g}' for rank, i in enumerate(order, 1)]
    print('\n'.join(lines))
    if run.out:
        os.makedirs(run.out, exist_ok=True)
        with open(os.path.join(run.out, 'scores.tsv'), 'w', encoding='utf-8') as fd:
            fd.write('\n'.join(lines) + '\n')
        _write_effective(run)
    return 0


def cmd_bench(run: RunConfig) -> int:
    grid = benchmark.parse_grid(run.grid or benchmark.DEFAULT_GRID)
    rows = benchmark.run_bench(run.model, grid, reps=run.reps, seed=run.train.seed)
    if run.out:
        os.makedirs(run.out, exist_ok=True)
        benchmark.write_csv(os.path.join(run.out, 'bench.csv'), rows)
        _write_effective(run)
    print(benchmark.summarize(rows))
    return 0


COMMANDS = {
    'prepare': cmd_prepare,
    'train': cmd_train,
    'eval': cmd_eval,
    'score': cmd_score,
    'bench': cmd_bench,
}


def main(argv: Optional[List[str]] = None) -> int:
    configure_logging()
    try:
        args = make_parser().parse_args(argv)
        file_values = read_config_file(args.config) if args.config else {}
        overrides = _overrides(args)
        if args.command in ('eval', 'score'):
            run = _checkpoint_run(args.command, file_values, overrides)
        else:
            run = build_config(args.command, file_values, overrides)
        return COMMANDS[args.command](run)
    except (CaumError, OSError) as e:
        print(f'error: {type(e).__name__}: {e}', file=sys.stderr)
        return 1
