import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional

import numpy as np

from .errors import ConfigError, FormatError
from .parser import parse_config_text


logger = logging.getLogger(__name__)


class Variant:
    Caum = 'caum'
    Base = 'base'
    BaseCnn = 'base+cnn'
    BaseSelfAtt = 'base+selfatt'


# (candi_self_att, candi_cnn, candi_att)
VARIANT_FLAGS = {
    Variant.Caum: (True, True, True),
    Variant.Base: (False, False, False),
    Variant.BaseCnn: (False, True, False),
    Variant.BaseSelfAtt: (True, False, False),
}


@dataclass
class ModelConfig:
    d: int = 400
    heads: int = 20
    window: int = 1
    history: int = 50
    title_len: int = 30
    entity_len: int = 5
    phi_hidden: int = 128
    candi_self_att: bool = True
    candi_cnn: bool = True
    candi_att: bool = True
    cnn_activation: str = 'relu'
    cnn_bias: bool = True
    precision: int = 64

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    def validate(self) -> 'ModelConfig':
        for name in ('d', 'heads', 'history', 'title_len', 'entity_len', 'phi_hidden'):
            if getattr(self, name) <= 0:
                raise ConfigError(f'{name} must be positive, got {getattr(self, name)}')
        if self.window < 0:
            raise ConfigError(f'window must be non-negative, got {self.window}')
        if self.d % self.heads:
            raise ConfigError(f'heads must divide d (K | d), got d={self.d}, heads={self.heads}')
        if 2 * self.window + 1 > self.history:
            raise ConfigError(
                f'window size 2h+1 must not exceed history N, got h={self.window}, N={self.history}')
        if self.cnn_activation not in ('relu', 'linear'):
            raise ConfigError(f'cnn_activation must be relu or linear, got {self.cnn_activation!r}')
        if self.precision not in (32, 64):
            raise ConfigError(f'precision must be 32 or 64, got {self.precision}')
        return self


@dataclass
class TrainConfig:
    epochs: int = 3
    lr: float = 5e-5
    batch_size: int = 32
    seed: int = 0
    negatives: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    threads: int = 1

    def validate(self) -> 'TrainConfig':
        for name in ('epochs', 'batch_size', 'negatives', 'threads'):
            if getattr(self, name) <= 0:
                raise ConfigError(f'{name} must be positive, got {getattr(self, name)}')
        if self.lr < 0:
            raise ConfigError(f'lr must be non-negative, got {self.lr}')
        if self.seed < 0:
            raise ConfigError(f'seed must be non-negative, got {self.seed}')
        return self


@dataclass
class RunConfig:
    command: str = ''
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    preset: str = 'paper'
    variant: Optional[str] = None
    news: Optional[str] = None
    behaviors: Optional[str] = None
    valid_news: Optional[str] = None
    valid_behaviors: Optional[str] = None
    synthetic: bool = False
    data: Optional[str] = None
    valid_data: Optional[str] = None
    checkpoint: Optional[str] = None
    user_history: Optional[str] = None
    candidates: Optional[str] = None
    naive: bool = False
    grid: Optional[str] = None
    reps: int = 10
    out: Optional[str] = None

    def dump(self) -> str:
        lines = [f'command = {self.command}', f'preset = {self.preset}']
        if self.variant:
            lines.append(f'variant = {self.variant}')
        for section in (self.model, self.train):
            for f in dataclasses.fields(section):
                lines.append(f'{f.name} = {_format_value(getattr(section, f.name))}')
        for name in RUN_KEYS:
            value = getattr(self, name)
            if value is not None and name not in ('preset', 'variant'):
                lines.append(f'{name} = {_format_value(value)}')
        return '\n'.join(lines) + '\n'


PRESETS: Dict[str, Dict[str, Any]] = {
    'paper': {},
    'desk': {
        'd': 64, 'heads': 4, 'history': 20, 'phi_hidden': 32,
        'lr': 1e-3, 'epochs': 10,
    },
    'toy': {
        'd': 8, 'heads': 2, 'history': 4, 'title_len': 6, 'entity_len': 3,
        'phi_hidden': 4, 'epochs': 1, 'batch_size': 4,
    },
}

MODEL_KEYS = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
TRAIN_KEYS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
RUN_KEYS = {f.name: f.type for f in dataclasses.fields(RunConfig) if f.name not in ('model', 'train', 'command')}

_TRUE = {'on', 'true', 'yes', '1'}
_FALSE = {'off', 'false', 'no', '0'}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return 'on' if value else 'off'
    return str(value)


def _coerce(key: str, kind, raw):
    if not isinstance(raw, str):
        return raw
    kind = str(kind)
    try:
        if 'bool' in kind:
            lowered = raw.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(raw)
        if 'int' in kind:
            return int(raw)
        if 'float' in kind:
            return float(raw)
    except ValueError:
        raise ConfigError(f'{key}: cannot read {raw!r} as {kind}') from None
    return raw


def read_config_file(path: str) -> Dict[str, str]:
    try:
        with open(path, 'r', encoding='utf-8') as fd:
            text = fd.read()
    except UnicodeDecodeError as e:
        raise FormatError(f'{path}: not UTF-8 text at byte {e.start}') from None

    values: Dict[str, str] = {}
    for key, value, line in parse_config_text(text):
        key = key.replace('-', '_')
        if key == 'command':
            continue
        if key not in MODEL_KEYS and key not in TRAIN_KEYS and key not in RUN_KEYS:
            raise ConfigError(f'{path}:{line}: unknown key {key!r}')
        values[key] = value
    return values


def build_config(command: str, file_values: Optional[Mapping[str, Any]] = None,
                 overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    '''
    Resolve defaults, then the preset, then the variant, then explicit keys
    (file values first, flags last). The result is validated.
    '''
    explicit: Dict[str, Any] = dict(file_values or {})
    explicit.update({k: v for k, v in (overrides or {}).items() if v is not None})

    preset = explicit.get('preset', 'paper')
    if preset not in PRESETS:
        raise ConfigError(f'unknown preset {preset!r}, expected one of {sorted(PRESETS)}')

    values: Dict[str, Any] = dict(PRESETS[preset])

    variant = explicit.get('variant')
    if variant is not None:
        if variant not in VARIANT_FLAGS:
            raise ConfigError(f'unknown variant {variant!r}, expected one of {sorted(VARIANT_FLAGS)}')
        values.update(zip(('candi_self_att', 'candi_cnn', 'candi_att'), VARIANT_FLAGS[variant]))

    values.update(explicit)

    model = ModelConfig()
    train = TrainConfig()
    run = RunConfig(command=command, model=model, train=train)
    for key, raw in values.items():
        if key in MODEL_KEYS:
            setattr(model, key, _coerce(key, MODEL_KEYS[key], raw))
        elif key in TRAIN_KEYS:
            setattr(train, key, _coerce(key, TRAIN_KEYS[key], raw))
        elif key in RUN_KEYS:
            setattr(run, key, _coerce(key, RUN_KEYS[key], raw))
        else:
            raise ConfigError(f'unknown key {key!r}')

    model.validate()
    train.validate()
    if run.reps <= 0:
        raise ConfigError(f'reps must be positive, got {run.reps}')
    return run
