import logging
from collections import OrderedDict
from typing import Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, ContractError


logger = logging.getLogger(__name__)


class Init:
    Glorot = 'glorot'
    Zeros = 'zeros'
    Embedding = 'embedding'


EMBEDDING_STD = 0.1


class ParamStore:
    '''
    Ordered name -> Tensor map of every learnable array, plus the Adam moment
    state. Iteration order is the registration order, so two stores built by
    the same sequence of `add` calls with the same seed are identical.
    '''

    def __init__(self, seed: int = 0, dtype=np.float64):
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self.version = 0
        self._params: 'OrderedDict[str, Tensor]' = OrderedDict()
        self._moments: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
        self.steps = 0

    def add(self, name: str, shape: Tuple[int, ...], init: str = Init.Glorot) -> Tensor:
        if name in self._params:
            raise ConfigError(f'parameter {name!r} registered twice')
        if any(extent <= 0 for extent in shape):
            raise ConfigError(f'parameter {name!r} needs positive extents, got {shape}')

        if init == Init.Zeros:
            data = np.zeros(shape)
        elif init == Init.Embedding:
            data = self.rng.normal(0.0, EMBEDDING_STD, size=shape)
        elif init == Init.Glorot:
            fan_in = shape[0] if len(shape) > 1 else 1
            fan_out = shape[-1]
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            data = self.rng.uniform(-limit, limit, size=shape)
        else:
            raise ConfigError(f'unknown initializer {init!r}')

        tensor = Tensor(data.astype(self.dtype), requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def arrays(self) -> 'OrderedDict[str, np.ndarray]':
        return OrderedDict((name, t.data) for name, t in self._params.items())

    def set(self, name: str, value: np.ndarray):
        '''Overwrite one parameter's values (shape must match).'''
        tensor = self._params[name]
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != tensor.shape:
            raise ContractError(f'{name}: expected shape {tensor.shape}, got {value.shape}')
        tensor.data = value.copy()
        self.version += 1

    def load(self, arrays: Mapping[str, np.ndarray]):
        for name in self._params:
            if name not in arrays:
                raise ContractError(f'checkpoint has no entry for parameter {name!r}')
        for name, value in arrays.items():
            if name in self._params:
                self.set(name, value)

    def zero_grad(self):
        for tensor in self._params.values():
            tensor.zero_grad()

    def grad_norms(self) -> 'OrderedDict[str, float]':
        return OrderedDict(
            (name, float(np.linalg.norm(t.grad)) if t.grad is not None else 0.0)
            for name, t in self._params.items()
        )


def adam_step(params: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> int:
    '''
    One bias-corrected Adam update over every parameter holding a gradient.
    Parameters without a gradient are left alone; their count is returned.
    '''
    params.steps += 1
    t = params.steps
    skipped = 0

    for name, tensor in params.items():
        grad = tensor.grad
        if grad is None:
            skipped += 1
            continue

        m, v = params._moments.get(name, (None, None))
        if m is None:
            m = np.zeros_like(tensor.data)
            v = np.zeros_like(tensor.data)

        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        params._moments[name] = (m, v)

        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        step = lr * m_hat / (np.sqrt(v_hat) + eps)
        tensor.data = (tensor.data - step).astype(params.dtype)

    params.version += 1
    if skipped:
        logger.debug('adam: %d parameters had no gradient and were skipped', skipped)
    return skipped
