from abc import ABCMeta, abstractmethod
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, DegenerateRowError, DimensionError, IndexRangeError


__all__ = [
    'Tensor', 'Function', 'constant',
    'matmul', 'add', 'sub', 'mul', 'scale', 'tanh', 'relu', 'sigmoid', 'log',
    'log_sigmoid', 'sum', 'mean', 'concat', 'take', 'embedding_lookup',
    'softmax', 'masked_softmax', 'transpose', 'reshape',
]

ArrayLike = Union['Tensor', np.ndarray, float, int, Sequence]


class Tensor:
    '''
    A dense array taking part in a reverse-mode differentiation graph.

    Leaves (parameters, inputs) have no `ctx`; every other tensor links back
    to the `Function` that produced it. Values are never mutated after
    construction, so a finished tensor can be read from several threads.
    '''

    def __init__(self, data, requires_grad: bool = False, ctx: Optional['Function'] = None,
                 name: Optional[str] = None, dtype=None):
        array = np.asarray(data, dtype=dtype)
        if array.dtype.kind != 'f':
            array = array.astype(np.float64)
        self.data = array
        self.requires_grad = requires_grad
        self.ctx = ctx
        self.name = name
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f' {self.name!r}' if self.name else ''
        return f'Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})'

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return scale(self, -1.0)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        '''
        Populate `grad` on every ancestor that requires it. Leaf gradients
        accumulate across calls until `zero_grad`; intermediate tensors only
        keep the gradient of the latest pass.
        '''
        if self.data.size != 1 or self.data.ndim > 1:
            raise ContractError(f'backward needs a scalar loss, got shape {self.shape}')
        if not self.requires_grad:
            return

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(self._topological_order()):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue

            if node.ctx is None:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue

            node.grad = grad
            for parent, parent_grad in zip(node.ctx.parents, node.ctx.backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + parent_grad if key in grads else parent_grad

    def _topological_order(self) -> List['Tensor']:
        # iterative post-order; each node is emitted once, after its parents
        order: List[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node.ctx is not None:
                for parent in node.ctx.parents:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        return order


def constant(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


class Function(metaclass=ABCMeta):
    '''
    One differentiable operation. Subclasses compute the value from parent
    arrays and map the output gradient back to one gradient per parent
    (None for inputs that take no gradient).
    '''

    def __init__(self, *parents: Tensor):
        self.parents = parents

    @abstractmethod
    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError()

    @abstractmethod
    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError()

    @classmethod
    def apply(cls, *parents: Tensor, **kwargs) -> Tensor:
        fn = cls(*parents)
        for key, value in kwargs.items():
            setattr(fn, key, value)
        out = fn.forward(*(p.data for p in parents))
        requires_grad = any(p.requires_grad for p in parents)
        return Tensor(out, requires_grad=requires_grad, ctx=fn if requires_grad else None)


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    # undo a row/column broadcast
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> Tuple[int, ...]:
    # only bias-style broadcasts: the result must be one of the operand shapes
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, a.shape, b.shape) from None
    if shape != a.shape and shape != b.shape:
        raise DimensionError(op, a.shape, b.shape)
    return shape


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim not in (1, 2, 3) or b.ndim not in (2, 3) or a.shape[-1] != b.shape[-2]:
            raise DimensionError('matmul', a.shape, b.shape)
        if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
            raise DimensionError('matmul', a.shape, b.shape)
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = (p.data for p in self.parents)
        if a.ndim == 1:
            if b.ndim == 2:
                return b @ grad, np.outer(a, grad)
            return (np.matmul(b, grad[..., None])[..., 0]).sum(axis=0), \
                np.einsum('k,bn->bkn', a, grad)
        grad_a = np.matmul(grad, np.swapaxes(b, -1, -2))
        grad_b = np.matmul(np.swapaxes(a, -1, -2), grad)
        return _reduce_to(grad_a, a.shape), _reduce_to(grad_b, b.shape)


class Add(Function):
    def forward(self, a, b):
        _broadcast_shape('add', a, b)
        return a + b

    def backward(self, grad):
        a, b = self.parents
        return _reduce_to(grad, a.shape), _reduce_to(grad, b.shape)


class Sub(Function):
    def forward(self, a, b):
        _broadcast_shape('sub', a, b)
        return a - b

    def backward(self, grad):
        a, b = self.parents
        return _reduce_to(grad, a.shape), _reduce_to(-grad, b.shape)


class Mul(Function):
    def forward(self, a, b):
        _broadcast_shape('mul', a, b)
        return a * b

    def backward(self, grad):
        a, b = (p.data for p in self.parents)
        return _reduce_to(grad * b, a.shape), _reduce_to(grad * a, b.shape)


class Scale(Function):
    factor = 1.0

    def forward(self, x):
        return x * self.factor

    def backward(self, grad):
        return (grad * self.factor,)


class Tanh(Function):
    def forward(self, x):
        self.out = np.tanh(x)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out * self.out),)


class Relu(Function):
    def forward(self, x):
        return np.maximum(x, 0)

    def backward(self, grad):
        return (grad * (self.parents[0].data > 0),)


def _stable_sigmoid(x):
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    exp = np.exp(x[~positive])
    out[~positive] = exp / (1.0 + exp)
    return out


class Sigmoid(Function):
    def forward(self, x):
        self.out = _stable_sigmoid(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Log(Function):
    def forward(self, x):
        return np.log(x)

    def backward(self, grad):
        return (grad / self.parents[0].data,)


class LogSigmoid(Function):
    def forward(self, x):
        return -np.logaddexp(0, -x)

    def backward(self, grad):
        return (grad * _stable_sigmoid(-self.parents[0].data),)


class Sum(Function):
    axis = None
    keepdims = False

    def forward(self, x):
        return np.sum(x, axis=self.axis, keepdims=self.keepdims)

    def backward(self, grad):
        shape = self.parents[0].shape
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, shape).copy(),)


class Concat(Function):
    axis = 0

    def forward(self, *arrays):
        ranks = {a.ndim for a in arrays}
        if len(ranks) != 1:
            raise DimensionError('concat', *(a.shape for a in arrays))
        try:
            out = np.concatenate(arrays, axis=self.axis)
        except ValueError:
            raise DimensionError('concat', *(a.shape for a in arrays)) from None
        self.bounds = np.cumsum([a.shape[self.axis] for a in arrays])[:-1]
        return out

    def backward(self, grad):
        return tuple(np.split(grad, self.bounds, axis=self.axis))


class Take(Function):
    axis = 0

    def forward(self, x):
        indices = self.indices
        size = x.shape[self.axis]
        if indices.size:
            bad = indices[(indices < 0) | (indices >= size)]
            if bad.size:
                raise IndexRangeError(int(bad[0]), size)
        return np.take(x, indices, axis=self.axis)

    def backward(self, grad):
        x = self.parents[0].data
        out = np.zeros_like(x)
        if self.axis == 0:
            np.add.at(out, self.indices, grad)
        else:
            target = np.moveaxis(out, self.axis, 0)
            np.add.at(target, self.indices, np.moveaxis(grad, self.axis, 0))
        return (out,)


def masked_softmax(x: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    '''Row-max stabilized softmax over the last axis on plain arrays.'''
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError('softmax', x.shape)
    if mask is None:
        exp = np.exp(x - x.max(axis=-1, keepdims=True))
    else:
        mask = np.broadcast_to(mask, x.shape)
        if not mask.any(axis=-1).all():
            raise DegenerateRowError('softmax: a row has no unmasked entry')
        masked = np.where(mask, x, -np.inf)
        exp = np.where(mask, np.exp(masked - masked.max(axis=-1, keepdims=True)), 0.0)
    return exp / exp.sum(axis=-1, keepdims=True)


class Softmax(Function):
    mask = None

    def forward(self, x):
        self.out = masked_softmax(x, self.mask)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - (grad * y).sum(axis=-1, keepdims=True)),)


class Transpose(Function):
    def forward(self, x):
        if x.ndim < 2:
            raise DimensionError('transpose', x.shape)
        return np.swapaxes(x, -1, -2)

    def backward(self, grad):
        return (np.swapaxes(grad, -1, -2),)


class Reshape(Function):
    shape = ()

    def forward(self, x):
        try:
            return x.reshape(self.shape)
        except ValueError:
            raise DimensionError('reshape', x.shape, self.shape) from None

    def backward(self, grad):
        return (grad.reshape(self.parents[0].shape),)


def _pair(a, b):
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    return constant(a, like), constant(b, like)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return MatMul.apply(*_pair(a, b))


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Add.apply(*_pair(a, b))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Sub.apply(*_pair(a, b))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Mul.apply(*_pair(a, b))


def scale(x: Tensor, factor: float) -> Tensor:
    return Scale.apply(x, factor=float(factor))


def tanh(x: Tensor) -> Tensor:
    return Tanh.apply(x)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(constant(x))


def log(x: Tensor) -> Tensor:
    return Log.apply(constant(x))


def log_sigmoid(x: Tensor) -> Tensor:
    '''log(sigmoid(x)) without the underflow of composing the two.'''
    return LogSigmoid.apply(constant(x))


def sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError('concat needs at least one tensor')
    return Concat.apply(*tensors, axis=axis)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    '''Gather along one axis; the gradient scatters back into the gathered rows.'''
    return Take.apply(x, indices=np.asarray(indices, dtype=np.int64), axis=axis)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    return take(table, ids, axis=0)


def softmax(x: Tensor, mask=None) -> Tensor:
    '''
    Softmax over the last axis. False mask positions get exactly zero weight
    and zero incoming gradient.
    '''
    if isinstance(mask, Tensor):
        mask = mask.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
    return Softmax.apply(x, mask=mask)


def transpose(x: Tensor) -> Tensor:
    return Transpose.apply(x)


def reshape(x: Tensor, *shape: int) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))
