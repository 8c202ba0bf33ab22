"""
Float64 tensors with reverse-mode automatic differentiation on top of numpy.

Every differentiable operation used by the encoders, the losses and the gate
is one of the primitives below. An operation records its parents and a
backward closure only when at least one parent requires a gradient, so frozen
or constant computations build no graph.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ArgumentError, DomainError, NumericError, ShapeError

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-12
DISTRIBUTION_TOLERANCE = 1e-6


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _normalize_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    axes = axis if isinstance(axis, tuple) else (axis,)
    return tuple(a % ndim for a in axes)


def _expand_reduced(grad: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if not keepdims:
        grad = np.expand_dims(grad, _normalize_axes(axis, len(shape)))
    return np.broadcast_to(grad, shape)


class Tensor:
    __slots__ = ('data', 'requires_grad', 'name', '_parents', '_backward')
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str = '') -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable | None = None

    def __repr__(self) -> str:
        label = f' {self.name!r}' if self.name else ''
        return f'Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})'

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f'item() needs a single value, got shape {self.shape}')
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> 'GradientTape':
        return GradientTape(self).backward()

    # arithmetic

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # shape and reductions

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else int(np.prod([self.shape[a] for a in _normalize_axes(axis, self.ndim)]))
        return reduce_sum(self, axis, keepdims) / float(count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, first: int, second: int):
        axes = list(range(self.ndim))
        axes[first], axes[second] = axes[second], axes[first]
        return transpose(self, tuple(axes))

    def broadcast_to(self, shape: tuple):
        return broadcast_to(self, shape)

    # elementwise

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def gelu(self):
        return gelu(self)

    def sqrt(self):
        return power(self, 0.5)

    def clamp_min(self, floor: float):
        return clamp_min(self, floor)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor(data)
    if any(parent.requires_grad for parent in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def tensor(data, requires_grad: bool = False, name: str = '') -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False, name: str = '') -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad, name=name)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a) -> Tensor:
    a = _lift(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _result(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _result(
        a.data / b.data, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape),
                   _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def power(a, exponent: float) -> Tensor:
    a = _lift(a)
    return _result(
        a.data ** exponent, (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),))


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f'matmul shapes {list(a.shape)} and {list(b.shape)} do not align')
    return _result(
        np.matmul(a.data, b.data), (a, b),
        lambda g: (_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape),
                   _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)))


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _lift(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _lift(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh approximation of GELU."""
    a = _lift(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)
    return _result(out, (a,), backward)


def clamp_min(a, floor: float) -> Tensor:
    a = _lift(a)
    return _result(np.maximum(a.data, floor), (a,), lambda g: (g * (a.data > floor),))


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    return _result(
        a.data.sum(axis=axis, keepdims=keepdims), (a,),
        lambda g: (_expand_reduced(g, a.shape, axis, keepdims),))


def reshape(a, shape: tuple) -> Tensor:
    a = _lift(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: tuple | None = None) -> Tensor:
    a = _lift(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def broadcast_to(a, shape: tuple) -> Tensor:
    a = _lift(a)
    return _result(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, a.shape),))


def getitem(a, index) -> Tensor:
    a = _lift(a)

    def backward(g):
        grad = np.zeros(a.shape)
        np.add.at(grad, index, g)
        return (grad,)
    return _result(a.data[index], (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(_lift(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=axis), tensors,
        lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(_lift(t) for t in tensors)
    return _result(
        np.stack([t.data for t in tensors], axis=axis), tensors,
        lambda g: tuple(np.moveaxis(g, axis, 0)))


def softmax(logits, temperature: float = 1.0, axis: int = -1) -> Tensor:
    if not temperature > 0:
        raise DomainError(f'softmax temperature must be positive, got {temperature}')
    logits = _lift(logits)
    z = logits.data / temperature
    z = np.exp(z - z.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)) / temperature,)
    return _result(out, (logits,), backward)


def log_softmax(logits, axis: int = -1) -> Tensor:
    logits = _lift(logits)
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return _result(out, (logits,), backward)


def check_distribution(values: np.ndarray, what: str = 'distribution') -> None:
    if np.any(values < 0):
        raise DomainError(f'{what} has negative entries')
    sums = values.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > DISTRIBUTION_TOLERANCE):
        raise DomainError(f'{what} must sum to 1 (got {np.round(sums, 8).tolist()})')


def soft_cross_entropy(target, predicted) -> Tensor:
    """-sum(target * log(predicted)) over the last axis, predicted clamped at 1e-12."""
    target_data = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    predicted = _lift(predicted)
    if target_data.shape != predicted.shape:
        raise ShapeError(f'target shape {list(target_data.shape)} does not match predicted {list(predicted.shape)}')
    check_distribution(target_data, 'target')
    check_distribution(predicted.data, 'predicted')
    return neg((log(clamp_min(predicted, LOG_CLAMP)) * target_data).sum(axis=-1))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    centered = x - x.mean(axis=-1, keepdims=True)
    variance = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (variance + eps).sqrt() * gamma + beta


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    norm_sq = (x * x).sum(axis=axis, keepdims=True)
    if np.any(norm_sq.data == 0.0):
        raise NumericError('cannot normalize a zero-norm vector')
    return x / norm_sq.sqrt()


@dataclass
class GradientTape:
    """Reverse pass over the operations that lead to `loss`.

    `operations` holds every recorded (non-leaf) tensor in topological order;
    `grads` maps id(tensor) to its accumulated gradient.
    """
    loss: Tensor
    operations: list = field(init=False, default_factory=list)
    grads: dict = field(init=False, default_factory=dict)
    _nodes: list = field(init=False, default_factory=list)

    def __post_init__(self) -> None:
        order = []
        visited = {id(self.loss)}
        stack = [(self.loss, iter(self.loss._parents))]
        while stack:
            node, parents = stack[-1]
            for parent in parents:
                if parent.requires_grad and id(parent) not in visited:
                    visited.add(id(parent))
                    stack.append((parent, iter(parent._parents)))
                    break
            else:
                stack.pop()
                order.append(node)
        self._nodes = order
        self.operations = [node for node in order if node._backward is not None]

    def backward(self) -> 'GradientTape':
        if self.loss.size != 1:
            raise ShapeError(f'backward needs a scalar loss, got shape {list(self.loss.shape)}')
        self.grads = {id(self.loss): np.ones_like(self.loss.data)}
        for node in reversed(self.operations):
            grad = self.grads.get(id(node))
            if grad is None:
                continue
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                self.grads[key] = parent_grad if key not in self.grads else self.grads[key] + parent_grad
        return self

    def grad(self, of: Tensor) -> np.ndarray:
        grad = self.grads.get(id(of))
        if grad is None:
            return np.zeros_like(of.data)
        return np.array(grad, dtype=np.float64).reshape(of.shape)


def _scalar_value(value: Tensor) -> float:
    result = value.item()
    if not np.isfinite(result):
        raise NumericError(f'function value is not finite ({result})')
    return result


def grad_check(function: Callable[..., Tensor], inputs: Sequence[Tensor], epsilon: float = 1e-6) -> float:
    """
    Max relative error between analytic partials and central differences.

    The inputs are perturbed in place one element at a time and restored; the
    function must be deterministic (dropout off) and return a scalar Tensor.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ArgumentError(f'epsilon must lie in [1e-7, 1e-3], got {epsilon}')
    for item in inputs:
        if not (item.data.flags.c_contiguous and item.data.flags.writeable):
            item.data = np.array(item.data)
    loss = function(*inputs)
    _scalar_value(loss)
    tape = GradientTape(loss).backward()

    worst = 0.0
    for item in inputs:
        analytic = tape.grad(item).reshape(-1)
        flat = item.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + epsilon
            plus = _scalar_value(function(*inputs))
            flat[i] = original - epsilon
            minus = _scalar_value(function(*inputs))
            flat[i] = original
            numeric = (plus - minus) / (2 * epsilon)
            error = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, error)
    return worst
