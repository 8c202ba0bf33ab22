from dataclasses import dataclass, fields

import numpy as np

from .errors import FormatError, ShapeError
from .substrate import Tensor, dropout, layer_norm, softmax

MASKED = -1e9


@dataclass
class Component:
    """Parameter container; Tensor fields are parameters, Component fields are children."""

    def named_parameters(self, prefix: str = '') -> dict:
        """Each parameter once, under the first name it is reached by."""
        params, seen = {}, set()
        for name, param in self._walk(prefix):
            if id(param) not in seen:
                seen.add(id(param))
                params[name] = param
        return params

    def _walk(self, prefix: str):
        for f in fields(self):
            value = getattr(self, f.name)
            key = f'{prefix}{f.name}'
            if isinstance(value, Tensor):
                yield key, value
            elif isinstance(value, Component):
                yield from value._walk(key + '.')
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Component):
                        yield from item._walk(f'{key}.{i}.')

    def set_requires_grad(self, flag: bool) -> None:
        for param in self.named_parameters().values():
            param.requires_grad = flag

    def load_arrays(self, arrays: dict, prefix: str = '') -> None:
        for name, param in self.named_parameters().items():
            if prefix + name not in arrays:
                raise FormatError(f'checkpoint has no parameter {prefix + name}')
            array = arrays[prefix + name]
            if array.shape != param.shape:
                raise ShapeError(f'parameter {prefix + name} has shape {list(param.shape)}, checkpoint has {list(array.shape)}')
            param.data = np.array(array, dtype=np.float64)


def _param(array: np.ndarray, name: str) -> Tensor:
    return Tensor(array, requires_grad=True, name=name)


@dataclass
class Linear(Component):
    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, rng: np.random.Generator, d_in: int, d_out: int, zero: bool = False) -> 'Linear':
        weight = np.zeros((d_in, d_out)) if zero else rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, d_out))
        return cls(_param(weight, 'weight'), _param(np.zeros(d_out), 'bias'))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]


@dataclass
class LayerNorm(Component):
    gamma: Tensor
    beta: Tensor

    @classmethod
    def create(cls, dim: int) -> 'LayerNorm':
        return cls(_param(np.ones(dim), 'gamma'), _param(np.zeros(dim), 'beta'))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


def split_heads(x: Tensor, heads: int) -> Tensor:
    batch, length, dim = x.shape
    return x.reshape(batch, length, heads, dim // heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    batch, heads, length, head_dim = x.shape
    return x.transpose(0, 2, 1, 3).reshape(batch, length, heads * head_dim)


def attend(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over the last two axes; mask is additive."""
    scores = (q @ k.swapaxes(-1, -2)) / float(np.sqrt(q.shape[-1]))
    if mask is not None:
        scores = scores + mask
    return softmax(scores, axis=-1) @ v


def key_padding_mask(lengths: np.ndarray, max_length: int) -> np.ndarray:
    """(B, 1, 1, L) additive mask that hides positions at or past each length."""
    positions = np.arange(max_length)[None, :]
    hidden = positions >= np.asarray(lengths)[:, None]
    return np.where(hidden, MASKED, 0.0)[:, None, None, :]


@dataclass
class MultiHeadAttention(Component):
    query: Linear
    key: Linear
    value: Linear
    output: Linear
    heads: int

    @classmethod
    def create(cls, rng: np.random.Generator, dim: int, heads: int) -> 'MultiHeadAttention':
        return cls(*(Linear.create(rng, dim, dim) for _ in range(4)), heads=heads)

    def __call__(self, x: Tensor, context: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
        context = x if context is None else context
        q = split_heads(self.query(x), self.heads)
        k = split_heads(self.key(context), self.heads)
        v = split_heads(self.value(context), self.heads)
        return self.output(merge_heads(attend(q, k, v, mask)))


@dataclass
class FeedForward(Component):
    hidden: Linear
    projection: Linear
    rate: float = 0.0

    @classmethod
    def create(cls, rng: np.random.Generator, dim: int, multiplier: int = 2, rate: float = 0.0) -> 'FeedForward':
        return cls(Linear.create(rng, dim, dim * multiplier), Linear.create(rng, dim * multiplier, dim), rate)

    def __call__(self, x: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return self.projection(dropout(self.hidden(x).gelu(), self.rate, rng, training))
