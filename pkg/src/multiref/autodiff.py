"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every differentiable value is a :class:`Tensor`.  Operations record their
parents and a closure computing the vector-Jacobian product; ``backward``
walks the recorded graph in reverse topological order.

Precision defaults to float32.  Gradient checks switch to float64 through
:func:`default_dtype`.  Precision, grad mode and flop counting are per thread.
"""

from __future__ import annotations

import contextlib
import fnmatch
import math
import threading
from collections import defaultdict
from typing import Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Module",
    "Adam",
    "ShapeError",
    "adam_step",
    "attention",
    "concat",
    "stack",
    "softmax",
    "log_softmax",
    "layernorm",
    "gelu",
    "mse_loss",
    "no_grad",
    "default_dtype",
    "get_default_dtype",
    "set_default_dtype",
    "count_flops",
    "flop_scope",
    "causal_mask",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class _State(threading.local):
    # per thread, so parallel evaluation workers cannot clobber each
    # other's no_grad / flop_scope save-and-restore
    def __init__(self):
        self.dtype = np.float32
        self.grad_enabled = True
        self.flop_counters: list = []
        self.flop_tags: list = ["untagged"]


_state = _State()


def get_default_dtype():
    return _state.dtype


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _state.dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    previous = _state.dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


@contextlib.contextmanager
def no_grad():
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class FlopCounter:
    """Accumulates multiply-add counts of matmuls, keyed by the active tag."""

    def __init__(self):
        self.by_tag: dict[str, int] = defaultdict(int)

    @property
    def total(self) -> int:
        return sum(self.by_tag.values())

    def __getitem__(self, tag: str) -> int:
        return self.by_tag.get(tag, 0)


@contextlib.contextmanager
def count_flops():
    counter = FlopCounter()
    _state.flop_counters.append(counter)
    try:
        yield counter
    finally:
        _state.flop_counters.remove(counter)


@contextlib.contextmanager
def flop_scope(tag: str):
    _state.flop_tags.append(tag)
    try:
        yield
    finally:
        _state.flop_tags.pop()


def _record_flops(n: int) -> None:
    if _state.flop_counters:
        tag = _state.flop_tags[-1]
        for counter in _state.flop_counters:
            counter.by_tag[tag] += n


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """An n-dimensional array that can take part in gradient recording."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _state.dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._prev: tuple = ()
        self._backward = None

    # -- basic properties --------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- graph construction ------------------------------------------------
    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(other, dtype=self.data.dtype)

    @staticmethod
    def _make(data: np.ndarray, parents: tuple, backward) -> "Tensor":
        out = Tensor(data, dtype=data.dtype)
        if _state.grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._prev = parents
            out._backward = backward
        return out

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() needs a scalar loss, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor requiring grad")

        order: list[Tensor] = []
        seen: set[int] = set()
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
            for parent in node._prev:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._prev, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def zero_grad(self) -> None:
        self.grad = None

    # -- elementwise arithmetic -------------------------------------------
    def __add__(self, other):
        other = self._lift(other)
        a_shape, b_shape = self.shape, other.shape
        return self._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return self._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = self._lift(other)
        a_shape, b_shape = self.shape, other.shape
        return self._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
        )

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        a, b = self.data, other.data
        return self._make(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        a, b = self.data, other.data
        return self._make(
            a / b,
            (self, other),
            lambda g: (
                _unbroadcast(g / b, a.shape),
                _unbroadcast(-g * a / (b * b), b.shape),
            ),
        )

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        a = self.data
        if exponent == 2:
            return self._make(a * a, (self,), lambda g: (g * 2.0 * a,))
        return self._make(
            np.power(a, exponent), (self,),
            lambda g: (g * exponent * np.power(a, exponent - 1),),
        )

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(self._lift(other), self)

    # -- unary functions ---------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return self._make(out, (self,), lambda g: (g * out,))

    def log(self):
        a = self.data
        return self._make(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return self._make(out, (self,), lambda g: (g * 0.5 / out,))

    def tanh(self):
        out = np.tanh(self.data)
        return self._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def relu(self):
        mask = self.data > 0
        return self._make(self.data * mask, (self,), lambda g: (g * mask,))

    def gelu(self):
        return gelu(self)

    # -- reductions --------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return self._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = math.prod(self.shape[a] for a in axes)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis: int, keepdims: bool = False):
        a = self.data
        out = a.max(axis=axis, keepdims=True)
        mask = (a == out).astype(a.dtype)
        mask /= mask.sum(axis=axis, keepdims=True)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (g * mask,)

        return self._make(out if keepdims else out.squeeze(axis), (self,), backward)

    # -- shape manipulation -----------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return self._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(src),))

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = np.argsort(axes)
        return self._make(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),)
        )

    def swapaxes(self, a: int, b: int):
        return self._make(
            np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),)
        )

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def __getitem__(self, index):
        if isinstance(index, Tensor):
            index = index.data.astype(np.intp)
        shape, dtype = self.shape, self.dtype
        fancy = _is_fancy(index)

        def backward(g):
            full = np.zeros(shape, dtype=dtype)
            if fancy:
                np.add.at(full, index, g)
            else:
                full[index] = g
            return (full,)

        return self._make(self.data[index], (self,), backward)


def _is_fancy(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    out = np.matmul(x, y)
    _record_flops(2 * out.size * x.shape[-1])

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(y, -1, -2)), x.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(x, -1, -2), g), y.shape)
        return ga, gb

    return Tensor._make(out, (a, b), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._make(
        out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis))
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return Tensor._make(
        out,
        tuple(tensors),
        lambda g: tuple(np.squeeze(p, axis) for p in np.split(g, n, axis=axis)),
    )


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax.  NaN inputs propagate to NaN outputs."""
    a = x.data
    shifted = a - a.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._make(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    a = x.data
    shifted = a - a.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    y = np.exp(out)

    def backward(g):
        return (g - y * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply an affine map."""
    a = x.data
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = a.shape[-1]

    def backward(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gain.data
            gx = (inv / n) * (
                n * gh
                - gh.sum(axis=-1, keepdims=True)
                - xhat * (gh * xhat).sum(axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            ggain = _unbroadcast(g * xhat, gain.shape)
        if bias.requires_grad:
            gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return Tensor._make(out, (x, gain, bias), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    a = x.data
    inner = _GELU_C * (a + 0.044715 * (a * a * a))
    th = np.tanh(inner)
    out = 0.5 * a * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * a * a)
        return (g * (0.5 * (1.0 + th) + 0.5 * a * (1.0 - th * th) * dinner),)

    return Tensor._make(out, (x,), backward)


def causal_mask(n: int, dtype=None) -> np.ndarray:
    """Additive mask with -inf strictly above the diagonal."""
    mask = np.zeros((n, n), dtype=dtype or _state.dtype)
    mask[np.triu_indices(n, 1)] = -np.inf
    return mask


def attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """Softmax(q k^T / sqrt(d) + mask) v over the last two axes.

    ``mask`` is additive (0 or -inf) and broadcast against the score matrix.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention key width mismatch: q {q.shape} vs k {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention length mismatch: k {k.shape} vs v {v.shape}")
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = scores + Tensor(mask, dtype=scores.dtype)
    return matmul(softmax(scores, axis=-1), v)


def mse_loss(pred: Tensor, target) -> Tensor:
    diff = pred - target
    return (diff * diff).mean()


class Parameter(Tensor):
    """A named, optionally frozen leaf tensor owned by a :class:`Module`."""

    def __init__(self, data, name: str = "", trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name
        self._trainable = bool(trainable)

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self._trainable = bool(flag)
        self.requires_grad = bool(flag)

    def __repr__(self) -> str:
        return f"Parameter({self.name or '?'}, shape={self.shape}, trainable={self.trainable})"


class Module:
    """Container that discovers parameters through its attributes."""

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        yield from self._walk(prefix, seen)

    def _walk(self, prefix: str, seen: set) -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            yield from _walk_value(f"{prefix}{key}", value, seen)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict, strict: bool = True) -> list[str]:
        """Copy arrays into matching parameters; returns the names loaded."""
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        loaded = []
        for name, array in state.items():
            if name not in params:
                continue
            p = params[name]
            if p.shape != tuple(array.shape):
                raise ShapeError(f"{name}: expected {p.shape}, got {tuple(array.shape)}")
            p.data = np.array(array, dtype=p.dtype)
            loaded.append(name)
        return loaded

    def set_trainable(self, patterns: Iterable[str]) -> list[str]:
        """Make exactly the parameters matching the glob patterns trainable.

        A name is trainable when it matches some plain pattern and no pattern
        prefixed with ``!``.
        """
        patterns = list(patterns)
        include = [p for p in patterns if not p.startswith("!")]
        exclude = [p[1:] for p in patterns if p.startswith("!")]
        chosen = []
        for name, p in self.named_parameters():
            p.trainable = (any(fnmatch.fnmatchcase(name, pat) for pat in include)
                           and not any(fnmatch.fnmatchcase(name, pat) for pat in exclude))
            if p.trainable:
                chosen.append(name)
        return chosen


def _walk_value(path: str, value, seen: set):
    if isinstance(value, Parameter):
        if id(value) not in seen:
            seen.add(id(value))
            yield path, value
    elif isinstance(value, Module):
        yield from value._walk(path + ".", seen)
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk_value(f"{path}.{i}", item, seen)
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk_value(f"{path}.{key}", item, seen)


def adam_step(
    params: Sequence[Parameter],
    state: dict,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update over ``params``; frozen or grad-less parameters are skipped.

    ``state`` maps parameter names to ``(step, m, v)`` and is filled lazily.
    """
    for p in params:
        if not p.trainable or p.grad is None:
            continue
        step, m, v = state.get(p.name, (0, np.zeros_like(p.data), np.zeros_like(p.data)))
        step += 1
        g = p.grad
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**step)
        v_hat = v / (1.0 - beta2**step)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        state[p.name] = (step, m, v)


class Adam:
    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 grad_clip: float | None = None):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names) or "" in names:
            raise ValueError("optimizer parameters need unique, non-empty names")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.state: dict = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        if self.grad_clip is not None:
            total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                                  for p in self.params if p.trainable and p.grad is not None))
            if total > self.grad_clip:
                scale = self.grad_clip / (total + 1e-12)
                for p in self.params:
                    if p.trainable and p.grad is not None:
                        p.grad = p.grad * scale
        adam_step(self.params, self.state, self.lr, self.betas[0], self.betas[1], self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flatten moment state for checkpointing."""
        out = {}
        for name, (step, m, v) in self.state.items():
            out[f"optim.step.{name}"] = np.array([step], dtype=np.float64)
            out[f"optim.m.{name}"] = m
            out[f"optim.v.{name}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.state = {}
        for key, value in arrays.items():
            if key.startswith("optim.step."):
                name = key[len("optim.step."):]
                self.state[name] = (
                    int(value[0]),
                    np.array(arrays[f"optim.m.{name}"]),
                    np.array(arrays[f"optim.v.{name}"]),
                )
