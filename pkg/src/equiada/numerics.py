"""Dense float64 tensors with a reverse-mode tape, parameter sets, and Adam.

A :class:`Tensor` wraps a numpy array. Every op on tensors that require
gradients records a closure mapping the output gradient to the input
gradients; :func:`backward` walks that record in reverse topological order.
The record is rebuilt on every forward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from equiada import _kernels


class ShapeError(ValueError):
    """Incompatible tensor shapes."""


class ContractError(RuntimeError):
    """A caller violated an API contract (frozen parameter, non-scalar loss, ...)."""


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None, name=None):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.name = name

    @classmethod
    def from_external(cls, data, name=None) -> "Tensor":
        """Build a constant tensor from user input, rejecting NaN/Inf."""
        arr = _as_array(data)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in tensor {name or ''}".strip())
        return cls(arr, name=name)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward) -> Tensor:
    live = any(p.requires_grad for p in parents)
    if not live:
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=tuple(parents), backward=backward)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ------------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def identity(a) -> Tensor:
    return as_tensor(a)


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {"identity": identity, "silu": silu}


# ------------------------------------------------------------------ reductions and shape


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), back)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, a.shape),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, ts, back)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)

    def back(g):
        full = np.zeros(a.shape)
        np.add.at(full, key, g)
        return (full,)

    return _make(a.data[key], (a,), back)


def take_rows(a, index: np.ndarray) -> Tensor:
    """Gather rows along axis 0; the gradient scatter-adds back."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    return _make(a.data[index], (a,), lambda g: (_kernels.segment_sum(g, index, n),))


def segment_sum(a, index: np.ndarray, n_segments: int) -> Tensor:
    """Scatter-add rows of ``a`` into ``n_segments`` rows; the gradient gathers."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    return _make(_kernels.segment_sum(a.data, index, n_segments), (a,), lambda g: (g[index],))


# ------------------------------------------------------------------ linear algebra


def matmul(a, b) -> Tensor:
    """Batched matmul with matching leading dims, or ``(..., k) @ (k, m)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul mismatch {a.shape} @ {b.shape}")
    out = a.data @ b.data

    if b.ndim == 2:

        def back(g):
            a2 = a.data.reshape(-1, a.shape[-1])
            g2 = g.reshape(-1, b.shape[1])
            return (g @ b.data.T, a2.T @ g2)

    else:

        def back(g):
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
            return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(out, (a, b), back)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), back)


def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def mlp_forward(layers: Sequence[tuple], x, activation: str = "silu", final_activation: bool = False) -> Tensor:
    """Apply a stack of ``(weight, bias)`` layers to the last axis of ``x``.

    The activation is applied between layers, and after the last one only
    when ``final_activation`` is set.
    """
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    act = ACTIVATIONS[activation]
    h = as_tensor(x)
    for idx, (w, b) in enumerate(layers):
        w = as_tensor(w)
        if h.shape[-1] != w.shape[0]:
            raise ShapeError(f"layer {idx}: input dim {h.shape[-1]} != weight rows {w.shape[0]}")
        h = linear(h, w, b)
        if idx < len(layers) - 1 or final_activation:
            h = act(h)
    return h


# ------------------------------------------------------------------ backward


def backward(output: Tensor, leaves: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``output`` w.r.t. every leaf that requires grad.

    Leaves that are unreachable from ``output`` get a zero gradient; leaves
    with ``requires_grad=False`` (frozen) get no entry at all.
    """
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg

    out = {}
    for name, leaf in leaves.items():
        if not leaf.requires_grad:
            continue
        g = grads.get(id(leaf))
        out[name] = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)
    return out


# ------------------------------------------------------------------ parameters


class ParamSet:
    """Named float64 parameter arrays with a per-parameter trainable flag."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> None:
        if name in self._values:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite initial value for {name!r}")
        self._values[name] = arr
        self._trainable[name] = trainable

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def items(self):
        return self._values.items()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_names(self) -> list[str]:
        return [n for n, t in self._trainable.items() if t]

    def set_trainable(self, trainable: bool, prefix: str = "") -> None:
        for name in self._values:
            if name.startswith(prefix):
                self._trainable[name] = trainable

    def freeze(self) -> None:
        self.set_trainable(False)

    def assign(self, name: str, value) -> None:
        if not self._trainable[name]:
            raise ContractError(f"attempt to mutate frozen parameter {name!r}")
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._values[name].shape:
            raise ShapeError(f"{name}: shape {value.shape} != {self._values[name].shape}")
        self._values[name] = value.copy()

    def tensors(self, track: bool = True) -> dict[str, Tensor]:
        """Fresh leaf tensors; trainable ones require grad when ``track``."""
        return {
            n: Tensor(v, requires_grad=track and self._trainable[n], name=n) for n, v in self._values.items()
        }

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(v.size for n, v in self._values.items() if self._trainable[n] or not trainable_only)

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for n, v in self._values.items():
            out.add(n, v.copy(), self._trainable[n])
        return out


# ------------------------------------------------------------------ Adam


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamSet, grads: Mapping[str, np.ndarray], state: OptimizerState):
    """One bias-corrected Adam update of the trainable entries of ``params``."""
    trainable = set(params.trainable_names())
    for name in grads:
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if name not in trainable:
            raise ContractError(f"gradient supplied for frozen parameter {name!r}")
    missing = trainable - set(grads)
    if missing:
        raise ContractError(f"missing gradients for {sorted(missing)}")

    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name in params.trainable_names():
        g = np.asarray(grads[name], dtype=np.float64)
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        params.assign(name, p - update)
    return params, state


# ------------------------------------------------------------------ gradient check


def grad_check(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: ParamSet,
    fd_step: float = 1e-5,
    names: Iterable[str] | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    For each trainable parameter tensor the error is
    ``max|analytic - fd| / max(max|analytic|, max|fd|, 1e-12)``; the result
    is the worst tensor.
    """
    if fd_step <= 0:
        raise ValueError("fd_step must be positive")
    leaves = params.tensors()
    analytic = backward(loss_fn(leaves), leaves)
    check = list(names) if names is not None else params.trainable_names()

    worst = 0.0
    for name in check:
        base = params[name]
        fd = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            vals = []
            for sign in (1.0, -1.0):
                pert = params.tensors(track=False)
                arr = base.copy()
                arr[idx] += sign * fd_step
                pert[name] = Tensor(arr, name=name)
                val = float(loss_fn(pert).data)
                if not math.isfinite(val):
                    raise FloatingPointError(f"non-finite loss when perturbing {name}{list(idx)} by {sign * fd_step:+g}")
                vals.append(val)
            fd[idx] = (vals[0] - vals[1]) / (2.0 * fd_step)
        a = analytic[name]
        denom = max(np.abs(a).max(initial=0.0), np.abs(fd).max(initial=0.0), 1e-12)
        worst = max(worst, float(np.abs(a - fd).max(initial=0.0) / denom))
    return worst
