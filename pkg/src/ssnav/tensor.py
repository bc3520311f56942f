"""Minimal dense tensors with reverse-mode differentiation.

Every op returns a new :class:`Tensor`; when gradients are enabled and some
input requires them, the op also records a closure that maps the output
gradient to input gradients. :func:`backward` walks that graph in reverse
topological order. Double precision throughout.
"""

from __future__ import annotations

import contextlib
import json
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

CHECKPOINT_HEADER = b"ssnav-checkpoint v1\n"

_state = threading.local()


class CheckpointError(ValueError):
    pass


class ShapeError(ValueError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(other, self)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __rsub__ = lambda self, other: sub(other, self)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(other, self)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731
    __getitem__ = lambda self, idx: getitem(self, idx)  # noqa: E731


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


# ---------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(y, (a,), backward)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _make(y, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# ---------------------------------------------------------------- structure


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (
            unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape),
            unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape),
        ),
    )


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make(y, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(y, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    y = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(y, dtype=np.float64), (a,), backward)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------- layers


def self_attention(x: Tensor, params: Mapping[str, Tensor], return_weights: bool = False):
    """Single-head scaled dot-product attention over the row axis.

    ``x`` is ``(..., rows, d_in)``; params hold ``wq``, ``wk``, ``wv``
    (``d_in x d_k``) and ``wo`` (``d_k x d_out``).
    """
    x = as_tensor(x)
    wq, wk, wv, wo = params["wq"], params["wk"], params["wv"], params["wo"]
    if x.ndim < 2 or x.shape[-1] != wq.shape[0]:
        raise ShapeError(f"attention input {x.shape} does not match projection {wq.shape}")
    d_k = wk.shape[1]
    q, k, v = x @ wq, x @ wk, x @ wv
    scores = mul(q @ transpose(k), 1.0 / math.sqrt(d_k))
    weights = softmax(scores, axis=-1)
    out = (weights @ v) @ wo
    return (out, weights) if return_weights else out


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, params: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Standard LSTM step. Gate columns are laid out as [input, forget, cell, output]."""
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    wx, wh, b = params["wx"], params["wh"], params["b"]
    hidden = wh.shape[0]
    if h.shape[-1] != hidden or c.shape[-1] != hidden or wx.shape[1] != 4 * hidden:
        raise ShapeError(f"LSTM hidden size mismatch: h {h.shape}, c {c.shape}, wh {wh.shape}")
    if x.shape[-1] != wx.shape[0]:
        raise ShapeError(f"LSTM input {x.shape} does not match wx {wx.shape}")
    z = x @ wx + h @ wh + b
    H = hidden
    i = sigmoid(z[..., 0:H])
    f = sigmoid(z[..., H : 2 * H])
    g = tanh(z[..., 2 * H : 3 * H])
    o = sigmoid(z[..., 3 * H : 4 * H])
    c_next = f * c + i * g
    h_next = o * tanh(c_next)
    return h_next, c_next


# ---------------------------------------------------------------- parameters


class ParamStore:
    """Ordered named parameters plus a version counter bumped on each update."""

    def __init__(self, params: Mapping[str, np.ndarray] | None = None, version: int = 0):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self.version = version
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: object) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._params.items()}

    def n_parameters(self) -> int:
        return int(np.sum([t.data.size for t in self._params.values()]))

    def snapshot(self) -> "ParamStore":
        return ParamStore({k: t.data.copy() for k, t in self._params.items()}, self.version)

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for k, t in self._params.items():
            t.data = np.array(arrays[k], dtype=np.float64)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (np.zeros_like(t.data) if t.grad is None else t.grad) for k, t in self._params.items()}

    def equals(self, other: "ParamStore") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self[k].data, other[k].data) for k in self._params
        )


def init_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(float(np.sum([np.vdot(g, g) for g in grads.values()])))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


@dataclass
class Adam:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    kind = "adam"

    def update(self, store: ParamStore, grads: Mapping[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in store.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            # lr * (m / c1) / (sqrt(v / c2) + eps), with fewer temporaries;
            # p.data is rebound, not written in place, so snapshots stay valid
            denom = np.sqrt(v)
            denom *= 1.0 / math.sqrt(c2)
            denom += self.eps
            step = np.divide(m, denom, out=denom)
            step *= lr / c1
            p.data = p.data - step


@dataclass
class SGD:
    lr: float = 1e-4
    t: int = 0
    kind = "sgd"

    def update(self, store: ParamStore, grads: Mapping[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        for name, p in store.items():
            p.data = p.data - lr * grads[name]


def apply_update(store: ParamStore, grads: Mapping[str, np.ndarray], optimizer, lr: float | None = None) -> ParamStore:
    missing = [k for k in store.names() if k not in grads]
    if missing:
        raise KeyError(f"missing gradients for {missing}")
    optimizer.update(store, grads, lr)
    store.version += 1
    return store


def make_optimizer(kind: str, lr: float):
    if kind == "adam":
        return Adam(lr=lr)
    if kind == "sgd":
        return SGD(lr=lr)
    raise ValueError(f"unknown optimizer {kind!r}")


# ---------------------------------------------------------------- checkpoints


def _pack(arrays: Iterable[np.ndarray]) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)


def save_checkpoint(path: str | Path, store: ParamStore, optimizer=None, meta: Mapping | None = None) -> None:
    """Text header (JSON index) followed by raw little-endian float64 blobs."""
    names = store.names()
    index = {
        "meta": dict(meta or {}),
        "version": store.version,
        "params": [[n, list(store[n].shape)] for n in names],
        "optimizer": None,
    }
    blobs = [store[n].data for n in names]
    if optimizer is not None:
        opt = {k: getattr(optimizer, k) for k in ("kind", "lr", "t", "beta1", "beta2", "eps") if hasattr(optimizer, k)}
        if isinstance(optimizer, Adam):
            opt["has_moments"] = bool(optimizer.m)
            if optimizer.m:
                blobs += [optimizer.m[n] for n in names] + [optimizer.v[n] for n in names]
        index["optimizer"] = opt
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_HEADER)
        fh.write(json.dumps(index, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(_pack(blobs))


def load_checkpoint(path: str | Path):
    """Return ``(store, optimizer_or_None, meta)``."""
    with open(path, "rb") as fh:
        if fh.readline() != CHECKPOINT_HEADER:
            raise CheckpointError(f"{path}: not an ssnav checkpoint (v1)")
        index = json.loads(fh.readline().decode("utf-8"))
        raw = fh.read()
    buf = np.frombuffer(raw, dtype="<f8")
    offset = 0

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape)) if shape else 1
        if offset + n > buf.size:
            raise CheckpointError(f"{path}: truncated parameter data")
        out = buf[offset : offset + n].astype(np.float64).reshape(shape)
        offset += n
        return out

    shapes = [(name, tuple(shape)) for name, shape in index["params"]]
    store = ParamStore({name: take(shape) for name, shape in shapes}, version=index["version"])
    optimizer = None
    opt = index.get("optimizer")
    if opt:
        if opt["kind"] == "adam":
            optimizer = Adam(lr=opt["lr"], beta1=opt["beta1"], beta2=opt["beta2"], eps=opt["eps"], t=opt["t"])
            if opt.get("has_moments"):
                optimizer.m = {name: take(shape) for name, shape in shapes}
                optimizer.v = {name: take(shape) for name, shape in shapes}
        else:
            optimizer = SGD(lr=opt["lr"], t=opt["t"])
    if offset != buf.size:
        raise CheckpointError(f"{path}: {buf.size - offset} trailing values")
    return store, optimizer, index["meta"]
