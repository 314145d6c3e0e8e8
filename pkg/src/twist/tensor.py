"""Dense float32 tensors with a small reverse-mode tape.

Only the handful of primitives a GPT-style decoder needs are provided. Every op
returns a new :class:`Tensor` whose ``_backward`` closure pushes the upstream
gradient into its parents; :meth:`Tensor.backward` replays the tape in reverse
topological order. Gradients are never mutated in place, so a parent may safely
receive the same array from several children.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

DTYPE = np.float32
LN_EPS = 1e-5
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class DimensionError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class InvalidInputError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None):
        arr = np.asarray(data)
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise InvalidInputError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.asarray(grad, dtype=DTYPE)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior gradients are no longer needed once propagated
                node.grad = None
                node._backward = None
                node._parents = ()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != DTYPE:
        g = g.astype(DTYPE)
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                  _backward=backward if needs else None)


# ---------------------------------------------------------------- arithmetic

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with numpy batching rules; ``b`` may be a plain 2-D weight."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    flat = b.data.ndim == 2
    if flat:
        # one large GEMM is much faster than numpy's per-batch loop
        k, n = b.shape
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (n,))
    else:
        out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, n) @ b.data.T).reshape(a.shape)
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
            _accumulate(a, ga)
        if b.requires_grad:
            if flat:
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            _accumulate(b, gb)

    return _result(out, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = DTYPE(c)
    out = a.data * c
    return _result(out, (a,), lambda g: _accumulate(a, g * c))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    # contiguous copies keep the following batched matmuls on the fast path
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _result(out, (a,), lambda g: _accumulate(a, np.ascontiguousarray(np.transpose(g, inverse))))


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=DTYPE)
    return _result(out, (a,), lambda g: _accumulate(a, np.broadcast_to(g, a.shape).copy()))


# ---------------------------------------------------------------- activations

def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _result(out, (x,), lambda g: _accumulate(x, g * (x.data > 0)))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation, as in GPT-2
    u = x.data
    inner = _GELU_C * (u + 0.044715 * u ** 3)
    th = np.tanh(inner)
    out = 0.5 * u * (1.0 + th)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * u ** 2)
        local = 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th ** 2) * d_inner
        _accumulate(x, g * local)

    return _result(out, (x,), backward)


def softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _result(y, (x,), backward)


def scaled_masked_softmax(x: Tensor, c: float = 1.0, mask: np.ndarray | None = None) -> Tensor:
    """``softmax_rows(c * x + mask)`` as one op; ``mask`` is additive (0 or -inf) and constant."""
    z = x.data * DTYPE(c)
    if mask is not None:
        z += mask
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    y = z

    def backward(g):
        gx = g * y
        gx -= y * gx.sum(axis=-1, keepdims=True)
        if c != 1.0:
            gx *= DTYPE(c)
        _accumulate(x, gx)

    return _result(y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, b: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis with the population std, then ``gamma * z + b``."""
    d = x.shape[-1]
    if d < 2:
        raise DegenerateInputError("layer_norm needs at least two features")
    if gamma.shape != (d,) or b.shape != (d,):
        raise DimensionError(f"layer_norm affine params must have extent {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + DTYPE(eps))
    z = xc * inv
    out = z * gamma.data + b.data

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * z).reshape(-1, d).sum(axis=0))
        if b.requires_grad:
            _accumulate(b, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gz = g * gamma.data
            gx = inv * (gz - gz.mean(axis=-1, keepdims=True)
                        - z * (gz * z).mean(axis=-1, keepdims=True))
            _accumulate(x, gx)

    return _result(out, (x, gamma, b), backward)


# ---------------------------------------------------------------- lookup / loss

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        _accumulate(table, gt)

    return _result(out, (table,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean token cross-entropy of ``logits[..., V]`` against integer targets."""
    targets = np.asarray(targets)
    if targets.size == 0:
        raise InvalidInputError("cross_entropy needs at least one target")
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    t = targets.reshape(-1)
    if flat.shape[0] != t.shape[0]:
        raise DimensionError("logits and targets disagree on token count")
    shifted = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(t.shape[0])
    nll = lse - shifted[rows, t]
    out = np.asarray(nll.mean(dtype=np.float64), dtype=DTYPE)

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, t] -= 1.0
        p *= g / t.shape[0]
        _accumulate(logits, p.reshape(logits.shape))

    return _result(out, (logits,), backward)


# ---------------------------------------------------------------- randomness

@dataclass(frozen=True)
class Rng:
    """Deterministic random source: ``(seed, stream_id)`` fixes every draw.

    ``generator(*keys)`` derives independent child streams, so components can
    draw without consuming each other's sequences.
    """
    seed: int
    stream_id: int = 0

    def generator(self, *keys: int) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed & (2**64 - 1),
                                    spawn_key=(self.stream_id & (2**64 - 1),) + tuple(keys))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, stream_id: int) -> Rng:
        return Rng(self.seed, stream_id)


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place. Names without a gradient are skipped."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    t = state.t
    b1, b2 = DTYPE(ADAM_BETA1), DTYPE(ADAM_BETA2)
    step = DTYPE(lr * math.sqrt(1.0 - ADAM_BETA2 ** t) / (1.0 - ADAM_BETA1 ** t))
    eps_hat = DTYPE(ADAM_EPS * math.sqrt(1.0 - ADAM_BETA2 ** t))
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - step * m / (np.sqrt(v) + eps_hat)
