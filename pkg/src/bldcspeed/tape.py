"""Reverse-mode gradient engine on 64-bit numpy arrays.

Every op builds a node holding its parents and a backward closure; backward()
walks the graph in reverse topological order and accumulates gradients into
leaf tensors. Fused nodes (affine, layer_norm, causal_softmax, gelu) carry
hand-derived backward rules; all of them are pinned by central-finite-difference
checks in the test suite.
"""

from __future__ import annotations

import math

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are wrapped as constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a tape op; divide by scalar")
        return mul(self, _as_tensor(1.0 / other))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, seed: np.ndarray | None = None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's .grad."""
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(seed, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape)))

    return _node(a.data + b.data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(-g, b.data.shape)))

    return _node(a.data - b.data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        return (
            (a, _unbroadcast(g * b.data, a.data.shape)),
            (b, _unbroadcast(g * a.data, b.data.shape)),
        )

    return _node(a.data * b.data, (a, b), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ((a, ga), (b, gb))

    return _node(a.data @ b.data, (a, b), back)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b over the last axis."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise ValueError(
            f"affine: inner dims mismatch {x.data.shape} @ {w.data.shape}"
        )
    if b.data.shape != (w.data.shape[1],):
        raise ValueError(f"affine: bias shape {b.data.shape} != ({w.data.shape[1]},)")

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.data.shape[-1])
        return ((x, g @ w.data.T), (w, x2.T @ g2), (b, g2.sum(axis=0)))

    return _node(x.data @ w.data + b.data, (x, w, b), back)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def back(g):
        return ((a, g.reshape(a.data.shape)),)

    return _node(a.data.reshape(shape), (a,), back)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def back(g):
        return ((a, np.swapaxes(g, ax1, ax2)),)

    return _node(np.ascontiguousarray(np.swapaxes(a.data, ax1, ax2)), (a,), back)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    sizes = [t.data.shape[axis] for t in tensors]

    def back(g):
        splits = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return tuple((t, gi) for t, gi in zip(tensors, splits))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def take_last_step(a: Tensor) -> Tensor:
    """Select the last position along axis -2: [..., T, d] -> [..., d]."""

    def back(g):
        ga = np.zeros_like(a.data)
        ga[..., -1, :] = g
        return ((a, ga),)

    return _node(np.ascontiguousarray(a.data[..., -1, :]), (a,), back)


def sum_all(a: Tensor) -> Tensor:
    def back(g):
        return ((a, np.broadcast_to(g, a.data.shape).copy()),)

    return _node(np.asarray(a.data.sum()), (a,), back)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    d = x.data
    t = np.tanh(_GELU_C * (d + _GELU_A * (d * d * d)))

    def back(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * (d * d))
        dgelu = 0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * du
        return ((x, g * dgelu),)

    return _node(0.5 * d * (1.0 + t), (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then scale and shift."""
    d = x.data.shape[-1]
    mean = x.data.mean(axis=-1, keepdims=True)
    xm = x.data - mean
    var = (xm * xm).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xm * inv

    def back(g):
        dxhat = g * gamma.data
        gx = (
            inv
            / d
            * (
                d * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
        )
        axes = tuple(range(g.ndim - 1))
        return (
            (x, gx),
            (gamma, (g * xhat).sum(axis=axes)),
            (beta, g.sum(axis=axes)),
        )

    return _node(gamma.data * xhat + beta.data, (x, gamma, beta), back)


_MASK_CACHE: dict[int, np.ndarray] = {}


def _causal_bias(t: int) -> np.ndarray:
    bias = _MASK_CACHE.get(t)
    if bias is None:
        bias = np.where(np.tril(np.ones((t, t), dtype=bool)), 0.0, -1e30)
        _MASK_CACHE[t] = bias
    return bias


def causal_softmax(scores: Tensor) -> Tensor:
    """Row softmax over [..., T, T] with positions j > i masked out."""
    t = scores.data.shape[-1]
    if scores.data.shape[-2] != t:
        raise ValueError(f"causal_softmax needs square last axes, got {scores.data.shape}")
    z = scores.data + _causal_bias(t)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return ((scores, y * (g - (g * y).sum(axis=-1, keepdims=True))),)

    return _node(y, (scores,), back)
