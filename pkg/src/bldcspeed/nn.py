"""Neural layers and optimizer on top of the tape engine."""

from __future__ import annotations

import math

import numpy as np

from .tape import (
    Tensor,
    affine,
    causal_softmax,
    gelu,
    matmul,
    mul,
    reshape,
    swapaxes,
)


class ParamStore:
    """Named trainable tensors plus Adam moment buffers."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def n_scalars(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def pack_values(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self._params.values()])

    def set_values(self, vec: np.ndarray):
        off = 0
        for t in self._params.values():
            size = t.data.size
            t.data[...] = vec[off:off + size].reshape(t.data.shape)
            off += size
        if off != vec.size:
            raise ValueError(f"vector length {vec.size} != parameter count {off}")

    def pack_grads(self) -> np.ndarray:
        parts = []
        for t in self._params.values():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            parts.append(g.reshape(-1))
        return np.concatenate(parts)

    def add_grads(self, vec: np.ndarray):
        off = 0
        for t in self._params.values():
            size = t.data.size
            chunk = vec[off:off + size].reshape(t.data.shape)
            t.grad = chunk.copy() if t.grad is None else t.grad + chunk
            off += size

    def state_dict(self) -> dict:
        return {
            "params": {k: t.data.copy() for k, t in self._params.items()},
            "m": {k: v.copy() for k, v in self._m.items()},
            "v": {k: v.copy() for k, v in self._v.items()},
            "step_count": self.step_count,
        }

    def load_state_dict(self, state: dict):
        for k, value in state["params"].items():
            if k not in self._params:
                raise KeyError(f"unknown parameter {k!r}")
            if self._params[k].data.shape != value.shape:
                raise ValueError(
                    f"shape mismatch for {k!r}: {self._params[k].data.shape} vs {value.shape}"
                )
            self._params[k].data = np.array(value, dtype=np.float64)
        self._m = {k: np.array(v, dtype=np.float64) for k, v in state["m"].items()}
        self._v = {k: np.array(v, dtype=np.float64) for k, v in state["v"].items()}
        self.step_count = int(state["step_count"])


def adam_step(
    store: ParamStore,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """Bias-corrected Adam update in place; gradients are zeroed afterwards."""
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.items():
        g = p.grad
        if g is None:
            continue
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    store.zero_grad()


def causal_mha(
    x: Tensor,
    wq: Tensor, bq: Tensor,
    wk: Tensor, bk: Tensor,
    wv: Tensor, bv: Tensor,
    wo: Tensor, bo: Tensor,
    n_heads: int,
) -> Tensor:
    """Causal multi-head self-attention over [T, d] or [B, T, d]."""
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    b, t, d = x.shape
    if d % n_heads != 0:
        raise ValueError(f"d={d} not divisible by n_heads={n_heads}")
    dh = d // n_heads

    def split_heads(y):
        return swapaxes(reshape(y, (b, t, n_heads, dh)), 1, 2)  # [B, H, T, dh]

    q = split_heads(affine(x, wq, bq))
    k = split_heads(affine(x, wk, bk))
    v = split_heads(affine(x, wv, bv))
    scores = mul(matmul(q, swapaxes(k, -1, -2)), Tensor(1.0 / math.sqrt(dh)))
    att = causal_softmax(scores)                       # [B, H, T, T]
    ctx = reshape(swapaxes(matmul(att, v), 1, 2), (b, t, d))
    out = affine(ctx, wo, bo)
    if squeeze:
        out = reshape(out, (t, d))
    return out


def ffn(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Position-wise feed-forward: affine -> GELU -> affine (residual added by caller)."""
    return affine(gelu(affine(x, w1, b1)), w2, b2)


def grad_check(
    f,
    store: ParamStore,
    h: float = 1e-5,
    tol: float = 1e-4,
    sample_frac: float = 0.01,
    min_samples: int = 50,
    seed: int = 0,
) -> dict:
    """Compare reverse-mode gradients of scalar f() against central differences.

    Samples a random subset of parameter coordinates (at least min_samples,
    about sample_frac of the total). Returns a report dict; report["failures"]
    lists every sampled coordinate whose relative error exceeds tol.
    """
    store.zero_grad()
    out = f()
    out.backward()
    analytic = {
        name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
        for name, p in store.items()
    }
    store.zero_grad()

    coords = []
    for name, p in store.items():
        for flat_idx in range(p.data.size):
            coords.append((name, flat_idx))
    rng = np.random.default_rng(seed)
    n = max(min_samples, int(round(sample_frac * len(coords))))
    n = min(n, len(coords))
    picked = rng.choice(len(coords), size=n, replace=False)

    max_rel = 0.0
    failures = []
    for ci in picked:
        name, flat_idx = coords[ci]
        p = store[name]
        flat = p.data.reshape(-1)
        orig = flat[flat_idx]
        flat[flat_idx] = orig + h
        f_plus = f().item()
        flat[flat_idx] = orig - h
        f_minus = f().item()
        flat[flat_idx] = orig
        fd = (f_plus - f_minus) / (2.0 * h)
        ad = analytic[name].reshape(-1)[flat_idx]
        rel = abs(ad - fd) / max(abs(ad), abs(fd), 1e-8)
        max_rel = max(max_rel, rel)
        if rel > tol:
            failures.append({"param": name, "index": int(flat_idx),
                             "analytic": float(ad), "numeric": float(fd),
                             "rel_error": float(rel)})
    return {
        "n_checked": int(n),
        "max_rel_error": float(max_rel),
        "tol": float(tol),
        "failures": failures,
        "ok": not failures,
    }
