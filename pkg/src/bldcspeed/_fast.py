"""Fused forward/backward for the contextual filter.

Hand-written batched backprop mirroring the tape ops arithmetic (same softmax
masking, layer-norm and GELU formulas), used in the training and evaluation
hot loops where per-node tape overhead dominates. The Q/K/V projections run as
one merged matmul and most chains mutate their buffers in place; gradients
accumulate into internal buffers and are flushed to the ParamStore once per
rollout. Equivalence with the tape path is pinned by tests; the tape remains
the reference.
"""

from __future__ import annotations

import ctypes
import math

import numpy as np

from .filter import FilterConfig
from .nn import ParamStore
from .tape import _GELU_A, _GELU_C, _causal_bias

_ALLOC_TUNED = False


def _tune_allocator():
    """Raise glibc's mmap/trim thresholds once.

    The rollout loops allocate ~100 KiB temporaries thousands of times per
    second; glibc hands buffers that size back to the OS on free, so every
    reuse page-faults and the training loop runs ~5x slower. Trading a few MB
    of resident heap for keeping those buffers fixes it; no-op off glibc.
    """
    global _ALLOC_TUNED
    if _ALLOC_TUNED:
        return
    _ALLOC_TUNED = True
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 1 << 26)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 26)  # M_TRIM_THRESHOLD
    except OSError:
        pass


def _ln_forward(x, g, b, eps):
    mean = np.einsum("btd->bt", x)[..., None]
    mean *= 1.0 / x.shape[-1]
    xm = x - mean
    var = np.einsum("btd,btd->bt", xm, xm)[..., None]
    var *= 1.0 / x.shape[-1]
    inv = 1.0 / np.sqrt(var + eps)
    xm *= inv          # xm becomes xhat
    return g * xm + b, (xm, inv)


def _ln_backward(gy, gamma, cache, g_gamma, g_beta):
    xhat, inv = cache
    d = xhat.shape[-1]
    g_gamma += np.einsum("btd,btd->d", gy, xhat)
    g_beta += np.einsum("btd->d", gy)
    dxhat = gy * gamma
    s1 = np.einsum("btd->bt", dxhat)[..., None]
    s2 = np.einsum("btd,btd->bt", dxhat, xhat)[..., None]
    dxhat *= d
    dxhat -= s1
    dxhat -= s2 * xhat
    dxhat *= inv * (1.0 / d)
    return dxhat


class FusedFilter:
    """Reads a ParamStore's arrays at construction; rebuild after updates.

    Gradients accumulate into internal buffers; flush_grads() adds them to the
    store's .grad fields (done automatically by the trainer's rollout).
    """

    def __init__(self, weights: ParamStore, cfg: FilterConfig):
        _tune_allocator()
        self.weights = weights
        self.cfg = cfg
        w = {name: t.data for name, t in weights.items()}
        self.w = w
        d = cfg.d_model
        self.layers_w = []
        for li in range(cfg.n_layers):
            pre = f"block{li}"
            w_qkv = np.concatenate(
                [w[f"{pre}.attn.wq"], w[f"{pre}.attn.wk"], w[f"{pre}.attn.wv"]], axis=1
            )
            b_qkv = np.concatenate(
                [w[f"{pre}.attn.bq"], w[f"{pre}.attn.bk"], w[f"{pre}.attn.bv"]]
            )
            self.layers_w.append({
                "ln1.g": w[f"{pre}.ln1.g"], "ln1.b": w[f"{pre}.ln1.b"],
                "w_qkv": w_qkv, "b_qkv": b_qkv,
                "wo": w[f"{pre}.attn.wo"], "bo": w[f"{pre}.attn.bo"],
                "ln2.g": w[f"{pre}.ln2.g"], "ln2.b": w[f"{pre}.ln2.b"],
                "w1": w[f"{pre}.ffn.w1"], "b1": w[f"{pre}.ffn.b1"],
                "w2": w[f"{pre}.ffn.w2"], "b2": w[f"{pre}.ffn.b2"],
            })
        self._grads: dict[str, np.ndarray] | None = None

    # gradient buffers -----------------------------------------------------

    def _ensure_grads(self):
        if self._grads is None:
            g = {}
            for name, p in self.weights.items():
                g[name] = np.zeros_like(p.data)
            d = self.cfg.d_model
            for li in range(self.cfg.n_layers):
                g[f"block{li}.attn.w_qkv"] = np.zeros((d, 3 * d))
                g[f"block{li}.attn.b_qkv"] = np.zeros(3 * d)
            self._grads = g
        return self._grads

    def flush_grads(self):
        """Add accumulated gradients into the ParamStore and reset buffers."""
        if self._grads is None:
            return
        d = self.cfg.d_model
        for li in range(self.cfg.n_layers):
            pre = f"block{li}"
            gq, gk, gv = np.split(self._grads.pop(f"{pre}.attn.w_qkv"), 3, axis=1)
            bq, bk, bv = np.split(self._grads.pop(f"{pre}.attn.b_qkv"), 3)
            for name, val in ((f"{pre}.attn.wq", gq), (f"{pre}.attn.wk", gk),
                              (f"{pre}.attn.wv", gv), (f"{pre}.attn.bq", bq),
                              (f"{pre}.attn.bk", bk), (f"{pre}.attn.bv", bv)):
                self._grads[name] += val
        for name, buf in self._grads.items():
            p = self.weights[name]
            if p.grad is None:
                p.grad = buf
            else:
                p.grad += buf
        self._grads = None

    # forward / backward ---------------------------------------------------

    def forward(self, x: np.ndarray, need_cache: bool = False):
        """[B, T, input_dim] normalized tokens -> [B] normalized speed."""
        cfg = self.cfg
        w = self.w
        b, t, _ = x.shape
        nh, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        d = cfg.d_model
        scale = 1.0 / math.sqrt(dh)
        bias = _causal_bias(t)
        eps = cfg.ln_eps

        h = x @ w["embed.w"] + w["embed.b"] + w["pos"][:t]
        layers = []
        for lw in self.layers_w:
            a_in, ln1c = _ln_forward(h, lw["ln1.g"], lw["ln1.b"], eps)
            qkv = a_in @ lw["w_qkv"] + lw["b_qkv"]
            qh = np.swapaxes(qkv[..., :d].reshape(b, t, nh, dh), 1, 2)
            kh = np.swapaxes(qkv[..., d:2 * d].reshape(b, t, nh, dh), 1, 2)
            vh = np.swapaxes(qkv[..., 2 * d:].reshape(b, t, nh, dh), 1, 2)
            att = qh @ np.swapaxes(kh, -1, -2)
            att *= scale
            att += bias
            att -= att.max(axis=-1, keepdims=True)
            np.exp(att, out=att)
            att /= np.einsum("bhij->bhi", att)[..., None]
            ctx = np.swapaxes(att @ vh, 1, 2).reshape(b, t, d)
            h_mid = h + (ctx @ lw["wo"] + lw["bo"])
            f_in, ln2c = _ln_forward(h_mid, lw["ln2.g"], lw["ln2.b"], eps)
            u = f_in @ lw["w1"] + lw["b1"]
            tanh_u = np.tanh(_GELU_C * (u + _GELU_A * (u * u * u)))
            act = 0.5 * u * (1.0 + tanh_u)
            h = h_mid + (act @ lw["w2"] + lw["b2"])
            if need_cache:
                layers.append((a_in, ln1c, qh, kh, vh, att, ctx, f_in, ln2c,
                               u, tanh_u, act))
        hf, lnfc = _ln_forward(h, w["final_ln.g"], w["final_ln.b"], eps)
        last = hf[:, -1, :]
        y = (last @ w["head.w"] + w["head.b"])[:, 0]
        if not need_cache:
            return y
        return y, (x, layers, hf, lnfc, last, t, b)

    def backward(self, gy: np.ndarray, cache):
        """Accumulate dL/dparams into the internal buffers given dL/dy [B]."""
        cfg = self.cfg
        w = self.w
        g = self._ensure_grads()
        x, layers, hf, lnfc, last, t, b = cache
        nh, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        d = cfg.d_model
        scale = 1.0 / math.sqrt(dh)

        gy2 = gy[:, None]
        g["head.w"] += last.T @ gy2
        g["head.b"] += gy2.sum(axis=0)
        g_hf = np.zeros_like(hf)
        g_hf[:, -1, :] = gy2 @ w["head.w"].T
        g_h = _ln_backward(g_hf, w["final_ln.g"], lnfc,
                           g["final_ln.g"], g["final_ln.b"])

        for li in reversed(range(cfg.n_layers)):
            pre = f"block{li}"
            lw = self.layers_w[li]
            (a_in, ln1c, qh, kh, vh, att, ctx, f_in, ln2c,
             u, tanh_u, act) = layers[li]
            # ffn branch: h = h_mid + act @ w2 + b2
            g2 = g_h.reshape(-1, d)
            g[f"{pre}.ffn.w2"] += act.reshape(-1, cfg.d_ff).T @ g2
            g[f"{pre}.ffn.b2"] += np.einsum("nd->d", g2)
            g_u = g_h @ lw["w2"].T
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * (u * u))
            du *= 1.0 - tanh_u * tanh_u
            tmp = 0.5 * u
            du *= tmp
            dgelu = 0.5 * (1.0 + tanh_u)
            dgelu += du
            g_u *= dgelu
            gu2 = g_u.reshape(-1, cfg.d_ff)
            g[f"{pre}.ffn.w1"] += f_in.reshape(-1, d).T @ gu2
            g[f"{pre}.ffn.b1"] += np.einsum("nd->d", gu2)
            g_ln2 = _ln_backward(g_u @ lw["w1"].T, lw["ln2.g"], ln2c,
                                 g[f"{pre}.ln2.g"], g[f"{pre}.ln2.b"])
            g_h += g_ln2
            # attention branch: h_mid = h_prev + ctx @ wo + bo
            g2 = g_h.reshape(-1, d)
            g[f"{pre}.attn.wo"] += ctx.reshape(-1, d).T @ g2
            g[f"{pre}.attn.bo"] += np.einsum("nd->d", g2)
            g_ctx = np.swapaxes((g_h @ lw["wo"].T).reshape(b, t, nh, dh), 1, 2)
            g_att = g_ctx @ np.swapaxes(vh, -1, -2)             # [B,H,T,T]
            g_vh = np.swapaxes(att, -1, -2) @ g_ctx             # [B,H,T,dh]
            s = np.einsum("bhij,bhij->bhi", g_att, att)[..., None]
            g_att -= s
            g_att *= att
            g_att *= scale                                      # g_att is now g_scores
            g_qh = g_att @ kh
            g_kh = np.swapaxes(g_att, -1, -2) @ qh
            g_qkv = np.empty((b, t, 3 * d))
            g_qkv[..., :d] = np.swapaxes(g_qh, 1, 2).reshape(b, t, d)
            g_qkv[..., d:2 * d] = np.swapaxes(g_kh, 1, 2).reshape(b, t, d)
            g_qkv[..., 2 * d:] = np.swapaxes(g_vh, 1, 2).reshape(b, t, d)
            gq2 = g_qkv.reshape(-1, 3 * d)
            g[f"{pre}.attn.w_qkv"] += a_in.reshape(-1, d).T @ gq2
            g[f"{pre}.attn.b_qkv"] += np.einsum("nd->d", gq2)
            g_ln1 = _ln_backward(g_qkv @ lw["w_qkv"].T, lw["ln1.g"], ln1c,
                                 g[f"{pre}.ln1.g"], g[f"{pre}.ln1.b"])
            g_h += g_ln1

        g2 = g_h.reshape(-1, d)
        g["embed.w"] += x.reshape(-1, cfg.input_dim).T @ g2
        g["embed.b"] += np.einsum("nd->d", g2)
        g["pos"][:t] += np.einsum("btd->td", g_h)
