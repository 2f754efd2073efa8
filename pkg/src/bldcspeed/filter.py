"""The contextual filter: tokenization, decoder stack, recursive inference.

Tokens are measurement tuples (v_alpha, v_beta, i_alpha, i_beta, omega_prev_hat)
normalized by per-channel scales. Inference is strictly online: the estimate at
step k is produced from a sliding window of at most n_ctx tokens, and each new
token carries the previous step's speed estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import rpm_to_rads
from .nn import ParamStore, causal_mha, ffn
from .tape import Tensor, add, affine, layer_norm, reshape, take_last_step


class FilterDivergence(RuntimeError):
    """Raised when the model emits a non-finite estimate; carries the step index."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite filter output at step {step}")


@dataclass(frozen=True)
class FilterConfig:
    n_layers: int = 8
    n_heads: int = 4
    n_ctx: int = 10
    d_model: int = 16
    input_dim: int = 5
    d_ff: int = 64
    ln_eps: float = 1e-5
    # per-channel divisors: v_alpha [V], v_beta [V], i_alpha [A], i_beta [A],
    # previous speed estimate [rad/s]
    scales: tuple[float, ...] = (48.0, 48.0, 5.0, 5.0, rpm_to_rads(400.0))

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_ctx < 1:
            raise ValueError("n_ctx must be >= 1")
        if len(self.scales) != self.input_dim:
            raise ValueError("need one scale per input channel")

    @property
    def speed_scale(self) -> float:
        return self.scales[-1]

    @classmethod
    def for_speed_max_rpm(cls, speed_max_rpm: float, **kwargs) -> "FilterConfig":
        return cls(
            scales=(48.0, 48.0, 5.0, 5.0, rpm_to_rads(speed_max_rpm)), **kwargs
        )

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers, "n_heads": self.n_heads,
            "n_ctx": self.n_ctx, "d_model": self.d_model,
            "input_dim": self.input_dim, "d_ff": self.d_ff,
            "ln_eps": self.ln_eps, "scales": list(self.scales),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FilterConfig":
        d = dict(d)
        d["scales"] = tuple(d["scales"])
        return cls(**d)


@dataclass
class TokenWindow:
    """Sliding window of measurement tuples, oldest first."""

    n_ctx: int
    tokens: list[tuple[float, float, float, float, float]] = field(default_factory=list)

    def append(self, token: tuple[float, float, float, float, float]):
        self.tokens.append(tuple(float(x) for x in token))
        if len(self.tokens) > self.n_ctx:
            self.tokens.pop(0)

    def __len__(self) -> int:
        return len(self.tokens)


def init_weights(cfg: FilterConfig, seed: int = 0) -> ParamStore:
    """Scaled-normal init (std 0.02) for projections, zeros for biases and head."""
    rng = np.random.default_rng(seed)
    ps = ParamStore()

    def w(name, shape):
        ps.add(name, rng.normal(0.0, 0.02, size=shape))

    def zeros(name, shape):
        ps.add(name, np.zeros(shape))

    def ones(name, shape):
        ps.add(name, np.ones(shape))

    d, dff = cfg.d_model, cfg.d_ff
    w("embed.w", (cfg.input_dim, d))
    zeros("embed.b", (d,))
    w("pos", (cfg.n_ctx, d))
    for layer in range(cfg.n_layers):
        pre = f"block{layer}"
        ones(f"{pre}.ln1.g", (d,))
        zeros(f"{pre}.ln1.b", (d,))
        for proj in ("q", "k", "v", "o"):
            w(f"{pre}.attn.w{proj}", (d, d))
            zeros(f"{pre}.attn.b{proj}", (d,))
        ones(f"{pre}.ln2.g", (d,))
        zeros(f"{pre}.ln2.b", (d,))
        w(f"{pre}.ffn.w1", (d, dff))
        zeros(f"{pre}.ffn.b1", (dff,))
        w(f"{pre}.ffn.w2", (dff, d))
        zeros(f"{pre}.ffn.b2", (d,))
    ones("final_ln.g", (d,))
    zeros("final_ln.b", (d,))
    # zero head: the untrained filter outputs 0, the defined initial estimate
    zeros("head.w", (d, 1))
    zeros("head.b", (1,))
    return ps


def count_params(weights: ParamStore) -> int:
    return weights.n_scalars()


def tokenize(window: TokenWindow, cfg: FilterConfig) -> np.ndarray:
    """Normalize a window into a [T, input_dim] array, order preserved."""
    if len(window) == 0:
        raise ValueError("empty token window")
    arr = np.asarray(window.tokens, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError("non-finite values in token window")
    return arr / np.asarray(cfg.scales)


def denormalize(tokens: np.ndarray, cfg: FilterConfig) -> np.ndarray:
    return np.asarray(tokens, dtype=np.float64) * np.asarray(cfg.scales)


def forward_normalized(x: Tensor, weights: ParamStore, cfg: FilterConfig) -> Tensor:
    """Decoder stack on normalized tokens [B, T, input_dim] -> [B] (normalized speed).

    Pre-norm blocks; the head reads the last position only.
    """
    b, t, _ = x.shape
    if t > cfg.n_ctx:
        raise ValueError(f"window length {t} exceeds n_ctx {cfg.n_ctx}")
    h = add(affine(x, weights["embed.w"], weights["embed.b"]), _pos_slice(weights["pos"], t))
    for layer in range(cfg.n_layers):
        pre = f"block{layer}"
        attn_in = layer_norm(h, weights[f"{pre}.ln1.g"], weights[f"{pre}.ln1.b"], cfg.ln_eps)
        h = add(
            h,
            causal_mha(
                attn_in,
                weights[f"{pre}.attn.wq"], weights[f"{pre}.attn.bq"],
                weights[f"{pre}.attn.wk"], weights[f"{pre}.attn.bk"],
                weights[f"{pre}.attn.wv"], weights[f"{pre}.attn.bv"],
                weights[f"{pre}.attn.wo"], weights[f"{pre}.attn.bo"],
                cfg.n_heads,
            ),
        )
        ffn_in = layer_norm(h, weights[f"{pre}.ln2.g"], weights[f"{pre}.ln2.b"], cfg.ln_eps)
        h = add(
            h,
            ffn(
                ffn_in,
                weights[f"{pre}.ffn.w1"], weights[f"{pre}.ffn.b1"],
                weights[f"{pre}.ffn.w2"], weights[f"{pre}.ffn.b2"],
            ),
        )
    h = layer_norm(h, weights["final_ln.g"], weights["final_ln.b"], cfg.ln_eps)
    out = affine(take_last_step(h), weights["head.w"], weights["head.b"])  # [B, 1]
    return reshape(out, (b,))


def _pos_slice(pos: Tensor, t: int) -> Tensor:
    from .tape import _node  # local import to keep the tape surface minimal

    def back(g):
        gp = np.zeros_like(pos.data)
        gp[:t] = g
        return ((pos, gp),)

    return _node(pos.data[:t], (pos,), back)


def forward(window: TokenWindow, weights: ParamStore, cfg: FilterConfig) -> float:
    """Speed estimate in rad/s for one window."""
    x = Tensor(tokenize(window, cfg)[None, :, :])
    y = forward_normalized(x, weights, cfg)
    return float(y.data[0]) * cfg.speed_scale


def run_filter_batched(
    channels: np.ndarray, weights: ParamStore, cfg: FilterConfig,
    engine: str = "fused",
) -> np.ndarray:
    """Recursive estimate-feedback inference over [B, N, 4] channel arrays.

    Returns estimates [B, N] in rad/s. Strictly online; the previous estimate
    enters each new token as data (initial estimate 0). engine="tape" forces
    the reference forward; "fused" uses the equivalent batched fast path.
    """
    channels = np.asarray(channels, dtype=np.float64)
    if channels.ndim != 3 or channels.shape[-1] != 4:
        raise ValueError("channels must be [B, N, 4]")
    b, n, _ = channels.shape
    if engine == "fused":
        from ._fast import FusedFilter

        predict = FusedFilter(weights, cfg).forward
    else:
        predict = lambda x: forward_normalized(Tensor(x), weights, cfg).data
    scales = np.asarray(cfg.scales)
    window = np.zeros((b, cfg.n_ctx, cfg.input_dim))
    estimates = np.zeros((b, n))
    prev = np.zeros(b)
    for k in range(n):
        t = min(k + 1, cfg.n_ctx)
        if k < cfg.n_ctx:
            window[:, k, :4] = channels[:, k, :] / scales[:4]
            window[:, k, 4] = prev / scales[4]
        else:
            window[:, :-1, :] = window[:, 1:, :]
            window[:, -1, :4] = channels[:, k, :] / scales[:4]
            window[:, -1, 4] = prev / scales[4]
        y = predict(window[:, :t, :].copy())
        prev = y * cfg.speed_scale
        if not np.isfinite(prev).all():
            raise FilterDivergence(k)
        estimates[:, k] = prev
    return estimates


def run_filter(traj, weights: ParamStore, cfg: FilterConfig) -> np.ndarray:
    """Online speed estimates (rad/s) for every sample of a trajectory."""
    return run_filter_batched(traj.channels()[None, :, :], weights, cfg)[0]
