"""Training loop for the contextual filter.

Each iteration samples a mini-batch of trajectories with replacement, rolls the
filter out recursively over every trajectory (previous estimates fed back as
data, detached from the gradient graph), averages the per-trajectory mean
squared error on normalized speed, and takes one Adam step. Rollouts within a
batch run in lockstep so every time step is one batched forward/backward.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import MetaDataset
from .filter import FilterConfig, FilterDivergence, forward_normalized, init_weights
from .nn import ParamStore, adam_step
from .tape import Tensor, concat, mul, reshape, sub, sum_all

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    n_itr: int = 5000
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    truncation_len: int = 1     # feedback detach horizon; only used when attached
    attach_feedback: bool = False
    eval_every: int = 100
    checkpoint_every: int = 0   # 0 disables periodic checkpoints
    seed: int = 0
    # gradient accumulation always runs in grad_chunks fixed sub-batches so the
    # summed gradient is byte-identical however many worker processes execute them
    grad_chunks: int = 2
    workers: int = 1
    filter_cfg: FilterConfig = field(default_factory=FilterConfig)

    def __post_init__(self):
        if self.truncation_len < 1:
            raise ValueError("truncation_len must be >= 1")
        if self.grad_chunks < 1 or self.workers < 1:
            raise ValueError("grad_chunks and workers must be >= 1")


def _stack_dataset(ds: MetaDataset) -> tuple[np.ndarray, np.ndarray]:
    lengths = {len(t) for t in ds.trajectories}
    if len(lengths) != 1:
        raise ValueError(f"batched training needs uniform trajectory lengths, got {sorted(lengths)}")
    channels = np.stack([t.channels() for t in ds.trajectories])
    omega = np.stack([t.omega_true() for t in ds.trajectories])
    return channels, omega


def rollout_batch(
    channels: np.ndarray,
    omega_true: np.ndarray | None,
    weights: ParamStore,
    cfg: FilterConfig,
    accumulate_grads: bool = False,
    predict_fn=None,
    engine: str = "fused",
    grad_denom: float | None = None,
) -> tuple[float | None, np.ndarray]:
    """Lockstep recursive rollout over [B, N, 4] channels.

    Returns (loss, estimates [B, N] in rad/s); loss is the mean squared error
    on normalized speed over all B*N steps (None when omega_true is None).
    When accumulate_grads is set, gradients of the loss are accumulated into
    the weights step by step so memory stays bounded by the window size.
    predict_fn overrides the model forward (testing hook, implies the tape
    engine); it must map a normalized-token Tensor [B, T, 5] to a
    normalized-speed Tensor [B]. engine="tape" forces the reference path.
    """
    channels = np.asarray(channels, dtype=np.float64)
    b, n, _ = channels.shape
    fused = None
    if predict_fn is None and engine == "fused":
        from ._fast import FusedFilter

        fused = FusedFilter(weights, cfg)
    elif predict_fn is None:
        predict_fn = lambda x: forward_normalized(x, weights, cfg)
    scales = np.asarray(cfg.scales)
    speed_scale = cfg.speed_scale
    omega_norm = None if omega_true is None else np.asarray(omega_true) / speed_scale

    window = np.zeros((b, cfg.n_ctx, cfg.input_dim))
    estimates = np.zeros((b, n))
    prev_norm = np.zeros(b)
    total = 0.0
    grad_scale = 1.0 / (grad_denom if grad_denom is not None else b * n)
    for k in range(n):
        if k < cfg.n_ctx:
            pos = k
        else:
            window[:, :-1, :] = window[:, 1:, :]
            pos = cfg.n_ctx - 1
        window[:, pos, :4] = channels[:, k, :] / scales[:4]
        window[:, pos, 4] = prev_norm
        t = min(k + 1, cfg.n_ctx)
        x = window[:, :t, :].copy()
        if fused is not None:
            if accumulate_grads and omega_norm is not None:
                y_data, cache = fused.forward(x, need_cache=True)
            else:
                y_data = fused.forward(x)
        else:
            y = predict_fn(Tensor(x))
            y_data = y.data
        if not np.isfinite(y_data).all():
            raise FilterDivergence(k)
        if omega_norm is not None:
            err = y_data - omega_norm[:, k]
            total += float(err @ err)
            if accumulate_grads:
                if fused is not None:
                    fused.backward(2.0 * grad_scale * err, cache)
                else:
                    e = sub(y, Tensor(omega_norm[:, k]))
                    sum_all(mul(e, e)).backward(np.asarray(grad_scale))
        prev_norm = y_data
        estimates[:, k] = y_data * speed_scale
    if fused is not None and accumulate_grads:
        fused.flush_grads()
    loss = None if omega_norm is None else total / (b * n)
    return loss, estimates


def rollout_loss(traj, weights: ParamStore, cfg: FilterConfig, predict_fn=None) -> float:
    """Mean squared error on normalized speed for one recursive rollout."""
    loss, _ = rollout_batch(
        traj.channels()[None, :, :],
        traj.omega_true()[None, :],
        weights,
        cfg,
        predict_fn=predict_fn,
    )
    return loss


def rollout_loss_attached(
    channels: np.ndarray,
    omega_true: np.ndarray,
    weights: ParamStore,
    cfg: FilterConfig,
    truncation_len: int,
) -> Tensor:
    """Ablation rollout with gradients flowing through fed-back estimates.

    Feedback stays attached to the graph and is detached every truncation_len
    steps. Memory grows with trajectory length; intended for short ablation
    runs only. Returns the scalar loss Tensor (call backward on it).
    """
    channels = np.asarray(channels, dtype=np.float64)
    b, n, _ = channels.shape
    scales = np.asarray(cfg.scales)
    omega_norm = np.asarray(omega_true) / cfg.speed_scale
    meas = channels / scales[:4]

    tokens: list[Tensor] = []
    prev: Tensor = Tensor(np.zeros((b, 1, 1)))
    loss_terms = []
    for k in range(n):
        token = concat([Tensor(meas[:, k : k + 1, :]), prev], axis=2)  # [B,1,5]
        tokens.append(token)
        if len(tokens) > cfg.n_ctx:
            tokens.pop(0)
        x = tokens[0] if len(tokens) == 1 else concat(tokens, axis=1)
        y = forward_normalized(x, weights, cfg)
        err = sub(y, Tensor(omega_norm[:, k]))
        loss_terms.append(sum_all(mul(err, err)))
        if (k + 1) % truncation_len == 0:
            prev = Tensor(y.data.reshape(b, 1, 1))
        else:
            prev = reshape(y, (b, 1, 1))
    total = loss_terms[0]
    for term in loss_terms[1:]:
        total = total + term
    return total * (1.0 / (b * n))


# worker-process state, populated by the pool initializer
_WORKER: dict = {}


def _worker_init(channels: np.ndarray, omega: np.ndarray, filter_cfg: FilterConfig):
    _WORKER["channels"] = channels
    _WORKER["omega"] = omega
    _WORKER["cfg"] = filter_cfg
    _WORKER["weights"] = init_weights(filter_cfg, seed=0)


def _worker_task(pvec: np.ndarray, idx: np.ndarray, denom: float):
    weights = _WORKER["weights"]
    weights.set_values(pvec)
    weights.zero_grad()
    loss, _ = rollout_batch(
        _WORKER["channels"][idx], _WORKER["omega"][idx], weights, _WORKER["cfg"],
        accumulate_grads=True, grad_denom=denom,
    )
    return loss * len(idx), weights.pack_grads()


def _chunk_indices(idx: np.ndarray, chunks: int) -> list[np.ndarray]:
    return [c for c in np.array_split(idx, chunks) if len(c)]


def train(
    ds: MetaDataset,
    cfg: TrainConfig,
    resume_from: str | Path | None = None,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    progress=None,
) -> tuple[ParamStore, list[dict]]:
    """Run the iteration loop; returns final weights and the loss log.

    Deterministic in (dataset, cfg): batch indices are a pure function of
    (cfg.seed, iteration) and gradients always accumulate over cfg.grad_chunks
    fixed sub-batches, so resuming from a checkpoint, or changing the worker
    count, reproduces the uninterrupted run's loss sequence.
    """
    if len(ds) == 0:
        raise ValueError("empty dataset")
    if cfg.batch_size > len(ds):
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {len(ds)}")
    channels, omega = _stack_dataset(ds)

    start_iter = 0
    log: list[dict] = []
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.filter_cfg != cfg.filter_cfg:
            raise CheckpointError(
                "checkpoint FilterConfig does not match TrainConfig.filter_cfg"
            )
        weights = ckpt.weights
        start_iter = ckpt.iteration
        log = list(ckpt.loss_log)
    else:
        weights = init_weights(cfg.filter_cfg, seed=cfg.seed)

    pool = None
    if cfg.workers > 1 and not cfg.attach_feedback:
        import multiprocessing as mp

        try:
            pool = mp.get_context("fork").Pool(
                processes=min(cfg.workers, cfg.grad_chunks),
                initializer=_worker_init,
                initargs=(channels, omega, cfg.filter_cfg),
            )
        except (ValueError, OSError):
            pool = None

    denom = float(cfg.batch_size * channels.shape[1])
    try:
        for it in range(start_iter, cfg.n_itr):
            t0 = time.perf_counter()
            rng = np.random.default_rng([cfg.seed, it])
            idx = rng.integers(0, len(ds), size=cfg.batch_size)
            weights.zero_grad()
            if cfg.attach_feedback:
                loss_t = rollout_loss_attached(
                    channels[idx], omega[idx], weights, cfg.filter_cfg,
                    cfg.truncation_len,
                )
                loss_t.backward()
                loss = float(loss_t.data)
            else:
                chunks = _chunk_indices(idx, cfg.grad_chunks)
                loss_sum = 0.0
                if pool is not None:
                    pvec = weights.pack_values()
                    results = [
                        pool.apply_async(_worker_task, (pvec, c, denom))
                        for c in chunks
                    ]
                    for res in results:
                        chunk_loss, gvec = res.get()
                        loss_sum += chunk_loss
                        weights.add_grads(gvec)
                else:
                    for c in chunks:
                        chunk_loss, _ = rollout_batch(
                            channels[c], omega[c], weights, cfg.filter_cfg,
                            accumulate_grads=True, grad_denom=denom,
                        )
                        loss_sum += chunk_loss * len(c)
                loss = loss_sum / cfg.batch_size
            if not np.isfinite(loss):
                raise FilterDivergence(it, f"non-finite training loss at iteration {it}")
            adam_step(weights, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
            log.append({"iter": it, "loss": loss,
                        "wall_ms": (time.perf_counter() - t0) * 1e3})
            if progress and (it + 1) % max(1, cfg.eval_every) == 0:
                progress(it + 1, cfg.n_itr, loss)
            if checkpoint_path and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(weights, log, checkpoint_path,
                                filter_cfg=cfg.filter_cfg, iteration=it + 1)
    finally:
        if pool is not None:
            pool.terminate()
            pool.join()

    if checkpoint_path:
        save_checkpoint(weights, log, checkpoint_path,
                        filter_cfg=cfg.filter_cfg, iteration=cfg.n_itr)
    if log_path:
        write_train_log(log, log_path)
    return weights, log


def write_train_log(log: list[dict], path: str | Path):
    lines = ["iter,loss,wall_ms"]
    lines += [f"{e['iter']},{e['loss']!r},{e['wall_ms']:.3f}" for e in log]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class Checkpoint:
    weights: ParamStore
    filter_cfg: FilterConfig
    iteration: int
    loss_log: list[dict]


def save_checkpoint(
    weights: ParamStore,
    log: list[dict],
    path: str | Path,
    *,
    filter_cfg: FilterConfig,
    iteration: int = 0,
):
    state = weights.state_dict()
    blob = {
        "format_version": CHECKPOINT_VERSION,
        "filter_cfg": filter_cfg.to_dict(),
        "iteration": iteration,
        "params": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                   for k, v in state["params"].items()},
        "adam": {
            "m": {k: v.reshape(-1).tolist() for k, v in state["m"].items()},
            "v": {k: v.reshape(-1).tolist() for k, v in state["v"].items()},
            "step_count": state["step_count"],
        },
        # timing-free log so checkpoints are byte-stable across runs
        "loss_log": [{"iter": e["iter"], "loss": e["loss"]} for e in log],
    }
    Path(path).write_text(json.dumps(blob, sort_keys=True))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        blob = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {blob.get('format_version')}"
        )
    filter_cfg = FilterConfig.from_dict(blob["filter_cfg"])
    weights = init_weights(filter_cfg, seed=0)
    expected = set(weights.names())
    got = set(blob["params"])
    if expected != got:
        raise CheckpointError(
            f"parameter names mismatch: missing {sorted(expected - got)}, "
            f"unexpected {sorted(got - expected)}"
        )
    params = {}
    for name, entry in blob["params"].items():
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if weights[name].data.shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name!r}")
        params[name] = arr
    weights.load_state_dict({
        "params": params,
        "m": {k: np.array(v, dtype=np.float64).reshape(params[k].shape)
              for k, v in blob["adam"]["m"].items()},
        "v": {k: np.array(v, dtype=np.float64).reshape(params[k].shape)
              for k, v in blob["adam"]["v"].items()},
        "step_count": blob["adam"]["step_count"],
    })
    loss_log = [{"iter": e["iter"], "loss": e["loss"], "wall_ms": 0.0}
                for e in blob["loss_log"]]
    return Checkpoint(weights=weights, filter_cfg=filter_cfg,
                      iteration=blob["iteration"], loss_log=loss_log)
