"""Acceptance suite: one test per criterion, each printing a PASS line.

Criteria 5-7 evaluate the trained artifacts built by the session fixture
(crude first run takes hours; cached reruns are quick). Run with -s to see
the per-criterion lines.
"""

import json
import math
import time

import numpy as np

from bldcspeed.core import omega_max, rads_to_rpm, rpm_to_rads
from bldcspeed.dataset import (
    PerturbationSpec,
    generate_metadataset,
    nominal_params,
    save_metadataset,
)
from bldcspeed.ekf import (
    EkfCovariances,
    EkfModel,
    FrozenAngleModel,
    f_and_jacobian,
    h_and_jacobian,
    initial_state,
    predict,
    update,
)
from bldcspeed.filter import FilterConfig, count_params, forward_normalized, init_weights, run_filter
from bldcspeed.harness import nyquist_fold_demo, run_benchmark
from bldcspeed.motorsim import SimConfig, make_training_profile, simulate_closed_loop
from bldcspeed.nn import grad_check
from bldcspeed.tape import Tensor, mul, sub, sum_all
from bldcspeed.trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train


def announce(criterion: int, ok: bool, detail: str):
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
    assert ok, detail


def test_criterion_1_gradient_engine_full_model():
    cfg = FilterConfig()
    weights = init_weights(cfg, seed=0)
    rng = np.random.default_rng(1)
    for _, p in weights.items():
        p.data += rng.normal(0, 0.05, size=p.data.shape)
    x = rng.normal(size=(1, cfg.n_ctx, cfg.input_dim))
    target = Tensor(np.array([0.4]))

    def loss():
        err = sub(forward_normalized(Tensor(x), weights, cfg), target)
        return sum_all(mul(err, err))

    t0 = time.perf_counter()
    report = grad_check(loss, weights, h=1e-5, tol=1e-4, seed=2)
    elapsed = time.perf_counter() - t0
    ok = report["ok"] and report["max_rel_error"] < 1e-4 and elapsed < 60.0
    announce(1, ok, f"grad_check on {report['n_checked']} coords, max rel err "
                    f"{report['max_rel_error']:.3e} < 1e-4 in {elapsed:.1f}s")


def test_criterion_2_ekf_jacobian_fidelity():
    model = EkfModel.from_motor_params(nominal_params())
    rng = np.random.default_rng(3)
    worst_f, worst_h = 0.0, 0.0
    for _ in range(100):
        x = np.array([rng.normal(0, 2), rng.normal(0, 2),
                      rng.normal(0, 100), rng.uniform(0, 2 * math.pi)])
        u = tuple(rng.normal(0, 10, size=2))
        _, jac_f = f_and_jacobian(x, u, model)
        _, jac_h = h_and_jacobian(x, model)
        for j in range(4):
            xp, xm = x.copy(), x.copy()
            xp[j] += 1e-5
            xm[j] -= 1e-5
            fd_f = (f_and_jacobian(xp, u, model)[0]
                    - f_and_jacobian(xm, u, model)[0]) / 2e-5
            fd_h = (h_and_jacobian(xp, model)[0]
                    - h_and_jacobian(xm, model)[0]) / 2e-5
            worst_f = max(worst_f, np.max(np.abs(jac_f[:, j] - fd_f)
                                          / np.maximum(np.abs(fd_f), 1.0)))
            worst_h = max(worst_h, np.max(np.abs(jac_h[:, j] - fd_h)
                                          / np.maximum(np.abs(fd_h), 1.0)))
    ok = worst_f < 1e-6 and worst_h < 1e-6
    announce(2, ok, f"F rel err {worst_f:.2e}, H rel err {worst_h:.2e} "
                    f"over 100 random states (< 1e-6)")


def test_criterion_3_aliasing_bound_and_folding():
    w_max = omega_max(7, 0.01)
    bound_ok = abs(w_max - 44.880) < 1e-3
    demo = nyquist_fold_demo(rpm_to_rads(300.0), pole_pairs=7, ts=0.01,
                             n_samples=500)
    fold_ok = demo["max_abs_delta"] < 1e-9
    announce(3, bound_ok and fold_ok,
             f"omega_max(7, 0.01) = {w_max:.4f} rad/s "
             f"({rads_to_rpm(w_max):.1f} rpm); folded current sequences differ "
             f"by {demo['max_abs_delta']:.2e} <= 1e-9")


def test_criterion_4_parameter_count():
    n = count_params(init_weights(FilterConfig()))
    ok = 20097 <= n <= 30145
    announce(4, ok, f"count_params = {n}, inside [20097, 30145] (25121 +/- 20%)")


def test_criterion_5_inference_latency(acceptance_artifacts):
    ckpt = load_checkpoint(acceptance_artifacts["ckpt400"])
    profile = make_training_profile(seed=999, speed_max=rpm_to_rads(400.0))
    traj = simulate_closed_loop(nominal_params(), profile,
                                SimConfig(duration=5.0, seed=999))
    run_filter(traj, ckpt.weights, ckpt.filter_cfg)  # warm caches
    t0 = time.perf_counter()
    run_filter(traj, ckpt.weights, ckpt.filter_cfg)
    per_step_ms = (time.perf_counter() - t0) / len(traj) * 1e3
    ok = per_step_ms < 10.0
    announce(5, ok, f"mean run_filter step latency {per_step_ms:.2f} ms < 10 ms")


def test_criterion_6_desk_scale_benchmark(acceptance_artifacts):
    bench = acceptance_artifacts["bench"]
    lines = []
    wins = 0
    all_under = True
    for cfg in bench["configs"]:
        f_mean = cfg["filter"]["mean_rmse_rpm"]
        e_mean = cfg["ekf"]["mean_rmse_rpm"]
        # an EKF that diverged on every profile has unbounded error
        win = (not np.isfinite(e_mean)) or f_mean < e_mean
        wins += win
        all_under &= f_mean < 40.0
        lines.append(f"{cfg['config']}: filter {f_mean:.1f} rpm "
                     f"vs ekf {e_mean:.1f} rpm{' (win)' if win else ''}")
    log = acceptance_artifacts["root"] / "filter_400.log.csv"
    train_min = sum(float(r.split(",")[2]) for r in
                    log.read_text().splitlines()[1:]) / 60e3
    budget_ok = train_min < 120.0
    ok = all_under and wins >= 4 and budget_ok
    announce(6, ok, f"{'; '.join(lines)}; filter wins {wins}/5 (need >= 4), "
                    f"every config < 40 rpm: {all_under}, "
                    f"training wall {train_min:.0f} min < 120")


def test_desk_scale_loss_curve_stability(acceptance_artifacts):
    # derived training-run property: under a 100-iteration moving average the
    # loss decays strongly and never rebounds past 4x its running minimum
    # (batch noise makes strict monotonicity unattainable; worst observed
    # rebound on the frozen seed is ~2.6x)
    ckpt = json.loads((acceptance_artifacts["root"] / "filter_400.json").read_text())
    losses = np.array([e["loss"] for e in ckpt["loss_log"]])
    assert len(losses) == 1500
    ma = np.convolve(losses, np.ones(100) / 100, mode="valid")
    running_min = np.minimum.accumulate(ma)
    assert np.max(ma / running_min) < 4.0
    assert ma[-1] < 0.15 * ma[0]


def test_criterion_7_beyond_aliasing(acceptance_artifacts):
    alias = acceptance_artifacts["alias"]
    lines = []
    ok = True
    for cfg in alias["configs"]:
        f_mean = cfg["filter"]["mean_rmse_rpm"]
        mean_speed = np.mean([s["mean_true_speed_rpm"] for s in cfg["segments"]])
        rel_ok = f_mean < 0.10 * mean_speed
        f_above = [s["filter"]["above_rmse_rpm"] for s in cfg["segments"]]
        e_above = [s["ekf"]["above_rmse_rpm"] for s in cfg["segments"]]
        f_above = np.mean([v for v in f_above if v is not None])
        finite_e = [v for v in e_above if v is not None]
        # EKF divergence (no finite segment error) counts as unbounded error
        e_above_mean = np.mean(finite_e) if len(finite_e) == len(e_above) else np.inf
        ratio_ok = e_above_mean >= 5.0 * f_above
        ok &= rel_ok and ratio_ok
        ratio = e_above_mean / f_above if f_above > 0 else np.inf
        lines.append(f"{cfg['config']}: filter {f_mean:.0f} rpm vs "
                     f"{0.1 * mean_speed:.0f} limit, above-threshold ratio "
                     f"{ratio:.1f}x")
    announce(7, ok, "; ".join(lines))


def test_criterion_8_linear_reduction_matches_kalman():
    model = FrozenAngleModel(base=EkfModel.from_motor_params(nominal_params()),
                             theta0=0.7)
    covs = EkfCovariances(q=(0.05, 0.1, 0.8, 1e-9), p0_theta=1e-6)
    a_c, b_u, h = model._matrices()
    ts = 0.01
    a = np.eye(4) + ts * a_c
    rng = np.random.default_rng(8)
    state = initial_state(covs)
    x_ref = np.zeros(4)
    p_ref = covs.P0.copy()
    worst = 0.0
    for _ in range(1000):
        u = rng.normal(0, 1, size=2)
        y = rng.normal(0, 1, size=2)
        state = predict(state, tuple(u), covs, model, ts)
        state = update(state, tuple(y), covs, model)
        x_ref = a @ x_ref + ts * (b_u @ u)
        x_ref[3] = x_ref[3] % (2 * math.pi)
        p_ref = a @ p_ref @ a.T + ts * covs.Q
        p_ref = 0.5 * (p_ref + p_ref.T)
        s = h @ p_ref @ h.T + covs.R
        det = s[0, 0] * s[1, 1] - s[0, 1] * s[1, 0]
        s_inv = np.array([[s[1, 1], -s[0, 1]], [-s[1, 0], s[0, 0]]]) / det
        k = p_ref @ h.T @ s_inv
        x_ref = x_ref + k @ (y - h @ x_ref)
        x_ref[3] = x_ref[3] % (2 * math.pi)
        ikh = np.eye(4) - k @ h
        p_ref = ikh @ p_ref @ ikh.T + k @ covs.R @ k.T
        p_ref = 0.5 * (p_ref + p_ref.T)
        worst = max(worst, np.abs(state.x - x_ref).max(),
                    np.abs(state.p - p_ref).max())
    ok = worst < 1e-10
    announce(8, ok, f"frozen-angle EKF vs textbook Kalman filter over 1000 "
                    f"steps: max deviation {worst:.2e} < 1e-10")


def test_criterion_9_determinism_suite(tmp_path):
    # dataset generation byte-stability
    dirs = []
    for name in ("d1", "d2"):
        ds = generate_metadataset(3, PerturbationSpec(), SimConfig(),
                                  speed_max=rpm_to_rads(400.0), base_seed=55)
        save_metadataset(ds, tmp_path / name)
        dirs.append(tmp_path / name)
    ds_ok = all(
        (dirs[0] / f.name).read_bytes() == (dirs[1] / f.name).read_bytes()
        for f in sorted(dirs[0].iterdir())
    )

    # training loss sequence byte-stability (timing-free checkpoint payload)
    small = FilterConfig(n_layers=2, n_heads=2, n_ctx=6, d_model=8, d_ff=16)
    short_profile = lambda seed: make_training_profile(seed, rpm_to_rads(300.0))
    ds = generate_metadataset(3, PerturbationSpec(), SimConfig(duration=5.0),
                              speed_max=rpm_to_rads(300.0), base_seed=56,
                              profile_factory=short_profile)
    ckpts = []
    for name in ("c1.json", "c2.json"):
        cfg = TrainConfig(n_itr=4, batch_size=2, seed=9, filter_cfg=small)
        weights, log = train(ds, cfg)
        save_checkpoint(weights, log, tmp_path / name, filter_cfg=small,
                        iteration=4)
        ckpts.append((tmp_path / name).read_bytes())
    train_ok = ckpts[0] == ckpts[1]

    # evaluation report byte-stability
    weights = init_weights(small, seed=1)
    ckpt = Checkpoint(weights=weights, filter_cfg=small, iteration=0, loss_log=[])
    covs = EkfCovariances(q=(10.0, 100.0, 1.0, 10.0), p0_theta=1e-3)
    from bldcspeed.motorsim import ReferenceProfile

    step_profile = lambda seed: ReferenceProfile(
        breakpoints=((0.0, 0.0), (0.3, rpm_to_rads(150.0))), duration=2.0)
    test_ds = generate_metadataset(2, PerturbationSpec(), SimConfig(duration=2.0),
                                   speed_max=rpm_to_rads(300.0), base_seed=57,
                                   profile_factory=step_profile)
    reports = [
        json.dumps(run_benchmark(test_ds, ckpt, covs, warmup=20).to_dict(),
                   sort_keys=True)
        for _ in range(2)
    ]
    eval_ok = reports[0] == reports[1]
    announce(9, ds_ok and train_ok and eval_ok,
             f"byte-stable: dataset {ds_ok}, training log {train_ok}, "
             f"evaluation report {eval_ok}")
