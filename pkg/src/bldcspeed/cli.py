"""Command-line entry points.

Subcommands: simulate, gen-dataset, train, eval, ekf-tune, ekf-run,
alias-demo, grad-check. Errors exit nonzero with a one-line reason on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .core import rads_to_rpm, rpm_to_rads
from .dataset import (
    PerturbationSpec,
    generate_metadataset,
    load_metadataset,
    nominal_params,
    save_metadataset,
)
from .ekf import EkfCovariances, EkfModel, SearchConfig, run_ekf, tune_covariances
from .filter import FilterConfig, forward_normalized, init_weights
from .harness import (
    BenchmarkSettings,
    nyquist_fold_demo,
    run_aliasing_experiment,
    run_full_benchmark,
)
from .motorsim import (
    SimConfig,
    load_trajectory,
    make_fixed_profile,
    make_random_step_profile,
    make_training_profile,
    save_trajectory,
    simulate_closed_loop,
)
from .nn import grad_check
from .tape import Tensor, mul, sub, sum_all
from .trainer import TrainConfig, train, write_train_log


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bldcspeed",
        description="Sensorless BLDC speed estimation: simulator, contextual filter, EKF baseline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one closed-loop simulation to CSV")
    p.add_argument("--profile", choices=["fixed", "training", "steps"], default="fixed")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--speed-max-rpm", type=float, default=400.0)
    p.add_argument("--duration", type=float, default=None, help="steps profile length [s]")
    p.add_argument("--noise-xi-std", type=float, default=0.01)

    p = sub.add_parser("gen-dataset", help="generate a meta-dataset directory")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--speed-max-rpm", type=float, default=400.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the contextual filter on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--iters", type=int, default=1500)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--speed-max-rpm", type=float, default=400.0, choices=[400.0, 4000.0])
    p.add_argument("--log", default=None, help="training log CSV path")
    p.add_argument("--resume", default=None, help="resume from checkpoint")

    p = sub.add_parser("eval", help="benchmark filter vs tuned EKF on held-out instances")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--mode", choices=["normal", "aliasing"], default="normal")
    p.add_argument("--seed", type=int, default=20250)
    p.add_argument("--n-test", type=int, default=15)
    p.add_argument("--covs", default=None,
                   help="JSON dict config->covariances (aliasing mode)")

    p = sub.add_parser("ekf-tune", help="tune EKF covariances on trajectories")
    p.add_argument("--trajs", nargs="+", required=True)
    p.add_argument("--out", required=True, help="covariances JSON path")
    p.add_argument("--candidates", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--standard-park", action="store_true")

    p = sub.add_parser("ekf-run", help="run the EKF on one trajectory")
    p.add_argument("--traj", required=True)
    p.add_argument("--covs", required=True)
    p.add_argument("--out", required=True, help="estimate CSV path")
    p.add_argument("--standard-park", action="store_true")

    p = sub.add_parser("alias-demo", help="demonstrate Nyquist folding of the sampled currents")
    p.add_argument("--speed-rpm", type=float, default=300.0)
    p.add_argument("--samples", type=int, default=500)

    p = sub.add_parser("grad-check", help="finite-difference check of the gradient engine")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)

    return parser


def _cmd_simulate(args) -> int:
    if args.profile == "fixed":
        profile = make_fixed_profile()
    elif args.profile == "training":
        profile = make_training_profile(args.seed, rpm_to_rads(args.speed_max_rpm))
    else:
        profile = make_random_step_profile(
            args.seed,
            (rpm_to_rads(50.0), rpm_to_rads(args.speed_max_rpm)),
            (3.0, 5.0),
            args.duration or 20.0,
        )
    cfg = SimConfig(duration=args.duration or profile.duration, seed=args.seed,
                    noise_xi_std=args.noise_xi_std)
    traj = simulate_closed_loop(nominal_params(), profile, cfg)
    save_trajectory(traj, args.out, sidecar={"sim_cfg": cfg.to_dict(),
                                             "profile": profile.to_dict()})
    print(f"wrote {len(traj)} samples to {args.out}")
    return 0


def _cmd_gen_dataset(args) -> int:
    ds = generate_metadataset(
        b=args.count,
        spec=PerturbationSpec(),
        sim_cfg=SimConfig(),
        speed_max=rpm_to_rads(args.speed_max_rpm),
        base_seed=args.seed,
    )
    save_metadataset(ds, args.out)
    print(f"wrote {len(ds)} trajectories to {args.out}")
    return 0


def _cmd_train(args) -> int:
    ds = load_metadataset(args.dataset)
    cfg = TrainConfig(
        n_itr=args.iters,
        batch_size=args.batch,
        lr=args.lr,
        seed=args.seed,
        filter_cfg=FilterConfig.for_speed_max_rpm(args.speed_max_rpm),
    )
    weights, log = train(ds, cfg, resume_from=args.resume, checkpoint_path=args.out)
    if args.log:
        write_train_log(log, args.log)
    print(f"trained {cfg.n_itr} iterations; final loss {log[-1]['loss']:.6g}; "
          f"checkpoint: {args.out}")
    return 0


def _cmd_eval(args) -> int:
    if args.mode == "normal":
        settings = BenchmarkSettings(seed=args.seed, n_test_profiles=args.n_test)
        result = run_full_benchmark(args.checkpoint, settings, out_dir=args.out)
    else:
        covs_by_config = {}
        if args.covs:
            blob = json.loads(Path(args.covs).read_text())
            covs_by_config = {k: EkfCovariances.from_dict(v) for k, v in blob.items()}
        settings = BenchmarkSettings(
            n_test_profiles=min(args.n_test, 5),
            amp_range_rpm=(250.0, 2500.0), seed=args.seed,
        )
        result = run_aliasing_experiment(args.checkpoint, covs_by_config,
                                         settings, out_dir=args.out)
    for cfg in result["configs"]:
        print(f"{cfg['config']}: filter {cfg['filter']['mean_rmse_rpm']:.2f} rpm, "
              f"ekf {cfg['ekf']['mean_rmse_rpm']:.2f} rpm")
    return 0


def _cmd_ekf_tune(args) -> int:
    trajs = [load_trajectory(p) for p in args.trajs]
    params = trajs[0].params
    if params is None:
        raise ValueError("tuning trajectories carry no motor parameters (missing sidecar)")
    model = EkfModel.from_motor_params(params, standard_park=args.standard_park)
    covs, details = tune_covariances(
        trajs, model, SearchConfig(n_candidates=args.candidates, seed=args.seed),
        return_details=True,
    )
    covs.save(args.out)
    print(f"tuned covariances -> {args.out} (score {details['score_rpm']:.2f} rpm)")
    return 0


def _cmd_ekf_run(args) -> int:
    traj = load_trajectory(args.traj)
    if traj.params is None:
        raise ValueError("trajectory carries no motor parameters (missing sidecar)")
    covs = EkfCovariances.load(args.covs)
    model = EkfModel.from_motor_params(traj.params, standard_park=args.standard_park)
    est = run_ekf(traj, model, covs)
    with open(args.out, "w") as fh:
        fh.write("t,omega_true,omega_ekf\n")
        for k, s in enumerate(traj.samples):
            fh.write(f"{s.t!r},{s.omega!r},{est[k]!r}\n")
    print(f"wrote {len(est)} estimates to {args.out}")
    return 0


def _cmd_alias_demo(args) -> int:
    demo = nyquist_fold_demo(rpm_to_rads(args.speed_rpm), n_samples=args.samples)
    print(f"omega_max = {demo['omega_max']:.4f} rad/s "
          f"({rads_to_rpm(demo['omega_max']):.1f} rpm)")
    print(f"speeds {rads_to_rpm(demo['omega_1']):.1f} rpm and "
          f"{rads_to_rpm(demo['omega_2']):.1f} rpm sampled at 100 Hz:")
    print(f"max |current difference| over {args.samples} samples = "
          f"{demo['max_abs_delta']:.3e} A (indistinguishable)")
    return 0


def _cmd_grad_check(args) -> int:
    cfg = FilterConfig()
    weights = init_weights(cfg, seed=args.seed)
    rng = np.random.default_rng(args.seed + 1)
    for _, p in weights.items():
        p.data = p.data + rng.normal(0.0, 0.05, size=p.data.shape)
    x = rng.normal(size=(1, cfg.n_ctx, cfg.input_dim))
    target = Tensor(np.array([0.5]))

    def f():
        err = sub(forward_normalized(Tensor(x), weights, cfg), target)
        return sum_all(mul(err, err))

    report = grad_check(f, weights, tol=args.tol, seed=args.seed)
    print(f"checked {report['n_checked']} coordinates, "
          f"max relative error {report['max_rel_error']:.3e} (tol {args.tol:g})")
    if not report["ok"]:
        print(f"error: {len(report['failures'])} coordinates exceed tolerance",
              file=sys.stderr)
        return 1
    return 0


_HANDLERS = {
    "simulate": _cmd_simulate,
    "gen-dataset": _cmd_gen_dataset,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ekf-tune": _cmd_ekf_tune,
    "ekf-run": _cmd_ekf_run,
    "alias-demo": _cmd_alias_demo,
    "grad-check": _cmd_grad_check,
}


def cli_dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _HANDLERS[args.command](args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
