"""Build (or reuse) the artifacts the acceptance suite evaluates.

Everything is a pure function of the frozen seeds below; each step is cached
on disk so interrupted runs resume where they left off. Run standalone:

    python3 tests/pipeline_build.py [--root artifacts/acceptance]
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

from bldcspeed.core import rpm_to_rads
from bldcspeed.dataset import (
    PerturbationSpec,
    generate_metadataset,
    load_metadataset,
    save_metadataset,
)
from bldcspeed.filter import FilterConfig
from bldcspeed.harness import (
    BenchmarkSettings,
    make_test_instances,
    run_aliasing_experiment,
    run_full_benchmark,
    simulate_profile_set,
)
from bldcspeed.ekf import EkfCovariances, EkfModel, tune_covariances
from bldcspeed.motorsim import SimConfig
from bldcspeed.trainer import TrainConfig, load_checkpoint, train, write_train_log

DEFAULT_ROOT = Path(__file__).resolve().parent.parent / "artifacts" / "acceptance"

TRAIN_SIZE = 200
TRAIN_ITERS = 1500
TRAIN_BATCH = 32
TRAIN_SEED = 7
DATASET_SEED_400 = 1000
DATASET_SEED_4000 = 2000
BENCH_SEED = 20250
ALIAS_SEED = 20251


def _log(msg: str):
    print(f"[pipeline {time.strftime('%H:%M:%S')}] {msg}", flush=True)


def ensure_dataset(root: Path, name: str, speed_max_rpm: float, seed: int):
    path = root / name
    if (path / "manifest.json").exists():
        _log(f"dataset {name}: cached")
        return load_metadataset(path)
    _log(f"dataset {name}: simulating {TRAIN_SIZE} trajectories")
    ds = generate_metadataset(
        b=TRAIN_SIZE,
        spec=PerturbationSpec(),
        sim_cfg=SimConfig(),
        speed_max=rpm_to_rads(speed_max_rpm),
        base_seed=seed,
    )
    save_metadataset(ds, path)
    return ds


def ensure_checkpoint(root: Path, name: str, ds, speed_max_rpm: float):
    path = root / name
    if path.exists():
        ckpt = load_checkpoint(path)
        if ckpt.iteration >= TRAIN_ITERS:
            _log(f"checkpoint {name}: cached ({ckpt.iteration} iterations)")
            return path
        _log(f"checkpoint {name}: resuming at iteration {ckpt.iteration}")
        resume = path
    else:
        _log(f"checkpoint {name}: training {TRAIN_ITERS} iterations")
        resume = None
    cfg = TrainConfig(
        n_itr=TRAIN_ITERS,
        batch_size=TRAIN_BATCH,
        lr=1e-3,
        seed=TRAIN_SEED,
        workers=2,
        checkpoint_every=100,
        filter_cfg=FilterConfig.for_speed_max_rpm(speed_max_rpm),
    )
    _, log = train(
        ds, cfg, resume_from=resume, checkpoint_path=path,
        progress=lambda it, total, loss: _log(f"  {name} iter {it}/{total} loss {loss:.5f}"),
    )
    write_train_log(log, path.with_suffix(".log.csv"))
    return path


def benchmark_settings() -> BenchmarkSettings:
    return BenchmarkSettings(seed=BENCH_SEED)


def aliasing_settings() -> BenchmarkSettings:
    return BenchmarkSettings(
        n_test_profiles=5, amp_range_rpm=(250.0, 2500.0), seed=ALIAS_SEED
    )


def ensure_benchmark(root: Path, ckpt_path: Path) -> dict:
    report_path = root / "bench" / "report.json"
    if report_path.exists():
        _log("benchmark report: cached")
        return json.loads(report_path.read_text())
    _log("benchmark: tuning EKFs and evaluating 5 configurations")
    result = run_full_benchmark(ckpt_path, benchmark_settings(), out_dir=root / "bench")
    return result


def ensure_aliasing(root: Path, ckpt4000_path: Path) -> dict:
    report_path = root / "alias" / "report_aliasing.json"
    if report_path.exists():
        _log("aliasing report: cached")
        return json.loads(report_path.read_text())
    _log("aliasing experiment: tuning-set EKF covariances reused from benchmark configs")
    settings = benchmark_settings()
    covs_by_config = {}
    for idx, (name, params) in enumerate(make_test_instances(settings)):
        covs_path = root / "bench" / f"covs_{name}.json"
        if covs_path.exists():
            covs_by_config[name] = EkfCovariances.load(covs_path)
            continue
        tune_ds = simulate_profile_set(params, settings, group=2 * idx,
                                       count=settings.n_tune_profiles)
        covs = tune_covariances(
            tune_ds.trajectories, EkfModel.from_motor_params(params),
            replace(settings.search, warmup=settings.warmup),
        )
        covs_path.parent.mkdir(parents=True, exist_ok=True)
        covs.save(covs_path)
        covs_by_config[name] = covs
    result = run_aliasing_experiment(
        ckpt4000_path, covs_by_config, aliasing_settings(), out_dir=root / "alias"
    )
    return result


def build_all(root: Path) -> dict:
    root.mkdir(parents=True, exist_ok=True)
    ds400 = ensure_dataset(root, "train_400", 400.0, DATASET_SEED_400)
    ckpt400 = ensure_checkpoint(root, "filter_400.json", ds400, 400.0)
    del ds400
    ds4000 = ensure_dataset(root, "train_4000", 4000.0, DATASET_SEED_4000)
    ckpt4000 = ensure_checkpoint(root, "filter_4000.json", ds4000, 4000.0)
    del ds4000
    bench = ensure_benchmark(root, ckpt400)
    alias = ensure_aliasing(root, ckpt4000)
    _log("all artifacts ready")
    return {"ckpt400": ckpt400, "ckpt4000": ckpt4000,
            "bench": bench, "alias": alias, "root": root}


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--root", type=Path, default=DEFAULT_ROOT)
    args = parser.parse_args()
    build_all(args.root)
    sys.exit(0)
