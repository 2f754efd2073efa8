"""Meta-dataset construction: sample motor instances from the perturbation
prior, simulate each one, persist/load the collection."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import MotorParams, Trajectory
from .motorsim import (
    SimConfig,
    SimulationDiverged,
    load_trajectory,
    make_training_profile,
    save_trajectory,
    simulate_closed_loop,
)

MANIFEST_VERSION = 1

# parameter order used for the multiplier vector; pole_pairs is never perturbed
PERTURBED_FIELDS = ("r_s", "l_s", "lambda_m", "j_m", "j_d", "b_m", "k_p", "k_i")


def nominal_params() -> MotorParams:
    """Nominal digital-twin parameters of the studied motor class."""
    return MotorParams(
        r_s=0.355,
        l_s=1.4e-3,
        lambda_m=1.76e-2,
        j_m=4.4e-6,
        j_d=8.73e-4,
        b_m=8.3e-9,
        k_p=0.1,
        k_i=0.1,
        pole_pairs=7,
    )


@dataclass(frozen=True)
class PerturbationSpec:
    """Uniform multiplicative perturbation intervals around a nominal instance.

    Every field uses [0.5, 1.5] except the disk inertia, which spans a decade
    each way ([0.1, 10]) to cover the whole family of load disks.
    """

    nominal: MotorParams = field(default_factory=nominal_params)
    multiplier_range: dict = field(default_factory=lambda: {
        "r_s": (0.5, 1.5), "l_s": (0.5, 1.5), "lambda_m": (0.5, 1.5),
        "j_m": (0.5, 1.5), "j_d": (0.1, 10.0), "b_m": (0.5, 1.5),
        "k_p": (0.5, 1.5), "k_i": (0.5, 1.5),
    })

    def __post_init__(self):
        for name in PERTURBED_FIELDS:
            lo, hi = self.multiplier_range[name]
            if not (0.0 < lo <= hi):
                raise ValueError(f"bad multiplier interval for {name}: [{lo}, {hi}]")


def sample_params(spec: PerturbationSpec, seed: int) -> MotorParams:
    """Draw one motor instance: nominal fields times independent uniforms."""
    rng = np.random.default_rng(seed)
    out = {}
    for name in PERTURBED_FIELDS:
        lo, hi = spec.multiplier_range[name]
        out[name] = getattr(spec.nominal, name) * float(rng.uniform(lo, hi))
    out["pole_pairs"] = spec.nominal.pole_pairs
    return MotorParams(**out)


@dataclass
class MetaDataset:
    trajectories: list[Trajectory]
    manifest: list[dict]

    def __post_init__(self):
        if len(self.trajectories) != len(self.manifest):
            raise ValueError("manifest count must equal trajectory count")

    def __len__(self) -> int:
        return len(self.trajectories)


def _child_seed(base_seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([base_seed, *tags]).generate_state(1)[0])


def generate_metadataset(
    b: int,
    spec: PerturbationSpec,
    sim_cfg: SimConfig,
    speed_max: float,
    base_seed: int,
    profile_factory=None,
    max_attempts: int = 10,
) -> MetaDataset:
    """Simulate b fresh instances, resimulating (with a new seed) any divergent run.

    profile_factory(seed) may override the default training staircase profile.
    """
    if b < 1:
        raise ValueError("b must be >= 1")
    if profile_factory is None:
        profile_factory = lambda seed: make_training_profile(seed, speed_max)
    trajectories = []
    manifest = []
    for n in range(b):
        for attempt in range(max_attempts):
            params_seed = _child_seed(base_seed, n, attempt, 0)
            profile_seed = _child_seed(base_seed, n, attempt, 1)
            sim_seed = _child_seed(base_seed, n, attempt, 2)
            params = sample_params(spec, params_seed)
            profile = profile_factory(profile_seed)
            cfg = replace(sim_cfg, seed=sim_seed)
            try:
                traj = simulate_closed_loop(params, profile, cfg)
            except SimulationDiverged:
                continue
            trajectories.append(traj)
            manifest.append({
                "index": n,
                "attempts": attempt + 1,
                "params_seed": params_seed,
                "profile_seed": profile_seed,
                "sim_seed": sim_seed,
                "params": params.to_dict(),
                "profile": profile.to_dict(),
            })
            break
        else:
            raise RuntimeError(
                f"trajectory {n}: all {max_attempts} simulation attempts diverged"
            )
    return MetaDataset(trajectories=trajectories, manifest=manifest)


def save_metadataset(ds: MetaDataset, path: str | Path):
    """Directory layout: manifest.json + traj_00000.csv (+ .json sidecars)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    records = []
    for i, (traj, rec) in enumerate(zip(ds.trajectories, ds.manifest)):
        name = f"traj_{i:05d}.csv"
        save_trajectory(traj, path / name)
        records.append({"file": name, **rec})
    manifest = {
        "format_version": MANIFEST_VERSION,
        "count": len(ds),
        "ts": ds.trajectories[0].ts if ds.trajectories else None,
        "trajectories": records,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


class DatasetSchemaError(ValueError):
    pass


def load_metadataset(path: str | Path) -> MetaDataset:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise DatasetSchemaError(
            f"unsupported manifest version {manifest.get('format_version')}"
        )
    records = manifest["trajectories"]
    if len(records) != manifest["count"]:
        raise DatasetSchemaError("manifest count does not match trajectory records")
    trajectories = []
    recs = []
    for rec in records:
        try:
            traj = load_trajectory(path / rec["file"])
        except ValueError as exc:
            raise DatasetSchemaError(str(exc)) from exc
        trajectories.append(traj)
        recs.append({k: v for k, v in rec.items() if k != "file"})
    return MetaDataset(trajectories=trajectories, manifest=recs)
