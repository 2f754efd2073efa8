import json

import numpy as np
import pytest

import bldcspeed.dataset as dataset_mod
from bldcspeed.core import rpm_to_rads
from bldcspeed.dataset import (
    DatasetSchemaError,
    MetaDataset,
    PERTURBED_FIELDS,
    PerturbationSpec,
    generate_metadataset,
    load_metadataset,
    nominal_params,
    sample_params,
    save_metadataset,
)
from bldcspeed.motorsim import SimConfig, SimulationDiverged


def test_nominal_values():
    p = nominal_params()
    assert p.r_s == 0.355
    assert p.l_s == 1.4e-3
    assert p.lambda_m == 1.76e-2
    assert p.j_m == 4.4e-6
    assert p.j_d == 8.73e-4
    assert p.b_m == 8.3e-9
    assert p.k_p == 0.1
    assert p.k_i == 0.1
    assert p.pole_pairs == 7


def test_sample_params_degenerate_intervals_return_nominal():
    spec = PerturbationSpec(multiplier_range={f: (1.0, 1.0) for f in PERTURBED_FIELDS})
    p = sample_params(spec, seed=3)
    assert p == nominal_params()


def test_sample_params_ranges_over_many_draws():
    spec = PerturbationSpec()
    nom = spec.nominal
    draws = {f: [] for f in PERTURBED_FIELDS}
    for seed in range(10_000):
        p = sample_params(spec, seed)
        for f in PERTURBED_FIELDS:
            draws[f].append(getattr(p, f))
        assert p.pole_pairs == 7
    r_s = np.array(draws["r_s"])
    # exact interval is [0.5, 1.5] x nominal; the published rounded endpoints
    # (0.1776, 0.5327) sit within 0.1% of these
    assert r_s.min() >= 0.5 * nom.r_s and r_s.max() <= 1.5 * nom.r_s
    assert r_s.min() == pytest.approx(0.1776, rel=1e-3)
    assert r_s.max() == pytest.approx(0.5327, rel=1e-3)
    j_d = np.array(draws["j_d"])
    assert j_d.min() >= 8.73e-5 and j_d.max() <= 8.73e-3
    assert j_d.min() < 8.73e-5 * 1.05 and j_d.max() > 8.73e-3 * 0.95
    k_i = np.array(draws["k_i"])
    assert k_i.min() >= 0.05 and k_i.max() <= 0.15


def test_sample_params_independence():
    spec = PerturbationSpec()
    mat = np.array([
        [getattr(sample_params(spec, seed), f) for f in PERTURBED_FIELDS]
        for seed in range(10_000)
    ])
    corr = np.corrcoef(mat, rowvar=False)
    off_diag = corr[~np.eye(len(PERTURBED_FIELDS), dtype=bool)]
    assert np.abs(off_diag).max() < 0.05


def small_cfg() -> SimConfig:
    return SimConfig(duration=5.0, noise_xi_std=0.01)


def test_generate_metadataset_single():
    ds = generate_metadataset(1, PerturbationSpec(), small_cfg(),
                              speed_max=rpm_to_rads(400.0), base_seed=0)
    assert len(ds) == 1
    assert len(ds.trajectories[0]) == 500
    assert ds.trajectories[0].ts == 0.01
    assert ds.manifest[0]["params"] == ds.trajectories[0].params.to_dict()


def test_generate_metadataset_deterministic():
    args = dict(spec=PerturbationSpec(), sim_cfg=small_cfg(),
                speed_max=rpm_to_rads(400.0), base_seed=77)
    a = generate_metadataset(3, **args)
    b = generate_metadataset(3, **args)
    assert a.manifest == b.manifest
    for ta, tb in zip(a.trajectories, b.trajectories):
        assert ta.samples == tb.samples


def test_generate_metadataset_resimulates_divergent_runs(monkeypatch):
    real = dataset_mod.simulate_closed_loop
    calls = {"n": 0}

    def flaky(params, profile, cfg):
        calls["n"] += 1
        if calls["n"] == 1:
            raise SimulationDiverged(0.1, "synthetic divergence")
        return real(params, profile, cfg)

    monkeypatch.setattr(dataset_mod, "simulate_closed_loop", flaky)
    ds = generate_metadataset(2, PerturbationSpec(), small_cfg(),
                              speed_max=rpm_to_rads(200.0), base_seed=5)
    assert len(ds) == 2
    assert ds.manifest[0]["attempts"] == 2  # reseeded retry logged
    assert ds.manifest[1]["attempts"] == 1


def test_save_load_round_trip(tmp_path):
    ds = generate_metadataset(2, PerturbationSpec(), small_cfg(),
                              speed_max=rpm_to_rads(300.0), base_seed=9)
    save_metadataset(ds, tmp_path / "ds")
    loaded = load_metadataset(tmp_path / "ds")
    assert len(loaded) == len(ds)
    assert loaded.manifest == ds.manifest
    for ta, tb in zip(ds.trajectories, loaded.trajectories):
        assert ta.samples == tb.samples
        assert ta.params == tb.params


def test_load_missing_column_names_it(tmp_path):
    ds = generate_metadataset(1, PerturbationSpec(), small_cfg(),
                              speed_max=rpm_to_rads(300.0), base_seed=1)
    save_metadataset(ds, tmp_path / "ds")
    csv_path = tmp_path / "ds" / "traj_00000.csv"
    lines = csv_path.read_text().splitlines()
    header = lines[0].split(",")
    drop = header.index("omega")
    rows = [",".join(c for i, c in enumerate(line.split(",")) if i != drop)
            for line in lines]
    csv_path.write_text("\n".join(rows) + "\n")
    with pytest.raises(DatasetSchemaError, match="omega"):
        load_metadataset(tmp_path / "ds")


def test_load_rejects_count_mismatch(tmp_path):
    ds = generate_metadataset(2, PerturbationSpec(), small_cfg(),
                              speed_max=rpm_to_rads(300.0), base_seed=2)
    save_metadataset(ds, tmp_path / "ds")
    manifest_path = tmp_path / "ds" / "manifest.json"
    blob = json.loads(manifest_path.read_text())
    blob["count"] = 5
    manifest_path.write_text(json.dumps(blob))
    with pytest.raises(DatasetSchemaError):
        load_metadataset(tmp_path / "ds")


def test_manifest_count_always_matches():
    with pytest.raises(ValueError):
        MetaDataset(trajectories=[], manifest=[{"x": 1}])


def test_dataset_uniform_length_and_ts():
    ds = generate_metadataset(4, PerturbationSpec(), small_cfg(),
                              speed_max=rpm_to_rads(400.0), base_seed=12)
    lengths = {len(t) for t in ds.trajectories}
    ts = {t.ts for t in ds.trajectories}
    assert lengths == {500}
    assert ts == {0.01}
