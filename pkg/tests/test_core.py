import math

import numpy as np
import pytest

from bldcspeed.core import (
    MotorParams,
    Sample,
    StateVector,
    Trajectory,
    clarke,
    current_output_map,
    inverse_park,
    omega_max,
    park,
    rads_to_rpm,
    rpm_to_rads,
    wrap_angle,
)


@pytest.mark.parametrize("abc, expected", [
    ((0.0, 0.0, 0.0), (0.0, 0.0)),
    ((1.0, -0.5, -0.5), (1.0, 0.0)),
    # amplitude-invariant formula by hand: i_beta = (0 + 2*(sqrt(3)/2))/sqrt(3) = 1
    ((0.0, math.sqrt(3) / 2, -math.sqrt(3) / 2), (0.0, 1.0)),
])
def test_clarke(abc, expected):
    ia, ib = clarke(*abc)
    assert ia == pytest.approx(expected[0], abs=1e-12)
    assert ib == pytest.approx(expected[1], abs=1e-12)


@pytest.mark.parametrize("alpha_beta_theta, expected", [
    ((1.0, 0.0, 0.0), (1.0, 0.0)),
    ((1.0, 0.0, math.pi / 2), (0.0, -1.0)),
])
def test_park_known_rotations(alpha_beta_theta, expected):
    d, q = park(*alpha_beta_theta)
    assert d == pytest.approx(expected[0], abs=1e-12)
    assert q == pytest.approx(expected[1], abs=1e-12)


def test_park_round_trip():
    rng = np.random.default_rng(3)
    for _ in range(100):
        x, y = rng.normal(size=2) * 10
        theta = rng.uniform(0, 2 * math.pi)
        xd, xq = park(x, y, theta)
        xr, yr = inverse_park(xd, xq, theta)
        assert xr == pytest.approx(x, rel=1e-12, abs=1e-12)
        assert yr == pytest.approx(y, rel=1e-12, abs=1e-12)


def test_current_output_map_conventions():
    i_d, i_q, theta = 0.7, -1.3, 1.1
    a_std, b_std = current_output_map(i_d, i_q, theta, standard_park=True)
    assert (a_std, b_std) == inverse_park(i_d, i_q, theta)
    a, b = current_output_map(i_d, i_q, theta)
    assert a == a_std  # alpha channel shared
    assert b == pytest.approx(math.sin(theta) * i_d - math.cos(theta) * i_q)


def test_omega_max_values():
    # 7 pole pairs at 10 ms sampling: the ~430 rpm aliasing limit
    w = omega_max(7, 0.01)
    assert w == pytest.approx(44.880, abs=1e-3)
    assert rads_to_rpm(w) == pytest.approx(428.57, abs=0.01)
    assert omega_max(1, 1.0) == pytest.approx(math.pi, abs=1e-15)
    assert omega_max(7, 0.001) == pytest.approx(448.80, abs=1e-2)


def test_omega_max_rejects_bad_inputs():
    with pytest.raises(ValueError):
        omega_max(7, 0.0)
    with pytest.raises(ValueError):
        omega_max(7, -1.0)
    with pytest.raises(ValueError):
        omega_max(0, 0.01)


def test_omega_max_monotone():
    base = omega_max(2, 0.01)
    assert omega_max(3, 0.01) < base
    assert omega_max(2, 0.02) < base


def test_rpm_conversions():
    assert rpm_to_rads(0.0) == 0.0
    assert rpm_to_rads(60.0) == pytest.approx(2 * math.pi, rel=1e-15)
    assert rpm_to_rads(400.0) == pytest.approx(41.888, abs=1e-3)
    rng = np.random.default_rng(0)
    for x in rng.uniform(-5000, 5000, size=50):
        assert rads_to_rpm(rpm_to_rads(x)) == pytest.approx(x, rel=1e-15)


def test_wrap_angle_range():
    rng = np.random.default_rng(1)
    for theta in rng.uniform(-100, 100, size=200):
        w = wrap_angle(theta)
        assert 0.0 <= w < 2 * math.pi
        assert math.cos(w) == pytest.approx(math.cos(theta), abs=1e-9)


def test_state_vector_wraps_theta():
    s = StateVector(theta_e=7.0)
    assert 0.0 <= s.theta_e < 2 * math.pi


def test_motor_params_validation():
    good = dict(r_s=0.355, l_s=1.4e-3, lambda_m=1.76e-2, j_m=4.4e-6,
                j_d=8.73e-4, b_m=8.3e-9, k_p=0.1, k_i=0.1, pole_pairs=7)
    p = MotorParams(**good)
    assert p.j_tot == pytest.approx(p.j_m + p.j_d, rel=1e-15)
    with pytest.raises(ValueError):
        MotorParams(**{**good, "r_s": 0.0})
    with pytest.raises(ValueError):
        MotorParams(**{**good, "pole_pairs": 0})
    assert MotorParams.from_dict(p.to_dict()) == p


def test_trajectory_validates_spacing():
    mk = lambda t: Sample(t=t, v_alpha=0, v_beta=0, i_alpha=0, i_beta=0, omega=0, r=0)
    Trajectory(ts=0.01, samples=[mk(0.0), mk(0.01), mk(0.02)])
    with pytest.raises(ValueError):
        Trajectory(ts=0.01, samples=[mk(0.0), mk(0.02)])
    with pytest.raises(ValueError):
        Trajectory(ts=0.01, samples=[])
