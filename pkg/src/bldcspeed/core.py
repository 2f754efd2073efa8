"""Units, reference-frame transforms and the Nyquist speed bound.

Internal canonical speed unit is rad/s (mechanical); rpm appears only at
I/O boundaries. Electrical angle theta_e is always kept wrapped to [0, 2pi).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi
SQRT3 = math.sqrt(3.0)


def rpm_to_rads(x: float) -> float:
    return x * TWO_PI / 60.0


def rads_to_rpm(x: float) -> float:
    return x * 60.0 / TWO_PI


def wrap_angle(theta: float) -> float:
    """Wrap an angle to [0, 2pi)."""
    theta = math.fmod(theta, TWO_PI)
    if theta < 0.0:
        theta += TWO_PI
    return theta


def clarke(i_a: float, i_b: float, i_c: float) -> tuple[float, float]:
    """Amplitude-invariant Clarke transform of a three-phase set."""
    return i_a, (i_a + 2.0 * i_b) / SQRT3


def park(i_alpha: float, i_beta: float, theta_e: float) -> tuple[float, float]:
    """Rotate stationary-frame quantities into the rotor-aligned d-q frame."""
    c, s = math.cos(theta_e), math.sin(theta_e)
    return c * i_alpha + s * i_beta, -s * i_alpha + c * i_beta


def inverse_park(x_d: float, x_q: float, theta_e: float) -> tuple[float, float]:
    """Standard inverse rotation, d-q back to the alpha-beta plane."""
    c, s = math.cos(theta_e), math.sin(theta_e)
    return c * x_d - s * x_q, s * x_d + c * x_q


def current_output_map(
    i_d: float, i_q: float, theta_e: float, standard_park: bool = False
) -> tuple[float, float]:
    """Map d-q currents to the logged alpha-beta pair.

    Default convention carries -cos(theta_e)*i_q in i_beta (the sign the
    estimator measurement model uses); standard_park=True switches both the
    simulator logging and the estimator to the conventional +cos sign.
    """
    if standard_park:
        return inverse_park(i_d, i_q, theta_e)
    c, s = math.cos(theta_e), math.sin(theta_e)
    return c * i_d - s * i_q, s * i_d - c * i_q


def omega_max(pole_pairs: int, ts: float) -> float:
    """Maximum mechanical speed (rad/s) resolvable without aliasing at period ts."""
    if ts <= 0.0:
        raise ValueError(f"ts must be positive, got {ts}")
    if pole_pairs < 1:
        raise ValueError(f"pole_pairs must be >= 1, got {pole_pairs}")
    return math.pi / (pole_pairs * ts)


@dataclass(frozen=True)
class MotorParams:
    """One motor instance: electrical, mechanical and speed-loop parameters."""

    r_s: float        # stator resistance [Ohm]
    l_s: float        # stator inductance [H]
    lambda_m: float   # max flux linkage [Wb]
    j_m: float        # rotor inertia [kg m^2]
    j_d: float        # load-disk inertia [kg m^2]
    b_m: float        # viscous damping [N m s/rad]
    k_p: float        # speed-PI proportional gain
    k_i: float        # speed-PI integral gain
    pole_pairs: int

    def __post_init__(self):
        for name in ("r_s", "l_s", "lambda_m", "j_m", "j_d", "b_m", "k_p", "k_i"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"MotorParams.{name} must be strictly positive")
        if self.pole_pairs < 1:
            raise ValueError("MotorParams.pole_pairs must be >= 1")

    @property
    def j_tot(self) -> float:
        return self.j_m + self.j_d

    def to_dict(self) -> dict:
        return {
            "r_s": self.r_s, "l_s": self.l_s, "lambda_m": self.lambda_m,
            "j_m": self.j_m, "j_d": self.j_d, "b_m": self.b_m,
            "k_p": self.k_p, "k_i": self.k_i, "pole_pairs": self.pole_pairs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MotorParams":
        return cls(**d)


@dataclass
class StateVector:
    """Stationary-frame motor state; theta_e stays wrapped to [0, 2pi)."""

    i_alpha: float = 0.0
    i_beta: float = 0.0
    omega: float = 0.0
    theta_e: float = 0.0

    def __post_init__(self):
        self.theta_e = wrap_angle(self.theta_e)


@dataclass(frozen=True)
class Sample:
    t: float        # [s]
    v_alpha: float  # [V]
    v_beta: float   # [V]
    i_alpha: float  # [A]
    i_beta: float   # [A]
    omega: float    # true mechanical speed [rad/s]
    r: float        # reference speed [rad/s]


@dataclass
class Trajectory:
    """A fixed-rate log of one closed-loop run; the unit of the meta-dataset."""

    ts: float
    samples: list[Sample]
    params: MotorParams | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.ts <= 0.0:
            raise ValueError("Trajectory.ts must be positive")
        if len(self.samples) < 1:
            raise ValueError("Trajectory needs at least one sample")
        for k in range(1, len(self.samples)):
            dt = self.samples[k].t - self.samples[k - 1].t
            if not math.isclose(dt, self.ts, rel_tol=1e-9, abs_tol=1e-12):
                raise ValueError(
                    f"samples {k - 1}->{k} separated by {dt}, expected ts={self.ts}"
                )

    def __len__(self) -> int:
        return len(self.samples)

    def channels(self) -> np.ndarray:
        """Return the (v_alpha, v_beta, i_alpha, i_beta) columns as [N, 4]."""
        return np.array(
            [[s.v_alpha, s.v_beta, s.i_alpha, s.i_beta] for s in self.samples]
        )

    def omega_true(self) -> np.ndarray:
        return np.array([s.omega for s in self.samples])

    def reference(self) -> np.ndarray:
        return np.array([s.r for s in self.samples])
