"""Closed-loop BLDC digital twin.

Electrical/mechanical dynamics in the rotor frame (states i_d, i_q, omega,
theta_e), an ideal average-value inverter saturated at v_dc/sqrt(3), and the
nested FOC loops: one speed PI producing the q-current reference plus two
current PIs producing (v_d, v_q). Integration is fixed-step RK4 at inner_dt;
samples are logged every ts.

The cross-coupling terms use the mechanical speed omega (not p*omega) and the
logged i_beta carries -cos(theta_e)*i_q; both match the estimator model so the
simulator and the model-based baseline share one physics.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    MotorParams,
    Sample,
    Trajectory,
    current_output_map,
    inverse_park,
    rpm_to_rads,
    wrap_angle,
)

# current-loop shaping at nominal parameters: kp = L_s*w_bw, ki = R_s*w_bw,
# w_bw = 2*pi*200 rad/s, held constant across perturbations
_W_BW = 2.0 * math.pi * 200.0
DEFAULT_CURRENT_PI = (1.4e-3 * _W_BW, 0.355 * _W_BW)

# speed-PI output limit: ~2x rated current (100 W / 48 V ~ 2.1 A)
IQ_LIMIT = 4.2


class SimulationDiverged(RuntimeError):
    def __init__(self, t: float, message: str):
        self.t = t
        super().__init__(message)


@dataclass
class SimConfig:
    ts: float = 0.01            # output sampling time [s]
    inner_dt: float = 1e-4      # integration/control step [s]
    v_dc: float = 48.0          # DC bus [V]
    duration: float = 5.0       # [s]
    noise_eta_std: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    noise_xi_std: float = 0.01  # logged-current noise [A]
    current_pi: tuple[float, float] = DEFAULT_CURRENT_PI
    seed: int = 0
    standard_park: bool = False

    def __post_init__(self):
        if self.v_dc <= 0.0 or self.duration <= 0.0:
            raise ValueError("v_dc and duration must be positive")
        self.decimation = round(self.ts / self.inner_dt)
        if abs(self.decimation * self.inner_dt - self.ts) > 1e-12 or self.decimation < 1:
            raise ValueError(
                f"inner_dt {self.inner_dt} must divide ts {self.ts} exactly"
            )

    def to_dict(self) -> dict:
        return {
            "ts": self.ts, "inner_dt": self.inner_dt, "v_dc": self.v_dc,
            "duration": self.duration, "noise_eta_std": list(self.noise_eta_std),
            "noise_xi_std": self.noise_xi_std, "current_pi": list(self.current_pi),
            "seed": self.seed, "standard_park": self.standard_park,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        d["noise_eta_std"] = tuple(d["noise_eta_std"])
        d["current_pi"] = tuple(d["current_pi"])
        return cls(**d)


@dataclass
class PiState:
    """PI controller with conditional-integration anti-windup."""

    kp: float
    ki: float
    limit: float       # symmetric output saturation
    integral: float = 0.0

    def step(self, error: float, dt: float, externally_saturated: bool = False) -> float:
        u = self.kp * error + self.integral
        saturated = abs(u) >= self.limit or externally_saturated
        if not saturated:
            self.integral += self.ki * error * dt
            u = self.kp * error + self.integral
        if u > self.limit:
            u = self.limit
        elif u < -self.limit:
            u = -self.limit
        return u


@dataclass(frozen=True)
class ReferenceProfile:
    """Piecewise-constant speed reference: level(t) holds from each breakpoint."""

    breakpoints: tuple[tuple[float, float], ...]  # (t_start [s], level [rad/s])
    duration: float

    def __post_init__(self):
        if not self.breakpoints or self.breakpoints[0][0] != 0.0:
            raise ValueError("first breakpoint must start at t = 0")
        starts = [bp[0] for bp in self.breakpoints]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("breakpoint times must be strictly increasing")

    def level(self, t: float) -> float:
        out = self.breakpoints[0][1]
        for t_start, lvl in self.breakpoints:
            if t >= t_start:
                out = lvl
            else:
                break
        return out

    def max_level(self) -> float:
        return max(abs(lvl) for _, lvl in self.breakpoints)

    def to_dict(self) -> dict:
        return {"breakpoints": [list(bp) for bp in self.breakpoints],
                "duration": self.duration}

    @classmethod
    def from_dict(cls, d: dict) -> "ReferenceProfile":
        return cls(tuple(tuple(bp) for bp in d["breakpoints"]), d["duration"])


def make_training_profile(seed: int, speed_max: float) -> ReferenceProfile:
    """0 / r1 / r2 / 0 staircase over 5 s with r1, r2 ~ U[0, speed_max]."""
    if speed_max < 0.0:
        raise ValueError("speed_max must be >= 0")
    rng = np.random.default_rng(seed)
    r1, r2 = rng.uniform(0.0, speed_max, size=2) if speed_max > 0 else (0.0, 0.0)
    return ReferenceProfile(
        breakpoints=((0.0, 0.0), (0.5, float(r1)), (2.5, float(r2)), (4.5, 0.0)),
        duration=5.0,
    )


def make_fixed_profile() -> ReferenceProfile:
    """The 100/200/300/150 rpm staircase used across test configurations."""
    return ReferenceProfile(
        breakpoints=(
            (0.0, rpm_to_rads(100.0)),
            (5.0, rpm_to_rads(200.0)),
            (10.0, rpm_to_rads(300.0)),
            (15.0, rpm_to_rads(150.0)),
        ),
        duration=20.0,
    )


def make_random_step_profile(
    seed: int,
    amp_range: tuple[float, float],
    dur_range: tuple[float, float],
    total: float,
) -> ReferenceProfile:
    """Random staircase covering [0, total]; the last step is truncated at total."""
    lo_a, hi_a = amp_range
    lo_d, hi_d = dur_range
    if hi_a < lo_a or hi_d < lo_d or lo_d <= 0.0 or total <= 0.0:
        raise ValueError("invalid amplitude/duration ranges")
    rng = np.random.default_rng(seed)
    breakpoints = []
    t = 0.0
    while t < total:
        amp = float(rng.uniform(lo_a, hi_a))
        dur = float(rng.uniform(lo_d, hi_d))
        breakpoints.append((t, amp))
        t += dur
    return ReferenceProfile(breakpoints=tuple(breakpoints), duration=total)


def _derivatives(i_d, i_q, omega, params: MotorParams, v_d, v_q):
    r_over_l = params.r_s / params.l_s
    did = -r_over_l * i_d + i_q * omega + v_d / params.l_s
    diq = -r_over_l * i_q + (params.lambda_m / params.l_s - i_d) * omega + v_q / params.l_s
    domega = (
        1.5 * params.pole_pairs * params.lambda_m / params.j_tot * i_q
        - params.b_m / params.j_tot * omega
    )
    return did, diq, domega


def step_motor(
    state: tuple[float, float, float, float],
    params: MotorParams,
    v_d: float,
    v_q: float,
    dt: float,
    noise: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0),
) -> tuple[float, float, float, float]:
    """One RK4 step of the rotor-frame dynamics (i_d, i_q, omega, theta_e).

    dt must stay at or below 1e-3 s; the electrical time constant makes larger
    explicit steps meaningless.
    """
    if dt > 1e-3:
        raise ValueError(f"dt={dt} too large for the electrical dynamics")
    i_d, i_q, omega, theta_e = state
    if not all(math.isfinite(x) for x in (i_d, i_q, omega, theta_e, v_d, v_q)):
        raise ValueError("non-finite state or input")
    p = params.pole_pairs

    k1d, k1q, k1w = _derivatives(i_d, i_q, omega, params, v_d, v_q)
    k1t = p * omega
    k2d, k2q, k2w = _derivatives(
        i_d + 0.5 * dt * k1d, i_q + 0.5 * dt * k1q, omega + 0.5 * dt * k1w,
        params, v_d, v_q,
    )
    k2t = p * (omega + 0.5 * dt * k1w)
    k3d, k3q, k3w = _derivatives(
        i_d + 0.5 * dt * k2d, i_q + 0.5 * dt * k2q, omega + 0.5 * dt * k2w,
        params, v_d, v_q,
    )
    k3t = p * (omega + 0.5 * dt * k2w)
    k4d, k4q, k4w = _derivatives(
        i_d + dt * k3d, i_q + dt * k3q, omega + dt * k3w, params, v_d, v_q
    )
    k4t = p * (omega + dt * k3w)

    sixth = dt / 6.0
    i_d += sixth * (k1d + 2.0 * k2d + 2.0 * k3d + k4d) + noise[0]
    i_q += sixth * (k1q + 2.0 * k2q + 2.0 * k3q + k4q) + noise[1]
    omega += sixth * (k1w + 2.0 * k2w + 2.0 * k3w + k4w) + noise[2]
    theta_e = wrap_angle(theta_e + sixth * (k1t + 2.0 * k2t + 2.0 * k3t + k4t) + noise[3])
    return i_d, i_q, omega, theta_e


def simulate_closed_loop(
    params: MotorParams, profile: ReferenceProfile, cfg: SimConfig
) -> Trajectory:
    """Run the nested FOC loop and log a Trajectory every cfg.ts."""
    if profile.duration > cfg.duration + 1e-12:
        raise ValueError("profile duration exceeds cfg.duration")
    rng = np.random.default_rng(cfg.seed)
    dt = cfg.inner_dt
    n_inner = round(cfg.duration / dt)
    v_max = cfg.v_dc / math.sqrt(3.0)
    kp_c, ki_c = cfg.current_pi

    speed_pi = PiState(kp=params.k_p, ki=params.k_i, limit=IQ_LIMIT)
    id_pi = PiState(kp=kp_c, ki=ki_c, limit=v_max)
    iq_pi = PiState(kp=kp_c, ki=ki_c, limit=v_max)

    eta = np.asarray(cfg.noise_eta_std)
    with_eta = bool((eta > 0.0).any())
    omega_limit = 100.0 * max(profile.max_level(), 1.0)

    i_d = i_q = omega = theta_e = 0.0
    vector_saturated = False
    samples: list[Sample] = []

    for j in range(n_inner + 1):
        t = j * dt
        r = profile.level(t) if t < profile.duration else profile.breakpoints[-1][1]

        iq_ref = speed_pi.step(r - omega, dt)
        v_d = id_pi.step(0.0 - i_d, dt, externally_saturated=vector_saturated)
        v_q = iq_pi.step(iq_ref - i_q, dt, externally_saturated=vector_saturated)
        v_norm = math.hypot(v_d, v_q)
        vector_saturated = v_norm > v_max
        if vector_saturated:
            scale = v_max / v_norm
            v_d *= scale
            v_q *= scale

        if j % cfg.decimation == 0:
            v_alpha, v_beta = inverse_park(v_d, v_q, theta_e)
            ia, ib = current_output_map(i_d, i_q, theta_e, cfg.standard_park)
            xi = rng.normal(0.0, cfg.noise_xi_std, size=2) if cfg.noise_xi_std > 0 else (0.0, 0.0)
            samples.append(Sample(
                t=round(j // cfg.decimation * cfg.ts, 12),
                v_alpha=v_alpha, v_beta=v_beta,
                i_alpha=ia + float(xi[0]), i_beta=ib + float(xi[1]),
                omega=omega, r=r,
            ))
            if len(samples) * cfg.ts >= cfg.duration:
                break

        noise = tuple(rng.normal(0.0, eta)) if with_eta else (0.0, 0.0, 0.0, 0.0)
        i_d, i_q, omega, theta_e = step_motor(
            (i_d, i_q, omega, theta_e), params, v_d, v_q, dt, noise
        )
        if not (math.isfinite(i_d) and math.isfinite(i_q) and math.isfinite(omega)):
            raise SimulationDiverged(t, f"non-finite state at t={t:.4f}s")
        if abs(omega) > omega_limit:
            raise SimulationDiverged(
                t, f"|omega|={abs(omega):.1f} rad/s exceeds {omega_limit:.1f} at t={t:.4f}s"
            )

    return Trajectory(ts=cfg.ts, samples=samples, params=params, seed=cfg.seed)


TRAJECTORY_COLUMNS = ["t", "v_alpha", "v_beta", "i_alpha", "i_beta", "omega", "r"]


def save_trajectory(traj: Trajectory, path: str | Path, sidecar: dict | None = None):
    """Write the CSV log plus a JSON sidecar with params/config/seed."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_COLUMNS)
        for s in traj.samples:
            writer.writerow([repr(x) for x in
                             (s.t, s.v_alpha, s.v_beta, s.i_alpha, s.i_beta, s.omega, s.r)])
    meta = {"ts": traj.ts, "seed": traj.seed}
    if traj.params is not None:
        meta["params"] = traj.params.to_dict()
    if sidecar:
        meta.update(sidecar)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_trajectory(path: str | Path) -> Trajectory:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise TrajectorySchemaError(f"{path}: empty file")
        missing = [c for c in TRAJECTORY_COLUMNS if c not in header]
        if missing:
            raise TrajectorySchemaError(f"{path}: missing column(s) {missing}")
        idx = [header.index(c) for c in TRAJECTORY_COLUMNS]
        samples = []
        for row_no, row in enumerate(reader, start=2):
            if len(row) < len(header):
                raise TrajectorySchemaError(f"{path}: truncated row at line {row_no}")
            vals = [float(row[i]) for i in idx]
            samples.append(Sample(*vals))
    if not samples:
        raise TrajectorySchemaError(f"{path}: no samples")
    params = None
    seed = None
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        if "params" in meta:
            params = MotorParams.from_dict(meta["params"])
        seed = meta.get("seed")
        ts = meta["ts"]
    else:
        ts = samples[1].t - samples[0].t if len(samples) > 1 else 0.01
    return Trajectory(ts=ts, samples=samples, params=params, seed=seed)


class TrajectorySchemaError(ValueError):
    pass
