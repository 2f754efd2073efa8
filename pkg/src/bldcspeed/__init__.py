"""Sensorless BLDC speed estimation toolkit.

A perturbed digital-twin simulator generates a meta-dataset of closed-loop
runs; a small decoder-only transformer ("contextual filter") is trained to
estimate mechanical speed online from alpha-beta voltages and currents plus
its own previous estimate; a tuned extended Kalman filter provides the
model-based baseline, including the beyond-Nyquist regime.
"""

from .core import (
    MotorParams,
    Sample,
    StateVector,
    Trajectory,
    clarke,
    inverse_park,
    omega_max,
    park,
    rads_to_rpm,
    rpm_to_rads,
)
from .dataset import (
    MetaDataset,
    PerturbationSpec,
    generate_metadataset,
    load_metadataset,
    nominal_params,
    sample_params,
    save_metadataset,
)
from .filter import FilterConfig, TokenWindow, count_params, forward, run_filter
from .motorsim import (
    ReferenceProfile,
    SimConfig,
    make_fixed_profile,
    make_random_step_profile,
    make_training_profile,
    simulate_closed_loop,
    step_motor,
)

__version__ = "0.1.0"
