"""Benchmark plants and gains.

Gains follow the ``u = F x`` convention.  The nominal LQR gains are
recomputed from the weights rather than copied, and agree with the
benchmark reference values up to sign and four-digit rounding.
"""

import numpy as np

from .lti import NoiseSpec, StateSpaceModel
from .synthesis import lqr_gain

SAMPLE_TIME = 0.1

# two-state UAV lateral model, rudder/aileron inputs, one sensor
UAV = StateSpaceModel(
    A=[[0.8825, 0.0987], [-0.8458, 0.9122]],
    B=[[-0.0194, -0.0036], [-1.9290, -0.3808]],
    C=[[1.0, 0.0]],
    D=np.zeros((1, 2)),
)
UAV_F_LQR_REFERENCE = np.array([[0.2550, -0.3856], [0.0513, -0.0760]])
UAV_F_GA = np.array([[9.9998, 0.4408], [9.9996, 3.7394]])
UAV_F_GAMMA = 1e-6 * np.array([[-0.1080, 0.1050], [0.2889, 0.0223]])

# series RLC circuit, both states measured
RLC = StateSpaceModel(
    A=[[1.0, -0.1], [0.1, 0.9]],
    B=[[0.1], [0.0]],
    C=[[1.0, 0.0], [0.0, 1.0]],
    D=np.zeros((2, 1)),
)
RLC_F_INIT_REFERENCE = np.array([[0.8533, -0.1980]])
RLC_F_GA = np.array([[-10.0, -10.0]])
RLC_F_GAMMA = np.array([[-0.5511, -10.0]])


def uav_noise(seed: int = 0) -> NoiseSpec:
    return NoiseSpec(0.001 * np.eye(2), 0.01 * np.eye(1), 0.01 * np.eye(2), seed)


def rlc_noise(seed: int = 0) -> NoiseSpec:
    return NoiseSpec(0.001 * np.eye(2), 0.01 * np.eye(2), 0.01 * np.eye(1), seed)


def uav_lqr_gain() -> np.ndarray:
    return lqr_gain(UAV, np.eye(2), np.eye(2))


def rlc_lqr_gain() -> np.ndarray:
    return lqr_gain(RLC, np.eye(2), np.eye(1))


SYSTEMS = {
    "uav": dict(plant=UAV, noise=uav_noise, gains={
        "lqr": uav_lqr_gain, "ga": lambda: UAV_F_GA, "gamma": lambda: UAV_F_GAMMA}),
    "rlc": dict(plant=RLC, noise=rlc_noise, gains={
        "lqr": rlc_lqr_gain, "ga": lambda: RLC_F_GA, "gamma": lambda: RLC_F_GAMMA}),
}
