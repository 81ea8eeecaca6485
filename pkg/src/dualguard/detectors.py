"""Controller-side fault detector, plant-side twin detector, decision logic.

Both residual generators accept a leading batch axis: state vectors may be
``(n,)`` or ``(batch, n)`` and the signals follow suit.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from .lti import StateSpaceModel, apply
from .synthesis import ControllerParams, KalmanSolution, TwinDesign

DEFAULT_ALPHA = 0.01
DEFAULT_PERSISTENCE = 5


class ConfigurationError(ValueError):
    pass


class DecisionLabel(str, enum.Enum):
    NORMAL = "Normal"
    FAULT_ONLY = "FaultOnly"
    ATTACK_ONLY = "AttackOnly"
    FAULT_AND_ATTACK = "FaultAndAttack"


_TABLE = {
    (True, True): DecisionLabel.FAULT_AND_ATTACK,
    (False, True): DecisionLabel.ATTACK_ONLY,
    (True, False): DecisionLabel.FAULT_ONLY,
    (False, False): DecisionLabel.NORMAL,
}


def discriminate(J_flag: bool, Ju_flag: bool) -> DecisionLabel:
    return _TABLE[(bool(J_flag), bool(Ju_flag))]


def chi2_threshold(dof: int, alpha: float) -> float:
    """Upper ``alpha`` quantile of the chi-square distribution."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"false-alarm rate must lie in (0, 1), got {alpha}")
    if dof < 1:
        raise ValueError("degrees of freedom must be positive")
    return float(stats.chi2.isf(alpha, dof))


def persistence_filter(raw, K: int = DEFAULT_PERSISTENCE) -> np.ndarray:
    """True at ``k`` iff ``raw`` held for the ``K`` samples ending at ``k`` (axis 0)."""
    if K < 1:
        raise ValueError("persistence window must be >= 1")
    raw = np.asarray(raw, dtype=bool)
    run = np.zeros(raw.shape, dtype=np.int64)
    count = np.zeros(raw.shape[1:], dtype=np.int64)
    for k in range(raw.shape[0]):
        count = np.where(raw[k], count + 1, 0)
        run[k] = count
    return run >= K


def quadratic_form(r, Sigma_inv) -> np.ndarray:
    r = np.asarray(r)
    return np.einsum("...i,ij,...j->...", r, Sigma_inv, r)


def _check_cov(S, name):
    S = np.asarray(S, float)
    if np.linalg.eigvalsh((S + S.T) / 2).min() <= 0:
        raise ConfigurationError(f"{name} is singular; the chi-square detector is undefined")
    return np.linalg.inv(S)


@dataclass(frozen=True, eq=False)
class FaultDetectorState:
    """Observer state plus the chi-square configuration of the controller-side detector.

    ``R_filter`` is a static residual post-filter (identity when ``None``);
    ``Sigma_r`` always refers to the filtered residual.
    """

    xhat: np.ndarray
    Sigma_r: np.ndarray
    J_th: float
    R_filter: np.ndarray | None = None
    Sigma_r_inv: np.ndarray | None = None

    def __post_init__(self):
        if self.Sigma_r_inv is None:
            object.__setattr__(self, "Sigma_r_inv", _check_cov(self.Sigma_r, "Sigma_r"))


def build_fault_detector(plant: StateSpaceModel, kalman: KalmanSolution,
                         alpha: float = DEFAULT_ALPHA, batch: int | None = None,
                         R_filter=None) -> FaultDetectorState:
    shape = (plant.n,) if batch is None else (batch, plant.n)
    Sr = kalman.Sigma_r
    if R_filter is not None:
        R_filter = np.asarray(R_filter, float)
        Sr = R_filter @ Sr @ R_filter.T
    return FaultDetectorState(np.zeros(shape), Sr, chi2_threshold(plant.p, alpha), R_filter)


def fault_residual(state: FaultDetectorState, plant: StateSpaceModel, params: ControllerParams,
                   y_received, u_applied):
    """One step of the observer-based residual generator and chi-square statistic.

    ``r = y_received - (C xhat + D u)``; the observer then advances with the
    controller's own ``u``.  Returns ``(r, J, next_state)``.
    """
    xhat = state.xhat
    r0 = y_received - apply(plant.C, xhat) - apply(plant.D, u_applied)
    x_next = apply(plant.A, xhat) + apply(plant.B, u_applied) + apply(params.L, r0)
    r = r0 if state.R_filter is None else apply(state.R_filter, r0)
    J = quadratic_form(r, state.Sigma_r_inv)
    return r, J, replace(state, xhat=x_next)


@dataclass(frozen=True, eq=False)
class TwinDetectorState:
    """Plant-side controller twin and its chi-square configuration."""

    xhat_u: np.ndarray
    L_u: np.ndarray
    P_u: np.ndarray
    Sigma_ru: np.ndarray
    J_th_u: float
    R_u_filter: np.ndarray | None = None
    Sigma_ru_inv: np.ndarray | None = None

    def __post_init__(self):
        if self.Sigma_ru_inv is None:
            object.__setattr__(self, "Sigma_ru_inv", _check_cov(self.Sigma_ru, "Sigma_ru"))


def build_twin_detector(design: TwinDesign, alpha: float = DEFAULT_ALPHA,
                        batch: int | None = None, R_u_filter=None) -> TwinDetectorState:
    n_c = design.controller.n
    m = design.controller.p
    shape = (n_c,) if batch is None else (batch, n_c)
    Sr = design.Sigma_ru
    if R_u_filter is not None:
        R_u_filter = np.asarray(R_u_filter, float)
        Sr = R_u_filter @ Sr @ R_u_filter.T
    return TwinDetectorState(np.zeros(shape), design.L_u, design.P_u, Sr,
                             chi2_threshold(m, alpha), R_u_filter)


def twin_residual(state: TwinDetectorState, controller: StateSpaceModel, u_received,
                  y_local, v=None):
    """One step of the controller twin: predict ``u`` from the local output.

    ``controller`` maps ``[y; v]`` to ``u``.  Returns ``(r_u, J_u, next_state)``.
    """
    y_local = np.asarray(y_local, float)
    m = controller.p
    if v is None:
        v = np.zeros(y_local.shape[:-1] + (m,))
    ybar = np.concatenate([y_local, np.broadcast_to(v, y_local.shape[:-1] + (m,))], axis=-1)
    xu = state.xhat_u
    u_hat = apply(controller.C, xu) + apply(controller.D, ybar)
    r0 = u_received - u_hat
    x_next = apply(controller.A, xu) + apply(controller.B, ybar) + apply(state.L_u, r0)
    r = r0 if state.R_u_filter is None else apply(state.R_u_filter, r0)
    J = quadratic_form(r, state.Sigma_ru_inv)
    return r, J, replace(state, xhat_u=x_next)
