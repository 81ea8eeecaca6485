"""Detector and controller synthesis.

Observer gains come from fixed-point iteration of the filter Riccati
recursion started at zero.  The coprime factors follow the observer-based
realizations (``F`` state feedback, ``L`` observer gain):

    Mhat = (A-LC, -L, C, I)          Xhat = (A+BF,  L,      C+DF, I)
    Nhat = (A-LC, B-LD, C, D)        Yhat = (A+BF, -L,      F,    0)
    M    = (A+BF, B, F, I)           X    = (A-LC, -(B-LD), F,    I)
    N    = (A+BF, B, C+DF, D)        Y    = (A-LC, -L,      F,    0)

so that ``[[X, Y], [-Nhat, Mhat]] @ [[M, -Yhat], [N, Xhat]] = I``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .lti import (DimensionError, NoiseSpec, StateSpaceModel, add, evaluate, hstack, inverse,
                  markov_parameters, negate, series, spectral_radius, static_gain,
                  symmetric_sqrt, toeplitz, vstack)

RICCATI_TOL = 1e-10
RICCATI_MAX_ITER = 100_000


class ConvergenceError(RuntimeError):
    """Fixed-point iteration hit its cap; ``last`` carries the final iterate."""

    def __init__(self, msg, last=None):
        super().__init__(msg)
        self.last = last


class NotStabilizingError(ValueError):
    pass


def riccati_fixed_point(A, C, Qn, Rn, S=None, tol=RICCATI_TOL, max_iter=RICCATI_MAX_ITER):
    """Iterate the one-step predictor Riccati recursion from ``P = 0``.

    With innovation covariance ``Sr = C P C' + Rn`` and gain
    ``L = (A P C' + S) Sr^{-1}`` the update is ``P <- A P A' + Qn - L Sr L'``.
    ``S`` is the process/measurement noise cross-covariance (zero by default).

    Returns ``(L, P, Sr, iterations)``.
    """
    A = np.asarray(A, float)
    C = np.asarray(C, float)
    n, p = A.shape[0], C.shape[0]
    Qn = np.asarray(Qn, float)
    Rn = np.asarray(Rn, float)
    S = np.zeros((n, p)) if S is None else np.asarray(S, float)
    P = np.zeros((n, n))
    for it in range(1, max_iter + 1):
        Sr = C @ P @ C.T + Rn
        if np.linalg.eigvalsh((Sr + Sr.T) / 2).min() <= 1e-14:
            raise np.linalg.LinAlgError("innovation covariance is singular")
        L = np.linalg.solve(Sr.T, (A @ P @ C.T + S).T).T
        P_next = A @ P @ A.T + Qn - L @ Sr @ L.T
        P_next = (P_next + P_next.T) / 2
        delta = np.linalg.norm(P_next - P)
        P = P_next
        if delta <= tol:
            Sr = C @ P @ C.T + Rn
            L = np.linalg.solve(Sr.T, (A @ P @ C.T + S).T).T
            return L, P, (Sr + Sr.T) / 2, it
    raise ConvergenceError(f"Riccati iteration did not converge in {max_iter} steps", last=P)


@dataclass(frozen=True, eq=False)
class KalmanSolution:
    L: np.ndarray
    P: np.ndarray
    Sigma_r: np.ndarray
    iterations: int = 0


def effective_noise(plant: StateSpaceModel, noise: NoiseSpec):
    """Noise seen by the controller-side filter when control noise enters the plant.

    Control-signal noise is added after the controller computes ``u``, so it
    acts on the plant through ``B`` (and ``D``) like extra process noise.
    Returns ``(Qn, Rn, S)``.
    """
    Su = noise.Sigma_eta_u
    Qn = noise.Sigma_omega + plant.B @ Su @ plant.B.T
    Rn = noise.Sigma_eta + plant.D @ Su @ plant.D.T
    S = plant.B @ Su @ plant.D.T
    return Qn, Rn, S


def solve_kalman(plant: StateSpaceModel, noise: NoiseSpec,
                 include_control_noise: bool = False) -> KalmanSolution:
    if include_control_noise:
        Qn, Rn, S = effective_noise(plant, noise)
    else:
        Qn, Rn, S = noise.Sigma_omega, noise.Sigma_eta, None
    if np.linalg.eigvalsh(Rn).min() <= 0:
        raise ValueError("measurement noise covariance must be positive definite")
    L, P, Sr, it = riccati_fixed_point(plant.A, plant.C, Qn, Rn, S)
    return KalmanSolution(L, P, Sr, it)


# ------------------------------------------------------------ unified solution

@dataclass(frozen=True, eq=False)
class UnifiedSolution:
    L_opt: np.ndarray
    V_opt: np.ndarray
    X_ric: np.ndarray
    E_f: np.ndarray
    F_f: np.ndarray
    E_d: np.ndarray
    F_d: np.ndarray
    plant: StateSpaceModel

    def _filtered(self, E, Fm):
        A, C = self.plant.A, self.plant.C
        L = self.L_opt
        return StateSpaceModel(A - L @ C, E - L @ Fm, self.V_opt @ C, self.V_opt @ Fm)

    @property
    def Nf(self) -> StateSpaceModel:
        """Fault-to-residual transfer ``V Nhat_f``."""
        return self._filtered(self.E_f, self.F_f)

    @property
    def Nd(self) -> StateSpaceModel:
        """Unknown-input-to-residual transfer ``V Nhat_d``."""
        return self._filtered(self.E_d, self.F_d)

    def residual_generator(self) -> StateSpaceModel:
        """Map ``[u; y] -> r`` of the post-filtered observer."""
        A, B, C, D = self.plant.A, self.plant.B, self.plant.C, self.plant.D
        L, V = self.L_opt, self.V_opt
        p = C.shape[0]
        return StateSpaceModel(A - L @ C, np.hstack([B - L @ D, L]),
                               -V @ C, V @ np.hstack([-D, np.eye(p)]))


def unified_solution(plant: StateSpaceModel, E_f, F_f, E_d, F_d) -> UnifiedSolution:
    """Jointly optimal observer gain and post-filter for the fault/disturbance model

        x+ = A x + B u + E_f f + E_d d,   y = C x + D u + F_f f + F_d d.

    ``E_d`` and ``F_d`` share the disturbance dimension; correlated columns
    produce the cross-covariance term ``E_d F_d'``.
    """
    E_f, F_f, E_d, F_d = (np.atleast_2d(np.asarray(M, float)) for M in (E_f, F_f, E_d, F_d))
    n, p = plant.n, plant.p
    if E_d.shape[0] != n or F_d.shape[0] != p or E_d.shape[1] != F_d.shape[1]:
        raise DimensionError(f"E_d must be {n}xd and F_d {p}xd with a shared d; "
                             f"got {E_d.shape} and {F_d.shape}")
    if E_f.shape[0] != n or F_f.shape[0] != p or E_f.shape[1] != F_f.shape[1]:
        raise DimensionError("E_f/F_f dimensions inconsistent with the plant")
    Rn = F_d @ F_d.T
    L, X, Sr, _ = riccati_fixed_point(plant.A, plant.C, E_d @ E_d.T, Rn, E_d @ F_d.T)
    w, U = np.linalg.eigh(Sr)
    if w.min() < 1e-12:
        raise np.linalg.LinAlgError("C X C' + F_d F_d' is singular; no post-filter exists")
    V = (U / np.sqrt(w)) @ U.T
    L_opt = (plant.A @ X @ plant.C.T + E_d @ F_d.T) @ V @ V
    return UnifiedSolution(L_opt, V, X, E_f, F_f, E_d, F_d, plant)


# ------------------------------------------------------------ controller data

@dataclass(frozen=True, eq=False)
class ControllerParams:
    """Observer-based controller ``u = F xhat + Q r + vbar(k)``.

    ``vbar`` is either ``None`` (zero feedforward) or an array of shape
    (period, m) repeated cyclically.
    """

    F: np.ndarray
    L: np.ndarray
    Q: np.ndarray | None = None
    vbar: np.ndarray | None = None

    def __post_init__(self):
        F = np.atleast_2d(np.asarray(self.F, float))
        L = np.asarray(self.L, float)
        L = L.reshape(F.shape[1], -1)
        Q = np.zeros((F.shape[0], L.shape[1])) if self.Q is None else np.asarray(self.Q, float)
        Q = Q.reshape(F.shape[0], L.shape[1])
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "Q", Q)
        if self.vbar is not None:
            v = np.asarray(self.vbar, float).reshape(-1, F.shape[0])
            object.__setattr__(self, "vbar", v)

    def vbar_at(self, k: int) -> np.ndarray:
        if self.vbar is None:
            return np.zeros(self.F.shape[0])
        return self.vbar[k % len(self.vbar)]

    def check_stabilizing(self, plant: StateSpaceModel):
        rho_f = spectral_radius(plant.A + plant.B @ self.F)
        rho_l = spectral_radius(plant.A - self.L @ plant.C)
        if rho_f >= 1 or rho_l >= 1:
            raise NotStabilizingError(
                f"rho(A+BF)={rho_f:.4f}, rho(A-LC)={rho_l:.4f}; both must be < 1")


def lqr_gain(plant: StateSpaceModel, Qw, Rw) -> np.ndarray:
    """Infinite-horizon LQR gain in the ``u = F x`` sign convention."""
    Qw = np.asarray(Qw, float)
    Rw = np.asarray(Rw, float)
    P = sla.solve_discrete_are(plant.A, plant.B, Qw, Rw)
    K = np.linalg.solve(Rw + plant.B.T @ P @ plant.B, plant.B.T @ P @ plant.A)
    return -K


def controller_realization(plant: StateSpaceModel, params: ControllerParams) -> StateSpaceModel:
    """Controller as a system from ``[y; vbar]`` to ``u``.

    With ``S = (I + Q D)^{-1}``:
        Abar = A - LC + (B - LD) S (F - QC),   Bbar = [L + (B-LD) S Q, (B-LD) S],
        Cbar = S (F - QC),                     Dbar = [S Q, S].
    For ``D = 0`` this is ``Abar = A + B(F - QC) - LC``, ``Bbar = [L + BQ, B]``,
    ``Cbar = F - QC``, ``Dbar = [Q, I]``.
    """
    A, B, C, D = plant.A, plant.B, plant.C, plant.D
    F, L, Q = params.F, params.L, params.Q
    m = plant.m
    S = np.linalg.inv(np.eye(m) + Q @ D)
    BL = B - L @ D
    Cbar = S @ (F - Q @ C)
    Abar = A - L @ C + BL @ Cbar
    Bbar = np.hstack([L + BL @ S @ Q, BL @ S])
    Dbar = np.hstack([S @ Q, S])
    return StateSpaceModel(Abar, Bbar, Cbar, Dbar)


def observer_controller(plant: StateSpaceModel, params: ControllerParams) -> StateSpaceModel:
    """Feedback part ``K: y -> u`` of the observer-based controller."""
    Kbar = controller_realization(plant, params)
    p = plant.p
    return StateSpaceModel(Kbar.A, Kbar.B[:, :p], Kbar.C, Kbar.D[:, :p])


# ------------------------------------------------------------- plant factors

@dataclass(frozen=True, eq=False)
class CoprimeFactors:
    Mhat: StateSpaceModel
    Nhat: StateSpaceModel
    M: StateSpaceModel
    N: StateSpaceModel
    Xhat: StateSpaceModel
    Yhat: StateSpaceModel
    X: StateSpaceModel
    Y: StateSpaceModel
    plant: StateSpaceModel
    F: np.ndarray
    L: np.ndarray

    NAMES = ("Mhat", "Nhat", "M", "N", "Xhat", "Yhat", "X", "Y")

    def replace(self, **models) -> "CoprimeFactors":
        return dataclasses.replace(self, **models)


def plant_coprime(plant: StateSpaceModel, params: ControllerParams) -> CoprimeFactors:
    params.check_stabilizing(plant)
    A, B, C, D = plant.A, plant.B, plant.C, plant.D
    F, L = params.F, params.L
    m, p = plant.m, plant.p
    AL, BL = A - L @ C, B - L @ D
    AF, CF = A + B @ F, C + D @ F
    return CoprimeFactors(
        Mhat=StateSpaceModel(AL, -L, C, np.eye(p)),
        Nhat=StateSpaceModel(AL, BL, C, D),
        M=StateSpaceModel(AF, B, F, np.eye(m)),
        N=StateSpaceModel(AF, B, CF, D),
        Xhat=StateSpaceModel(AF, L, CF, np.eye(p)),
        Yhat=StateSpaceModel(AF, -L, F, np.zeros((m, p))),
        X=StateSpaceModel(AL, -BL, F, np.eye(m)),
        Y=StateSpaceModel(AL, -L, F, np.zeros((m, p))),
        plant=plant, F=F, L=L,
    )


def bezout_product(factors: CoprimeFactors) -> StateSpaceModel:
    f = factors
    left = vstack(hstack(f.X, f.Y), hstack(negate(f.Nhat), f.Mhat))
    right = vstack(hstack(f.M, negate(f.Yhat)), hstack(f.N, f.Xhat))
    return series(right, left)


def verify_bezout(factors: CoprimeFactors, horizon: int | None = None) -> float:
    """Largest entry of the impulse response of ``(product - I)`` over ``horizon`` steps."""
    n = factors.plant.n
    horizon = 4 * n if horizon is None else horizon
    if horizon < n:
        raise ValueError(f"horizon must be at least n={n}")
    P = bezout_product(factors)
    h = markov_parameters(P, horizon)
    h[0] -= np.eye(P.m)
    return float(np.max(np.abs(h)))


def youla_controller(factors: CoprimeFactors, Qparam=None,
                     with_reference: bool = False) -> StateSpaceModel:
    """Realization of ``K = -(X - Q Nhat)^{-1} (Y + Q Mhat)``.

    ``Qparam`` is a stable :class:`StateSpaceModel` (m x p) or a static gain.
    With observer-based residual feedback ``u = F xhat + Q_r r``, the matching
    Youla parameter is ``-Q_r``.  ``with_reference`` adds the reference input:
    the result maps ``[y; v]`` to ``u = (X - Q Nhat)^{-1} (-(Y + Q Mhat) y + v)``,
    which is how ``v`` enters the observer-based loop.
    """
    m, p = factors.plant.m, factors.plant.p
    if Qparam is None:
        Qparam = static_gain(np.zeros((m, p)))
    elif not isinstance(Qparam, StateSpaceModel):
        Qparam = static_gain(np.asarray(Qparam, float).reshape(m, p))
    if not Qparam.stable:
        raise NotStabilizingError("Youla parameter must be stable")
    den = add(factors.X, negate(series(factors.Nhat, Qparam)))
    num = add(factors.Y, series(factors.Mhat, Qparam))
    try:
        den_inv = inverse(den)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("X - Q Nhat has a singular feedthrough") from exc
    if with_reference:
        return series(hstack(negate(num), static_gain(np.eye(m))), den_inv)
    return negate(series(num, den_inv))


# -------------------------------------------------------- controller factors

@dataclass(frozen=True, eq=False)
class ControllerFactors:
    Mhat_y: StateSpaceModel
    Nhat_y: StateSpaceModel
    M_y: StateSpaceModel
    N_y: StateSpaceModel
    F_u: np.ndarray
    L_u: np.ndarray
    controller: StateSpaceModel


def controller_coprime(controller: StateSpaceModel, F_u, L_u) -> ControllerFactors:
    """Coprime factors of the controller viewed as a plant from ``[y; v]`` to ``u``.

    ``F_u=None`` picks zero when ``Abar`` is Schur and an identity-weighted LQR
    gain on ``(Abar, Bbar)`` otherwise; only ``L_u`` matters for detection.
    """
    Ab, Bb, Cb, Db = controller.A, controller.B, controller.C, controller.D
    if F_u is None:
        F_u = np.zeros((Bb.shape[1], Ab.shape[0]))
        if spectral_radius(Ab) >= 1:
            F_u = lqr_gain(StateSpaceModel(Ab, Bb, Cb, Db), np.eye(Ab.shape[0]),
                           np.eye(Bb.shape[1]))
    F_u = np.asarray(F_u, float).reshape(Bb.shape[1], Ab.shape[0])
    L_u = np.asarray(L_u, float).reshape(Ab.shape[0], Cb.shape[0])
    rho_l = spectral_radius(Ab - L_u @ Cb)
    rho_f = spectral_radius(Ab + Bb @ F_u)
    if rho_l >= 1 or rho_f >= 1:
        raise NotStabilizingError(
            f"rho(Abar-L_u Cbar)={rho_l:.4f}, rho(Abar+Bbar F_u)={rho_f:.4f}; both must be < 1")
    m = Cb.shape[0]
    AL = Ab - L_u @ Cb
    AF = Ab + Bb @ F_u
    return ControllerFactors(
        Mhat_y=StateSpaceModel(AL, -L_u, Cb, np.eye(m)),
        Nhat_y=StateSpaceModel(AL, Bb - L_u @ Db, Cb, Db),
        M_y=StateSpaceModel(AF, Bb, F_u, np.eye(Bb.shape[1])),
        N_y=StateSpaceModel(AF, Bb, Cb + Db @ F_u, Db),
        F_u=F_u, L_u=L_u, controller=controller,
    )


@dataclass(frozen=True, eq=False)
class TwinDesign:
    """Plant-side controller twin: gain, error covariance, residual covariance."""

    L_u: np.ndarray
    P_u: np.ndarray
    Sigma_ru: np.ndarray
    Sigma_omega_bar: np.ndarray
    Sigma_eta_bar: np.ndarray
    cross: np.ndarray
    controller: StateSpaceModel


def twin_noise(controller: StateSpaceModel, noise: NoiseSpec, p: int):
    """Noise driving the twin estimation error.

    The controller receives ``y0 + eta`` while the twin reads ``y0``, and the
    transmitted control carries ``eta_u``:
        omega_bar = Bbar1 eta,   eta_bar = Dbar1 eta + eta_u.
    Returns ``(Sigma_omega_bar, Sigma_eta_bar, cross_covariance)``.
    """
    B1 = controller.B[:, :p]
    D1 = controller.D[:, :p]
    Se, Su = noise.Sigma_eta, noise.Sigma_eta_u
    return B1 @ Se @ B1.T, D1 @ Se @ D1.T + Su, B1 @ Se @ D1.T


def stationary_error_covariance(controller: StateSpaceModel, L_u, noise: NoiseSpec, p: int,
                                tol=RICCATI_TOL, max_iter=RICCATI_MAX_ITER):
    """Stationary twin error and residual covariance for an arbitrary gain ``L_u``.

    Iterates the Joseph-form recursion including the cross term until the
    update falls below ``tol``.  Returns ``(P_u, Sigma_ru)``.
    """
    Ab, Cb = controller.A, controller.C
    Qb, Rb, Sb = twin_noise(controller, noise, p)
    L_u = np.asarray(L_u, float)
    Ae = Ab - L_u @ Cb
    if spectral_radius(Ae) >= 1:
        raise NotStabilizingError("twin error dynamics are not Schur")
    W = Qb + L_u @ Rb @ L_u.T - L_u @ Sb.T - Sb @ L_u.T
    P = np.zeros_like(Ab)
    for _ in range(max_iter):
        P_next = Ae @ P @ Ae.T + W
        if np.linalg.norm(P_next - P) <= tol:
            P = P_next
            break
        P = P_next
    else:
        raise ConvergenceError("twin covariance iteration did not converge", last=P)
    P = (P + P.T) / 2
    return P, Cb @ P @ Cb.T + Rb


def design_twin(plant: StateSpaceModel, params: ControllerParams, noise: NoiseSpec,
                mode: str = "kalman") -> TwinDesign:
    """Gain for the plant-side controller twin.

    ``kalman``: filter Riccati fixed point on ``(Abar, Cbar)`` with the twin
    noise (cross term included), giving white residuals.
    ``youla``: ``L_u = (B - LD) S`` so that the twin residual generator
    coincides with ``X u - (-Y) y`` from the plant factorization.
    """
    ctrl = controller_realization(plant, params)
    p = plant.p
    Qb, Rb, Sb = twin_noise(ctrl, noise, p)
    if mode == "kalman":
        L_u, P_u, Sr, _ = riccati_fixed_point(ctrl.A, ctrl.C, Qb, Rb, Sb)
    elif mode == "youla":
        L_u = ctrl.B[:, p:]
        P_u, Sr = stationary_error_covariance(ctrl, L_u, noise, p)
    else:
        raise ValueError(f"unknown twin gain mode {mode!r}")
    if np.linalg.eigvalsh(Sr).min() <= 0:
        raise np.linalg.LinAlgError("twin residual covariance is singular")
    return TwinDesign(L_u, P_u, Sr, Qb, Rb, Sb, ctrl)


# ------------------------------------------------------- finite horizon data

@dataclass(frozen=True, eq=False)
class FiniteHorizonMatrices:
    s: int
    X_sn: np.ndarray
    Y_sn: np.ndarray
    A_L: np.ndarray
    B_L: np.ndarray
    H_xF: np.ndarray
    H_uF: np.ndarray
    H_yF: np.ndarray
    H_xu: np.ndarray
    H_xy: np.ndarray

    @property
    def stacked(self) -> np.ndarray:
        """``[Y_sn, -X_sn]``: attack window ``[a_y; a_u]`` to twin residual."""
        return np.hstack([self.Y_sn, -self.X_sn])


def finite_horizon_XY(plant: StateSpaceModel, F, L, s: int) -> FiniteHorizonMatrices:
    """Finite-horizon matrices of ``X`` and ``Y`` over ``n`` past and ``s`` current samples."""
    if s < 1:
        raise ValueError("horizon s must be >= 1")
    F = np.atleast_2d(np.asarray(F, float))
    L = np.asarray(L, float).reshape(plant.n, plant.p)
    A, B, C, D = plant.A, plant.B, plant.C, plant.D
    n, m, p = plant.n, plant.m, plant.p
    A_L, B_L = A - L @ C, B - L @ D

    powers = [np.eye(n)]
    for _ in range(max(s, n)):
        powers.append(A_L @ powers[-1])

    H_xF = np.vstack([F @ powers[j] for j in range(s)])
    H_xu = np.hstack([powers[n - 1 - j] @ B_L for j in range(n)])
    H_xy = np.hstack([powers[n - 1 - j] @ L for j in range(n)])
    H_uF = np.eye(s * m)
    H_yF = np.zeros((s * m, s * p))
    for i in range(1, s):
        for j in range(i):
            Fa = F @ powers[i - j - 1]
            H_uF[i * m:(i + 1) * m, j * m:(j + 1) * m] = -Fa @ B_L
            H_yF[i * m:(i + 1) * m, j * p:(j + 1) * p] = -Fa @ L
    X_sn = np.hstack([-H_xF @ H_xu, H_uF])
    Y_sn = np.hstack([-H_xF @ H_xy, H_yF])
    return FiniteHorizonMatrices(s, X_sn, Y_sn, A_L, B_L, H_xF, H_uF, H_yF, H_xu, H_xy)


def stealth_operator(factors: CoprimeFactors, s: int) -> np.ndarray:
    """Stacked map ``[a_u; a_y] -> [Nhat a_u + Mhat a_y; -X a_u + Y a_y]`` over ``s`` samples.

    Zero initial state; samples are interleaved per time step so the
    operator is block lower triangular.
    """
    joint = vstack(hstack(factors.Nhat, factors.Mhat),
                   hstack(negate(factors.X), factors.Y))
    return toeplitz(joint, s)
