"""Closed-loop engine: plant, controller, adversary and both detectors.

Per step ``k`` (all seeds of a batch advance together):

    measure  y0 = C x + f_y,  y = y0 + eta
    channel  y_a = adversary(y)
    control  u = F xhat + Q r + vbar + eta_u      (controller-side detector on y_a)
    channel  u_a = u + a_u
    twin     r_u from (u_a, y0)                    (plant-side detector)
    plant    x+ = A x + B (u_a + f_u) + w + f_p
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from ..adversary import AttackKind, FaultKind, ReplayBuffer, attack_streams
from ..detectors import (DecisionLabel, build_fault_detector, build_twin_detector,
                         fault_residual, persistence_filter, twin_residual)
from ..lti import NoiseStreams, StateSpaceModel, apply, spectral_radius
from ..optimizer import OptimizationResult, optimize_gain
from ..synthesis import (CoprimeFactors, ControllerParams, KalmanSolution, NotStabilizingError,
                         TwinDesign, design_twin, effective_noise, lqr_gain, plant_coprime,
                         solve_kalman, youla_controller)
from .config import ConfigError, ScenarioConfig

DIVERGENCE_BOUND = 1e12
LABELS = list(DecisionLabel)
# _CODE[flag_J, flag_Ju] -> index into LABELS, per the decision table
_CODE = np.array([[LABELS.index(DecisionLabel.NORMAL), LABELS.index(DecisionLabel.ATTACK_ONLY)],
                  [LABELS.index(DecisionLabel.FAULT_ONLY),
                   LABELS.index(DecisionLabel.FAULT_AND_ATTACK)]])


class DivergedRunError(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


@dataclass(frozen=True, eq=False)
class LoopDesign:
    params: ControllerParams
    kalman: KalmanSolution
    twin: TwinDesign
    factors: CoprimeFactors
    law: StateSpaceModel | None = None
    optimization: OptimizationResult | None = None

    @property
    def controller(self) -> StateSpaceModel:
        return self.twin.controller


def fixed_gain_covariance(plant: StateSpaceModel, noise, L) -> KalmanSolution:
    """Stationary error and residual covariance of an observer with a given gain."""
    Qn, Rn, S = effective_noise(plant, noise)
    A_L = plant.A - L @ plant.C
    if spectral_radius(A_L) >= 1:
        raise NotStabilizingError("A - LC is not Schur for the configured L")
    W = Qn + L @ Rn @ L.T - L @ S.T - S @ L.T
    P = sla.solve_discrete_lyapunov(A_L, W)
    return KalmanSolution(L, P, plant.C @ P @ plant.C.T + Rn, 0)


def design_loop(config: ScenarioConfig) -> LoopDesign:
    plant, noise, c = config.plant, config.noise, config.controller
    if c.L is None:
        kalman = solve_kalman(plant, noise, include_control_noise=True)
    else:
        kalman = fixed_gain_covariance(plant, noise, c.L)
    opt = None
    if c.source == "gains":
        F = c.F
    elif c.source == "lqr":
        F = lqr_gain(plant, c.state_weight, c.input_weight)
    else:
        search = dataclasses.replace(c.search, s=config.s)
        opt = optimize_gain(plant, kalman.L, search)
        if not opt.feasible:
            raise ConfigError("gain search found no stabilizing feasible F")
        F = opt.F_star
    params = ControllerParams(F, kalman.L, c.Q, c.vbar)
    params.check_stabilizing(plant)
    factors = plant_coprime(plant, params)
    twin = design_twin(plant, params, noise, c.twin_gain)
    law = None
    if c.form == "youla":
        law = youla_controller(factors, -params.Q, with_reference=True)
    return LoopDesign(params, kalman, twin, factors, law, opt)


@dataclass(eq=False)
class SimulationTrace:
    """Per-step records.  Arrays have a leading time axis, or (seed, time) for batches."""

    k: np.ndarray
    x: np.ndarray
    u: np.ndarray
    u_a: np.ndarray
    y: np.ndarray
    y_a: np.ndarray
    r: np.ndarray
    r_u: np.ndarray
    J: np.ndarray
    J_u: np.ndarray
    J_th: float
    J_th_u: float
    raw_J: np.ndarray
    raw_Ju: np.ndarray
    flag_J: np.ndarray
    flag_Ju: np.ndarray
    label_code: np.ndarray
    seeds: tuple = ()
    name: str = ""

    SIGNALS = ("x", "u", "u_a", "y", "y_a", "r", "r_u", "J", "J_u", "raw_J", "raw_Ju",
               "flag_J", "flag_Ju", "label_code")

    @property
    def batched(self) -> bool:
        return self.J.ndim == 2

    def __len__(self):
        return self.k.shape[0]

    @property
    def labels(self) -> np.ndarray:
        return np.array([l.value for l in LABELS], dtype=object)[self.label_code]

    def run(self, i: int) -> "SimulationTrace":
        if not self.batched:
            raise ValueError("not a batch trace")
        return dataclasses.replace(self, seeds=(self.seeds[i],),
                                   **{s: getattr(self, s)[i] for s in self.SIGNALS})

    def runs(self):
        return [self.run(i) for i in range(len(self.seeds))]

    def truncated(self, length: int) -> "SimulationTrace":
        if self.batched:
            cut = {s: getattr(self, s)[:, :length] for s in self.SIGNALS}
        else:
            cut = {s: getattr(self, s)[:length] for s in self.SIGNALS}
        return dataclasses.replace(self, k=self.k[:length], **cut)

    def modal_label(self, start: int = 0):
        """Most frequent decision label from ``start`` on (ties go to the earlier table entry)."""
        codes = self.label_code[..., start:]
        counts = np.stack([(codes == i).sum(axis=-1) for i in range(len(LABELS))], axis=-1)
        best = counts.argmax(axis=-1)
        if np.ndim(best) == 0:
            return LABELS[int(best)]
        return [LABELS[int(b)] for b in best]


def moving_average(signal, window: int = 20) -> np.ndarray:
    """Trailing moving average along the time axis (shorter windows at the start)."""
    signal = np.asarray(signal, float)
    c = np.cumsum(signal, axis=-1)
    out = c.copy()
    out[..., window:] = c[..., window:] - c[..., :-window]
    counts = np.minimum(np.arange(1, signal.shape[-1] + 1), window)
    return out / counts


def evaluation_start(config: ScenarioConfig) -> int:
    """First step used for post-onset statistics."""
    onset = config.onset
    if onset is None:
        return config.burn_in
    return onset + config.persistence


def _noise(config: ScenarioConfig, seeds, T):
    P = config.plant
    w = np.zeros((len(seeds), T, P.n))
    eta = np.zeros((len(seeds), T, P.p))
    eta_u = np.zeros((len(seeds), T, P.m))
    if config.simulate_noise:
        for i, seed in enumerate(seeds):
            streams = NoiseStreams(dataclasses.replace(config.noise, seed=int(seed)))
            w[i] = streams.draw("process", T)
            eta[i] = streams.draw("measurement", T)
            eta_u[i] = streams.draw("control", T)
    return w, eta, eta_u


def _faults(config: ScenarioConfig, T):
    P = config.plant
    f = {kind: np.zeros((T, dim)) for kind, dim in
         ((FaultKind.ACTUATOR, P.m), (FaultKind.SENSOR, P.p), (FaultKind.PLANT, P.n))}
    if config.fault is not None:
        f[config.fault.kind] = config.fault.stream(T)
    return f[FaultKind.ACTUATOR], f[FaultKind.SENSOR], f[FaultKind.PLANT]


def run_batch(config: ScenarioConfig, seeds=None, design: LoopDesign | None = None) -> SimulationTrace:
    """Simulate one scenario for several seeds at once; arrays are (seed, time, ...)."""
    seeds = (config.seed,) if seeds is None else tuple(int(s) for s in seeds)
    design = design_loop(config) if design is None else design
    P, T, S = config.plant, config.horizon, len(seeds)
    A, B, C = P.A, P.B, P.C
    params = design.params
    F, Q = params.F, params.Q

    w, eta, eta_u = _noise(config, seeds, T)
    f_u, f_y, f_p = _faults(config, T)
    atk = config.attack
    a_u, a_y, x_inj = attack_streams(atk, P, T, design.factors)
    replay = (ReplayBuffer(atk.onset, atk.record_window)
              if atk is not None and atk.kind is AttackKind.REPLAY else None)
    vbar = np.array([params.vbar_at(k) for k in range(T)])

    fd = build_fault_detector(P, design.kalman, config.alpha, batch=S)
    td = build_twin_detector(design.twin, config.alpha, batch=S)
    ctrl = design.controller
    law = design.law
    xk = None if law is None else np.zeros((S, law.n))

    rec = dict(
        x=np.zeros((S, T, P.n)), u=np.zeros((S, T, P.m)), u_a=np.zeros((S, T, P.m)),
        y=np.zeros((S, T, P.p)), y_a=np.zeros((S, T, P.p)), r=np.zeros((S, T, P.p)),
        r_u=np.zeros((S, T, P.m)), J=np.zeros((S, T)), J_u=np.zeros((S, T)),
    )
    x = np.zeros((S, P.n))
    diverged_at = None
    for k in range(T):
        if x_inj is not None and atk is not None and k == atk.onset:
            x = x + x_inj
        y0 = apply(C, x) + f_y[k]
        y = y0 + eta[:, k]
        y_a = replay(k, y) if replay is not None else y + a_y[k]

        if law is None:
            r0 = y_a - apply(C, fd.xhat)
            u_c = apply(F, fd.xhat) + apply(Q, r0) + vbar[k]
        else:
            ybar = np.concatenate([y_a, np.broadcast_to(vbar[k], (S, P.m))], axis=1)
            u_c = apply(law.C, xk) + apply(law.D, ybar)
            xk = apply(law.A, xk) + apply(law.B, ybar)
        r, J, fd = fault_residual(fd, P, params, y_a, u_c)
        u = u_c + eta_u[:, k]
        u_in = u + a_u[k]
        r_u, J_u, td = twin_residual(td, ctrl, u_in, y0, vbar[k])

        for key, val in (("x", x), ("u", u), ("u_a", u_in), ("y", y), ("y_a", y_a),
                         ("r", r), ("r_u", r_u), ("J", J), ("J_u", J_u)):
            rec[key][:, k] = val
        x = apply(A, x) + apply(B, u_in + f_u[k]) + w[:, k] + f_p[k]
        if not np.all(np.isfinite(x)) or np.max(np.linalg.norm(x, axis=1)) > DIVERGENCE_BOUND:
            diverged_at = k
            break

    trace = _finish(config, design, rec, seeds, fd.J_th, td.J_th_u)
    if diverged_at is not None:
        raise DivergedRunError(
            f"state norm exceeded {DIVERGENCE_BOUND:g} after step {diverged_at}",
            trace.truncated(diverged_at + 1))
    return trace


def _finish(config, design, rec, seeds, J_th, J_th_u) -> SimulationTrace:
    raw_J = rec["J"] > J_th
    raw_Ju = rec["J_u"] > J_th_u
    # persistence runs along time, which is axis 1 here
    flag_J = persistence_filter(raw_J.T, config.persistence).T
    flag_Ju = persistence_filter(raw_Ju.T, config.persistence).T
    code = _CODE[flag_J.astype(int), flag_Ju.astype(int)]
    return SimulationTrace(
        k=np.arange(config.horizon), J_th=J_th, J_th_u=J_th_u, raw_J=raw_J, raw_Ju=raw_Ju,
        flag_J=flag_J, flag_Ju=flag_Ju, label_code=code, seeds=seeds, name=config.name, **rec)


def run_scenario(config: ScenarioConfig, design: LoopDesign | None = None) -> SimulationTrace:
    """Single deterministic run with the configured seed."""
    try:
        return run_batch(config, design=design).run(0)
    except DivergedRunError as exc:
        raise DivergedRunError(str(exc), exc.trace.run(0)) from None
