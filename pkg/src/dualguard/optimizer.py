"""Detection-oriented design of the state-feedback gain ``F``.

The attack-to-twin-residual channel over a finite window is
``[Y_sn, -X_sn]``; its smallest singular value (the H-minus index) is the
objective.  The window matrix is affine in ``F``:

    [Y_sn, -X_sn] = (I_s ⊗ F) G + E,   E = [0 0 0 -I],

with ``G`` depending only on ``(A - LC, B - LD, L)``.  Batched candidate
evaluation uses the row Gram ``W = S S'`` whose smallest eigenvalue is the
squared index.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .lti import StateSpaceModel, spectral_radius, static_gain, symmetric_sqrt
from .synthesis import (ControllerParams, effective_noise, finite_horizon_XY, solve_kalman,
                        unified_solution)

log = logging.getLogger(__name__)

PD_TOL = 1e-10


@dataclass(frozen=True)
class SearchConfig:
    F_min: float = -10.0
    F_max: float = 10.0
    dF: float = 0.5
    gamma_min: float = 0.0
    gamma_max: float = 10.0
    dgamma: float = 0.01
    s: int = 10
    mode: str = "grid"
    population: int = 40
    generations: int = 100
    mutation_scale: float = 0.5
    elitism: int = 1
    tournament: int = 3
    seed: int = 0
    max_grid_points: int = 3_000_000
    random_samples: int = 20_000
    chunk: int = 20_000

    def __post_init__(self):
        if not np.all(np.asarray(self.F_min) < np.asarray(self.F_max)):
            raise ValueError("F_min must be below F_max entrywise")
        if self.dF <= 0 or self.dgamma <= 0:
            raise ValueError("grid steps must be positive")
        if self.gamma_max < self.gamma_min:
            raise ValueError("gamma grid is empty")
        if self.mode not in ("grid", "stochastic"):
            raise ValueError(f"unknown search mode {self.mode!r}")

    def gamma_grid(self) -> np.ndarray:
        count = int(np.floor((self.gamma_max - self.gamma_min) / self.dgamma + 1e-9)) + 1
        return self.gamma_max - self.dgamma * np.arange(count)


@dataclass
class OptimizationResult:
    F_star: np.ndarray | None
    gamma_star: float
    evaluations: int
    mode: str
    feasible: bool
    history: list = field(default_factory=list)


def hminus_index(plant: StateSpaceModel, L, F, s: int = 10) -> float:
    """Smallest singular value of ``[Y_sn, -X_sn]``."""
    fh = finite_horizon_XY(plant, F, L, s)
    return float(np.linalg.svd(fh.stacked, compute_uv=False).min())


class IndexEvaluator:
    """Vectorized H-minus index and stability test for many gains at once."""

    def __init__(self, plant: StateSpaceModel, L, s: int):
        self.plant = plant
        self.s = s
        n, m = plant.n, plant.m
        L = np.asarray(L, float).reshape(n, plant.p)
        fh = finite_horizon_XY(plant, np.zeros((m, n)), L, s)
        A_L, B_L = fh.A_L, fh.B_L
        powers = [np.eye(n)]
        for _ in range(s):
            powers.append(A_L @ powers[-1])
        Phi = np.vstack(powers[:s])
        p = plant.p
        Psi_u = np.zeros((s * n, s * m))
        Psi_y = np.zeros((s * n, s * p))
        for i in range(1, s):
            for j in range(i):
                P = powers[i - j - 1]
                Psi_u[i * n:(i + 1) * n, j * m:(j + 1) * m] = -P @ B_L
                Psi_y[i * n:(i + 1) * n, j * p:(j + 1) * p] = -P @ L
        G = np.hstack([-Phi @ fh.H_xy, Psi_y, Phi @ fh.H_xu, -Psi_u])
        self.GG = G @ G.T
        self.Psi_u = Psi_u
        self.G = G

    def _lift(self, Fs):
        # (N, m, n) -> block-diagonal (N, s*m, s*n)
        N, m, n = Fs.shape
        out = np.zeros((N, self.s * m, self.s * n))
        for i in range(self.s):
            out[:, i * m:(i + 1) * m, i * n:(i + 1) * n] = Fs
        return out

    def gamma(self, Fs) -> np.ndarray:
        Fs = np.asarray(Fs, float)
        Fl = self._lift(Fs)
        FP = Fl @ self.Psi_u
        W = Fl @ self.GG @ Fl.transpose(0, 2, 1) + FP + FP.transpose(0, 2, 1)
        W += np.eye(W.shape[-1])
        lam = np.linalg.eigvalsh(W)[:, 0]
        return np.sqrt(np.clip(lam, 0.0, None))

    def gram_min_eig(self, Fs) -> np.ndarray:
        g = self.gamma(Fs)
        return g * g

    def stable(self, Fs) -> np.ndarray:
        Acl = self.plant.A[None] + self.plant.B[None] @ np.asarray(Fs, float)
        return np.max(np.abs(np.linalg.eigvals(Acl)), axis=-1) < 1.0


def _grid_axes(cfg: SearchConfig, m: int, n: int):
    lo = np.broadcast_to(np.asarray(cfg.F_min, float), (m, n)).ravel()
    hi = np.broadcast_to(np.asarray(cfg.F_max, float), (m, n)).ravel()
    return [np.arange(l, h + cfg.dF * 1e-9, cfg.dF) for l, h in zip(lo, hi)]


def grid_feasibility_search(plant: StateSpaceModel, L, config: SearchConfig,
                            candidates=None) -> OptimizationResult:
    """Grid feasibility search over ``F`` with a descending ``gamma`` sweep.

    Returns the pair found by scanning ``gamma`` from ``gamma_max`` downward
    and, for each level, the gains in grid order: the first stabilizing ``F``
    whose window Gram exceeds ``gamma^2 I`` wins.  Each candidate's index is
    computed once, so the scan costs one pass over the grid.  Grids with more
    than ``max_grid_points`` gains fall back to ``random_samples`` uniform
    draws.  ``candidates`` (shape (N, m, n)) overrides the grid.
    """
    m, n = plant.m, plant.n
    if candidates is not None:
        batches = [np.asarray(candidates, float).reshape(-1, m, n)]
    else:
        axes = _grid_axes(config, m, n)
        total = int(np.prod([len(a) for a in axes]))
        if total <= config.max_grid_points:
            batches = _grid_batches(axes, m, n, config.chunk)
        else:
            log.info("grid of %d gains too large; sampling %d at random", total,
                     config.random_samples)
            rng = np.random.default_rng(config.seed)
            lo = np.array([a[0] for a in axes])
            hi = np.array([a[-1] for a in axes])
            draws = rng.uniform(lo, hi, size=(config.random_samples, m * n))
            batches = [draws[i:i + config.chunk].reshape(-1, m, n)
                       for i in range(0, len(draws), config.chunk)]

    ev = IndexEvaluator(plant, L, config.s)
    levels = config.gamma_grid()
    best_level = len(levels)  # index into levels; smaller = larger gamma
    best_F = None
    evaluations = 0
    for Fs in batches:
        evaluations += len(Fs)
        ok = ev.stable(Fs)
        if not ok.any():
            continue
        idx = np.flatnonzero(ok)
        lam = ev.gram_min_eig(Fs[idx])
        # largest feasible level per candidate: lam - gamma^2 > tol
        feas = lam[:, None] - levels[None, :] ** 2 > PD_TOL
        has = feas.any(axis=1)
        if not has.any():
            continue
        first_level = np.where(has, feas.argmax(axis=1), len(levels))
        lvl = first_level.min()
        if lvl < best_level:
            best_level = lvl
            best_F = Fs[idx[np.flatnonzero(first_level == lvl)[0]]].copy()
    if best_F is None:
        return OptimizationResult(None, 0.0, evaluations, "grid", False)
    return OptimizationResult(best_F, float(levels[best_level]), evaluations, "grid", True)


def _grid_batches(axes, m, n, chunk):
    it = itertools.product(*axes)
    while True:
        block = list(itertools.islice(it, chunk))
        if not block:
            return
        yield np.array(block).reshape(-1, m, n)


def grid_feasibility_search_literal(plant: StateSpaceModel, L, config: SearchConfig,
                                    candidates=None) -> OptimizationResult:
    """Nested-loop form of the feasibility search (gamma outer, F inner).

    Exponentially slower than :func:`grid_feasibility_search`; kept as the
    reference the fast scan is tested against on small grids.
    """
    m, n = plant.m, plant.n
    if candidates is None:
        cands = [np.array(c).reshape(m, n) for c in itertools.product(*_grid_axes(config, m, n))]
    else:
        cands = list(np.asarray(candidates, float).reshape(-1, m, n))
    evaluations = 0
    for gamma in config.gamma_grid():
        for F in cands:
            evaluations += 1
            if spectral_radius(plant.A + plant.B @ F) < 1:
                S = finite_horizon_XY(plant, F, L, config.s).stacked
                W = S @ S.T - gamma ** 2 * np.eye(S.shape[0])
                if np.linalg.eigvalsh(W).min() > PD_TOL:
                    return OptimizationResult(F, float(gamma), evaluations, "grid", True)
    return OptimizationResult(None, 0.0, evaluations, "grid", False)


def stochastic_search(plant: StateSpaceModel, L, config: SearchConfig,
                      initial=None) -> OptimizationResult:
    """Genetic search maximizing the H-minus index over stabilizing gains.

    Tournament selection, arithmetic crossover, Gaussian mutation clipped to
    the bounds, ``elitism`` best candidates copied unchanged.  Unstable gains
    score ``-inf``.  Ties are broken by candidate ordinal, so the result
    depends only on the seed.
    """
    m, n = plant.m, plant.n
    rng = np.random.default_rng(config.seed)
    lo = np.broadcast_to(np.asarray(config.F_min, float), (m, n))
    hi = np.broadcast_to(np.asarray(config.F_max, float), (m, n))
    ev = IndexEvaluator(plant, L, config.s)

    def fitness(P):
        out = np.full(len(P), -np.inf)
        ok = ev.stable(P)
        if ok.any():
            out[ok] = ev.gamma(P[ok])
        return out

    pop = rng.uniform(lo, hi, size=(config.population, m, n))
    if initial is not None:
        init = np.asarray(initial, float).reshape(-1, m, n)[:config.population]
        pop[:len(init)] = init
    fit = fitness(pop)
    evaluations = len(pop)
    history = []
    best_i = int(np.argmax(fit))
    best_F, best_fit = pop[best_i].copy(), fit[best_i]
    history.append(float(best_fit))

    for _ in range(config.generations):
        order = np.lexsort((np.arange(len(pop)), -fit))
        elite = pop[order[:config.elitism]]
        children = []
        while len(children) < config.population - config.elitism:
            parents = []
            for _ in range(2):
                contenders = rng.choice(len(pop), size=config.tournament, replace=False)
                parents.append(pop[contenders[np.lexsort((contenders, -fit[contenders]))[0]]])
            w = rng.uniform()
            child = w * parents[0] + (1 - w) * parents[1]
            child = child + config.mutation_scale * rng.standard_normal((m, n))
            children.append(np.clip(child, lo, hi))
        pop = np.concatenate([elite, np.array(children)])
        fit = fitness(pop)
        evaluations += len(pop)
        gen_best = int(np.argmax(fit))
        if fit[gen_best] > best_fit:
            best_F, best_fit = pop[gen_best].copy(), fit[gen_best]
        history.append(float(best_fit))

    if not np.isfinite(best_fit):
        return OptimizationResult(None, 0.0, evaluations, "stochastic", False, history)
    return OptimizationResult(best_F, float(best_fit), evaluations, "stochastic", True, history)


def optimize_gain(plant: StateSpaceModel, L, config: SearchConfig, **kw) -> OptimizationResult:
    if config.mode == "grid":
        return grid_feasibility_search(plant, L, config, **kw)
    return stochastic_search(plant, L, config, **kw)


def equivalent_Q_compensation(plant: StateSpaceModel, params_old: ControllerParams,
                              F_new) -> StateSpaceModel:
    """Residual-feedback parameter that keeps the feedback law when ``F`` changes.

    In the loop the observer state obeys
    ``xhat+ = (A + B F_old) xhat + (B Q_old + L) r``, so replacing ``F_old`` by
    ``F_new`` is compensated by

        Q_new = Q_old + (F_old - F_new) (zI - A - B F_old)^{-1} (B Q_old + L),

    a stable system because ``F_old`` is stabilizing.  Returns a static gain
    when the gains coincide.
    """
    F_new = np.asarray(F_new, float).reshape(params_old.F.shape)
    dF = params_old.F - F_new
    if np.allclose(dF, 0.0, atol=0.0, rtol=0.0):
        return static_gain(params_old.Q)
    A_cl = plant.A + plant.B @ params_old.F
    if spectral_radius(A_cl) >= 1:
        raise ValueError("old gain is not stabilizing")
    return StateSpaceModel(A_cl, plant.B @ params_old.Q + params_old.L, dF, params_old.Q)


def uncorrelated_disturbance(plant: StateSpaceModel, noise, include_control_noise=True):
    """``(E_d, F_d)`` with independent state and output columns for the given noise."""
    if include_control_noise:
        Qn, Rn, _ = effective_noise(plant, noise)
    else:
        Qn, Rn = noise.Sigma_omega, noise.Sigma_eta
    E_d = np.hstack([symmetric_sqrt(Qn), np.zeros((plant.n, plant.p))])
    F_d = np.hstack([np.zeros((plant.p, plant.n)), symmetric_sqrt(Rn)])
    return E_d, F_d


def two_stage_design(plant: StateSpaceModel, noise, config: SearchConfig, E_f=None, F_f=None):
    """Optimize ``F`` for attack detectability, then fix the detector by the unified solution.

    Stage one keeps the Kalman gain; stage two recomputes the observer gain
    and residual post-filter from the noise model (plant faults by default).
    Returns ``(OptimizationResult, UnifiedSolution)``.
    """
    kalman = solve_kalman(plant, noise, include_control_noise=True)
    result = optimize_gain(plant, kalman.L, config)
    E_f = np.eye(plant.n) if E_f is None else E_f
    F_f = np.zeros((plant.p, np.shape(E_f)[1])) if F_f is None else F_f
    E_d, F_d = uncorrelated_disturbance(plant, noise)
    return result, unified_solution(plant, E_f, F_f, E_d, F_d)
