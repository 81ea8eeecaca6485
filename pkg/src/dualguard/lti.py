"""Discrete-time LTI substrate: state-space models, seeded noise, simulation.

Every model in the package (plant, controller, coprime factors, Youla
parameters) is a :class:`StateSpaceModel`.  The block-diagram helpers at the
bottom of this module (``series``, ``hstack``, ``inverse`` ...) return new
realizations without any minimality reduction.

Gaussian noise
--------------
Each noise channel (process, measurement, control) owns an independent
Philox stream spawned from the user seed, so injecting an attack never
shifts the noise seen by another channel.  Standard normals are produced by
the inverse-CDF transform ``ndtri((k + 0.5) / 2**53)`` applied to the
53-bit uniforms of the stream, then coloured with the symmetric square root
of the covariance.  Drawing ``N`` vectors at once gives the same numbers as
``N`` single draws.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

__all__ = [
    "DimensionError",
    "NoiseSpec",
    "NoiseStreams",
    "NoiseChannel",
    "SimState",
    "StateSpaceModel",
    "draw_gaussian",
    "evaluate",
    "hstack",
    "inverse",
    "markov_parameters",
    "negate",
    "add",
    "series",
    "simulate",
    "spectral_radius",
    "static_gain",
    "step",
    "symmetric_sqrt",
    "toeplitz",
    "vstack",
    "zero_direction",
]


class DimensionError(ValueError):
    """Raised when matrix or vector shapes are mutually inconsistent."""


def _as_matrix(M, name: str) -> np.ndarray:
    arr = np.array(M, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be a 2-D matrix, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class StateSpaceModel:
    """Discrete LTI quadruple ``x+ = A x + B u``, ``y = C x + D u``.

    A model with ``n == 0`` is a static gain ``D``.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        n = A.shape[0]
        B = np.array(self.B, dtype=float)
        C = np.array(self.C, dtype=float)
        D = _as_matrix(self.D, "D")
        p, m = D.shape
        # allow empty-state models built from bare lists
        if B.size == 0:
            B = np.zeros((n, m))
        if C.size == 0:
            C = np.zeros((p, n))
        B = _as_matrix(B, "B")
        C = _as_matrix(C, "C")
        if A.shape != (n, n):
            raise DimensionError(f"A must be square, got {A.shape}")
        if B.shape != (n, m):
            raise DimensionError(f"B must be {n}x{m}, got {B.shape}")
        if C.shape != (p, n):
            raise DimensionError(f"C must be {p}x{n}, got {C.shape}")
        for name, val in (("A", A), ("B", B), ("C", C), ("D", D)):
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    @property
    def stable(self) -> bool:
        return self.n == 0 or spectral_radius(self.A) < 1.0

    def __repr__(self):
        return f"StateSpaceModel(n={self.n}, m={self.m}, p={self.p})"


def static_gain(K) -> StateSpaceModel:
    K = _as_matrix(K, "K")
    return StateSpaceModel(np.zeros((0, 0)), np.zeros((0, K.shape[1])),
                           np.zeros((K.shape[0], 0)), K)


def apply(M, v) -> np.ndarray:
    """``M v`` for a vector or a stack of row vectors ``(..., k)``.

    Summation order does not depend on the stack size, so one row of a
    batch reproduces the unbatched product bit-for-bit.
    """
    return np.einsum("ij,...j->...i", M, v)


def spectral_radius(M) -> float:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"spectral radius needs a square matrix, got shape {M.shape}")
    if M.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(M))))


@dataclass
class SimState:
    x: np.ndarray
    k: int = 0


def step(model: StateSpaceModel, state: SimState, u, w, eta):
    """Advance one sample; returns ``(next_state, y)``."""
    u = np.asarray(u, dtype=float).reshape(-1)
    w = np.asarray(w, dtype=float).reshape(-1)
    eta = np.asarray(eta, dtype=float).reshape(-1)
    x = np.asarray(state.x, dtype=float).reshape(-1)
    if x.size != model.n or u.size != model.m or w.size != model.n or eta.size != model.p:
        raise DimensionError(
            f"step expects x:{model.n} u:{model.m} w:{model.n} eta:{model.p}, "
            f"got x:{x.size} u:{u.size} w:{w.size} eta:{eta.size}")
    y = model.C @ x + model.D @ u + eta
    x_next = model.A @ x + model.B @ u + w
    return SimState(x_next, state.k + 1), y


def simulate(model: StateSpaceModel, u, x0=None) -> np.ndarray:
    """Zero-noise response to an input sequence ``u`` of shape (T, m)."""
    u = np.asarray(u, dtype=float).reshape(len(u), model.m)
    x = np.zeros(model.n) if x0 is None else np.asarray(x0, dtype=float)
    y = np.empty((u.shape[0], model.p))
    for k, uk in enumerate(u):
        y[k] = model.C @ x + model.D @ uk
        x = model.A @ x + model.B @ uk
    return y


# --------------------------------------------------------------------- noise

class NoiseChannel(enum.IntEnum):
    PROCESS = 0
    MEASUREMENT = 1
    CONTROL = 2


_PSD_TOL = 1e-12


def _check_psd(S: np.ndarray, name: str):
    if not np.allclose(S, S.T, atol=_PSD_TOL, rtol=0.0):
        raise ValueError(f"{name} is not symmetric")
    if S.size and np.linalg.eigvalsh(S).min() < -_PSD_TOL:
        raise ValueError(f"{name} is not positive semidefinite")


def symmetric_sqrt(S) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition (tiny negatives clipped)."""
    S = np.asarray(S, dtype=float)
    if S.size == 0:
        return S.copy()
    w, V = np.linalg.eigh((S + S.T) / 2)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    Sigma_omega: np.ndarray
    Sigma_eta: np.ndarray
    Sigma_eta_u: np.ndarray
    seed: int = 0

    def __post_init__(self):
        for name in ("Sigma_omega", "Sigma_eta", "Sigma_eta_u"):
            S = _as_matrix(getattr(self, name), name)
            _check_psd(S, name)
            object.__setattr__(self, name, S)
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "seed", int(self.seed))

    def covariance(self, which) -> np.ndarray:
        which = NoiseChannel[which.upper()] if isinstance(which, str) else NoiseChannel(which)
        return (self.Sigma_omega, self.Sigma_eta, self.Sigma_eta_u)[which]


class NoiseStreams:
    """Per-channel seeded Gaussian sources for one :class:`NoiseSpec`."""

    def __init__(self, spec: NoiseSpec):
        self.spec = spec
        self._gens = [np.random.Generator(np.random.Philox(
            np.random.SeedSequence(spec.seed, spawn_key=(int(ch),)))) for ch in NoiseChannel]
        self._roots = [symmetric_sqrt(spec.covariance(ch)) for ch in NoiseChannel]

    def draw(self, which, size: int | None = None) -> np.ndarray:
        ch = NoiseChannel[which.upper()] if isinstance(which, str) else NoiseChannel(which)
        root = self._roots[ch]
        dim = root.shape[0]
        count = 1 if size is None else int(size)
        u = self._gens[ch].random((count, dim)) + 2.0**-54
        z = ndtri(u) @ root.T
        return z[0] if size is None else z


def draw_gaussian(streams: NoiseStreams, which, size: int | None = None) -> np.ndarray:
    return streams.draw(which, size)


# ------------------------------------------------------- frequency / algebra

def evaluate(model: StateSpaceModel, z) -> np.ndarray:
    """Transfer matrix ``D + C (zI - A)^{-1} B`` at complex ``z``."""
    if model.n == 0:
        return model.D.astype(complex)
    lhs = z * np.eye(model.n) - model.A
    sv = np.linalg.svd(lhs, compute_uv=False)
    if sv.min() < 1e-12 * max(1.0, sv.max()):
        poles = np.linalg.eigvals(model.A)
        nearest = poles[np.argmin(np.abs(poles - z))]
        raise ValueError(f"z={z} coincides with the pole {nearest} of the realization")
    X = np.linalg.solve(lhs, model.B.astype(complex))
    resid = np.linalg.norm(lhs @ X - model.B) / max(1.0, np.linalg.norm(model.B))
    if resid > 1e-10:
        raise np.linalg.LinAlgError(f"resolvent solve residual {resid:.2e} at z={z}")
    return model.D + model.C @ X


def markov_parameters(model: StateSpaceModel, count: int) -> np.ndarray:
    """``[D, CB, CAB, ...]`` stacked into shape (count, p, m)."""
    out = np.zeros((count, model.p, model.m))
    if count == 0:
        return out
    out[0] = model.D
    AkB = model.B.copy()
    for k in range(1, count):
        out[k] = model.C @ AkB
        AkB = model.A @ AkB
    return out


def toeplitz(model: StateSpaceModel, s: int) -> np.ndarray:
    """Zero-initial-state input/output map over ``s`` samples, (s*p) x (s*m)."""
    h = markov_parameters(model, s)
    p, m = model.p, model.m
    T = np.zeros((s * p, s * m))
    for i in range(s):
        for j in range(i + 1):
            T[i * p:(i + 1) * p, j * m:(j + 1) * m] = h[i - j]
    return T


def series(first: StateSpaceModel, second: StateSpaceModel) -> StateSpaceModel:
    """``second ∘ first``: the output of ``first`` drives ``second``."""
    if first.p != second.m:
        raise DimensionError(f"series: {first.p} outputs feed {second.m} inputs")
    n1, n2 = first.n, second.n
    A = np.block([[first.A, np.zeros((n1, n2))],
                  [second.B @ first.C, second.A]])
    B = np.vstack([first.B, second.B @ first.D])
    C = np.hstack([second.D @ first.C, second.C])
    D = second.D @ first.D
    return StateSpaceModel(A, B, C, D)


def _blkdiag(*mats):
    rows = sum(M.shape[0] for M in mats)
    cols = sum(M.shape[1] for M in mats)
    out = np.zeros((rows, cols))
    r = c = 0
    for M in mats:
        out[r:r + M.shape[0], c:c + M.shape[1]] = M
        r += M.shape[0]
        c += M.shape[1]
    return out


def hstack(*models: StateSpaceModel) -> StateSpaceModel:
    """``[G1 G2 ...]``: inputs concatenated, outputs summed."""
    p = models[0].p
    if any(g.p != p for g in models):
        raise DimensionError("hstack needs equal output dimensions")
    return StateSpaceModel(_blkdiag(*(g.A for g in models)), _blkdiag(*(g.B for g in models)),
                           np.hstack([g.C for g in models]), np.hstack([g.D for g in models]))


def vstack(*models: StateSpaceModel) -> StateSpaceModel:
    """``[G1; G2; ...]``: shared input, outputs concatenated."""
    m = models[0].m
    if any(g.m != m for g in models):
        raise DimensionError("vstack needs equal input dimensions")
    return StateSpaceModel(_blkdiag(*(g.A for g in models)), np.vstack([g.B for g in models]),
                           _blkdiag(*(g.C for g in models)), np.vstack([g.D for g in models]))


def add(*models: StateSpaceModel) -> StateSpaceModel:
    m = models[0].m
    if any(g.m != m for g in models):
        raise DimensionError("add needs equal input dimensions")
    stacked = vstack(*models)
    p = models[0].p
    S = np.hstack([np.eye(p)] * len(models))
    return StateSpaceModel(stacked.A, stacked.B, S @ stacked.C, S @ stacked.D)


def negate(model: StateSpaceModel) -> StateSpaceModel:
    return StateSpaceModel(model.A, model.B, -model.C, -model.D)


def inverse(model: StateSpaceModel) -> StateSpaceModel:
    """Realization of ``G^{-1}``; needs a square, invertible feedthrough."""
    if model.p != model.m:
        raise DimensionError("only square systems can be inverted")
    if np.linalg.cond(model.D) > 1e12:
        raise np.linalg.LinAlgError("feedthrough is singular; inverse is not proper")
    Di = np.linalg.inv(model.D)
    return StateSpaceModel(model.A - model.B @ Di @ model.C, model.B @ Di, -Di @ model.C, Di)


def zero_direction(model: StateSpaceModel, z0, tol: float = 1e-10):
    """Unit vector ``g`` with ``G(z0) g = 0``, or ``None`` if the kernel is trivial.

    For real ``z0`` the returned vector is real, with its largest-magnitude
    entry made positive.
    """
    G = evaluate(model, z0)
    real = np.isreal(z0)
    if real:
        G = G.real
    _, sv, Vh = np.linalg.svd(G)
    rank = int(np.sum(sv > tol * max(1.0, sv.max() if sv.size else 0.0)))
    if rank >= model.m:
        return None
    g = Vh[-1].conj()
    g = g / np.linalg.norm(g)
    if real:
        g = g.real * np.sign(g.real[np.argmax(np.abs(g.real))])
    else:
        g = g * np.exp(-1j * np.angle(g[np.argmax(np.abs(g))]))
    if np.linalg.norm(G @ g) > 1e-8:
        return None
    return g
