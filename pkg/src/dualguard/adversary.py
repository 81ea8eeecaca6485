"""Integrity attacks and additive faults injected into the closed loop.

Attack streams are precomputed arrays of shape (horizon, dim) that are zero
before onset, except replay, which needs the live measurement stream and is
handled by :class:`ReplayBuffer`.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .lti import StateSpaceModel, apply, zero_direction
from .synthesis import CoprimeFactors

log = logging.getLogger(__name__)


class AttackKind(str, enum.Enum):
    ZERO_DYNAMICS = "zero_dynamics"
    COVERT = "covert"
    REPLAY = "replay"
    CUSTOM_ADDITIVE = "custom"


class FaultKind(str, enum.Enum):
    ACTUATOR = "actuator"
    SENSOR = "sensor"
    PLANT = "plant"


class NoNullDirectionError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    """Attack description.

    ``a_u`` is the constant control-channel injection (one value per input);
    ``a_y`` is only used by ``CUSTOM_ADDITIVE``.  Zero-dynamics attacks use
    ``z0``/``g``/``scale``/``zda_mode`` instead.
    """

    kind: AttackKind
    onset: int
    a_u: tuple = ()
    a_y: tuple = ()
    record_window: int = 200
    z0: complex = 1.05
    g: tuple | None = None
    scale: float = 1.0
    zda_mode: str = "kernel"

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        if self.onset < 0:
            raise ValueError("attack onset must be >= 0")
        if self.kind is AttackKind.REPLAY and self.record_window < 1:
            raise ValueError("replay record_window must be >= 1")
        if self.g is not None:
            g = np.asarray(self.g, dtype=complex)
            if abs(np.linalg.norm(g) - 1) > 1e-9:
                raise ValueError("zero direction g must have unit norm")
        if self.zda_mode not in ("kernel", "direct", "state"):
            raise ValueError(f"unknown zero-dynamics mode {self.zda_mode!r}")


@dataclass(frozen=True)
class FaultSpec:
    kind: FaultKind
    onset: float
    bias: tuple

    def __post_init__(self):
        object.__setattr__(self, "kind", FaultKind(self.kind))
        object.__setattr__(self, "bias", tuple(float(b) for b in np.ravel(self.bias)))

    def check_dims(self, n: int, m: int, p: int):
        want = {FaultKind.ACTUATOR: m, FaultKind.SENSOR: p, FaultKind.PLANT: n}[self.kind]
        if len(self.bias) != want:
            raise ValueError(f"{self.kind.value} fault bias needs {want} entries, got {len(self.bias)}")

    def active(self, k: int) -> bool:
        return k >= self.onset

    def stream(self, horizon: int) -> np.ndarray:
        out = np.zeros((horizon, len(self.bias)))
        if math.isfinite(self.onset):
            out[max(int(math.ceil(self.onset)), 0):] = self.bias
        return out


def inject_fault(spec: FaultSpec | None, k: int, u=None, y=None, x_next=None):
    """Add the fault bias at step ``k`` to the matching channel.

    Returns ``(u, y, x_next)`` with the bias applied to the input entering the
    plant, the output leaving it, or the state update.
    """
    if spec is None or not spec.active(k):
        return u, y, x_next
    b = np.asarray(spec.bias)
    if spec.kind is FaultKind.ACTUATOR:
        u = np.asarray(u) + b
    elif spec.kind is FaultKind.SENSOR:
        y = np.asarray(y) + b
    else:
        x_next = np.asarray(x_next) + b
    return u, y, x_next


def constant_stream(value, onset: int, horizon: int) -> np.ndarray:
    value = np.ravel(np.asarray(value, float))
    out = np.zeros((horizon, value.size))
    out[onset:] = value
    return out


def covert_attack(plant: StateSpaceModel, a_u) -> tuple[np.ndarray, np.ndarray]:
    """Output compensation that hides ``a_u`` from the controller.

    A shadow copy of the plant driven by ``a_u`` alone gives
    ``a_y(k) = -(C x_s(k) + D a_u(k))`` so that ``a_y = -G_u a_u``.
    """
    a_u = np.asarray(a_u, float).reshape(-1, plant.m)
    a_y = np.zeros((a_u.shape[0], plant.p))
    xs = np.zeros(plant.n)
    for k, ak in enumerate(a_u):
        # same products as the simulation engine, so the cancellation is exact
        a_y[k] = -(apply(plant.C, xs) + apply(plant.D, ak))
        xs = apply(plant.A, xs) + apply(plant.B, ak)
    return a_u, a_y


class ReplayError(IndexError):
    pass


def replay_attack(recorded_y, k: int, k_a: int) -> np.ndarray:
    """``y_a(k) = recorded_y[k - k_a]``; raises past the end of the recording."""
    recorded_y = np.asarray(recorded_y)
    idx = k - k_a
    if idx < 0:
        raise ReplayError(f"replay not active before onset {k_a} (k={k})")
    if idx >= recorded_y.shape[0]:
        raise ReplayError(f"replay index {idx} exceeds the {recorded_y.shape[0]}-sample recording")
    return recorded_y[idx]


class ReplayBuffer:
    """Records the last ``window`` measurements before onset and replays them.

    Works on batched measurements of shape (batch, p).  After onset the
    recording is replayed cyclically; the first wrap logs a warning.
    """

    def __init__(self, onset: int, window: int = 200):
        self.onset = onset
        self.capacity = window
        self._frames: list[np.ndarray] = []
        self._warned = False

    def __call__(self, k: int, y: np.ndarray) -> np.ndarray:
        if k < self.onset:
            if k >= self.onset - self.capacity:
                self._frames.append(np.array(y, copy=True))
            return y
        if not self._frames:
            raise ReplayError("replay started with an empty recording")
        if len(self._frames) < self.capacity and k == self.onset:
            log.warning("replay recording holds %d samples (onset %d < window %d)",
                        len(self._frames), self.onset, self.capacity)
        idx = k - self.onset
        if idx >= len(self._frames) and not self._warned:
            log.warning("replay outlived its %d-sample recording; wrapping", len(self._frames))
            self._warned = True
        return self._frames[idx % len(self._frames)]

    @property
    def recording(self) -> np.ndarray:
        return np.stack(self._frames) if self._frames else np.empty((0,))


def fir_null_kernel(plant: StateSpaceModel, max_degree: int | None = None):
    """Shortest FIR input sequence that leaves the output zero forever.

    Finds taps ``g_0..g_d`` (shape (d+1, m)) such that, from rest, the input
    ``sum_j g_j s(k-j)`` produces ``y = 0`` for every scalar signal ``s``:
    the zero-state outputs over the taps vanish and the state returns to
    zero.  Returns ``None`` if no kernel up to ``max_degree`` exists.
    """
    n, m, p = plant.n, plant.m, plant.p
    A, B, C, D = plant.A, plant.B, plant.C, plant.D
    max_degree = n if max_degree is None else max_degree
    for d in range(max_degree + 1):
        L = d + 1
        rows = []
        # output at step i from taps j <= i
        for i in range(L):
            row = np.zeros((p, L * m))
            for j in range(i + 1):
                h = D if i == j else C @ np.linalg.matrix_power(A, i - j - 1) @ B
                row[:, j * m:(j + 1) * m] = h
            rows.append(row)
        reach = np.hstack([np.linalg.matrix_power(A, d - j) @ B for j in range(L)])
        rows.append(reach)
        K = np.vstack(rows)
        null = sla.null_space(K, rcond=1e-10)
        if null.shape[1]:
            return null[:, 0].reshape(L, m)
    return None


@dataclass
class ZeroDynamicsAttack:
    a_u: np.ndarray
    z0: complex
    g: np.ndarray
    state_injection: np.ndarray | None = None
    taps: np.ndarray | None = None


def zero_dynamics_attack(factors: CoprimeFactors, z0, g, scale: float, k_a: int,
                         horizon: int, mode: str = "kernel") -> ZeroDynamicsAttack:
    """Input-only attack along a transmission-zero direction of the plant.

    ``direct``  ``a_u(k) = scale * Re(g z0^(k-k_a))``; the residual shows a
                transient that decays with the observer dynamics.
    ``state``   as ``direct`` plus the matching plant state
                ``scale * Re((z0 I - A)^{-1} B g)`` injected at onset (exact).
    ``kernel``  shapes the exponential through an FIR output-nulling kernel of
                the plant so the output deviation is exactly zero from rest;
                at steady state the input still points along ``g``.  Falls
                back to ``direct`` when the plant has no FIR kernel.
    """
    plant = factors.plant
    if g is None:
        g = zero_direction(factors.Nhat, z0)
        if g is None:
            raise NoNullDirectionError(
                f"Nhat(z0={z0}) has full column rank; no zero-dynamics direction exists")
    g = np.asarray(g, dtype=complex)
    ks = np.arange(horizon) - k_a
    active = ks >= 0
    expo = np.zeros(horizon, dtype=complex)
    expo[active] = np.power(complex(z0), ks[active])
    a_u = np.zeros((horizon, plant.m))
    if scale == 0:
        return ZeroDynamicsAttack(a_u, z0, g)

    taps = fir_null_kernel(plant) if mode == "kernel" else None
    if mode == "kernel" and taps is None:
        log.warning("plant has no FIR output-nulling kernel; using the direct exponential")
        mode = "direct"

    if mode == "kernel":
        # frequency response of the taps at z0, aligned with g
        resp = sum(taps[j] * complex(z0) ** (-j) for j in range(len(taps)))
        c = np.vdot(resp, g) / np.vdot(resp, resp)
        sig = scale * c * expo
        shaped = np.zeros((horizon, plant.m), dtype=complex)
        for j, tap in enumerate(taps):
            shaped[j:] += np.outer(sig[:horizon - j], tap)
        a_u = shaped.real
        return ZeroDynamicsAttack(a_u, z0, g, taps=taps)

    a_u = scale * (np.outer(expo, g)).real
    x_inj = None
    if mode == "state":
        x_dir = np.linalg.solve(complex(z0) * np.eye(plant.n) - plant.A, plant.B @ g)
        x_inj = scale * x_dir.real
    return ZeroDynamicsAttack(a_u, z0, g, state_injection=x_inj)


def attack_streams(spec: AttackSpec | None, plant: StateSpaceModel, horizon: int,
                   factors: CoprimeFactors | None = None):
    """Precomputed ``(a_u, a_y, state_injection)`` for the non-replay attacks."""
    a_u = np.zeros((horizon, plant.m))
    a_y = np.zeros((horizon, plant.p))
    if spec is None:
        return a_u, a_y, None
    if spec.kind in (AttackKind.COVERT, AttackKind.REPLAY, AttackKind.CUSTOM_ADDITIVE):
        if spec.a_u:
            a_u = constant_stream(spec.a_u, spec.onset, horizon)
    if spec.kind is AttackKind.COVERT:
        a_u, a_y = covert_attack(plant, a_u)
    elif spec.kind is AttackKind.CUSTOM_ADDITIVE and spec.a_y:
        a_y = constant_stream(spec.a_y, spec.onset, horizon)
    elif spec.kind is AttackKind.ZERO_DYNAMICS:
        if factors is None:
            raise ValueError("zero-dynamics attacks need the plant coprime factors")
        zda = zero_dynamics_attack(factors, spec.z0, spec.g, spec.scale, spec.onset,
                                   horizon, spec.zda_mode)
        return zda.a_u, a_y, zda.state_injection
    return a_u, a_y, None
