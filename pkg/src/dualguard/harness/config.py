"""Scenario files.

A scenario is a TOML document::

    schema_version = 1
    name = "uav_covert"
    horizon = 1000          # steps
    seed = 0
    alpha = 0.01            # chi-square false-alarm rate
    persistence = 5         # consecutive exceedances before a flag is raised
    burn_in = 100
    s = 10                  # finite window of the detectability index
    sample_time = 0.1       # metadata only
    simulate_noise = true   # false: zero noise, design covariances kept

    [plant]                 # row-major nested arrays; D defaults to zeros
    A = [[...], [...]]
    B = [[...], [...]]
    C = [[...]]

    [noise]                 # scalar s means s * I
    Sigma_omega = 0.001
    Sigma_eta = 0.01
    Sigma_eta_u = 0.01

    [controller]
    source = "lqr"          # "gains" | "lqr" | "optimize"
    F = [[...]]             # source = "gains"
    state_weight = 1.0      # source = "lqr"
    input_weight = 1.0
    L = [[...]]             # optional; Kalman gain otherwise
    Q = [[...]]             # optional static residual feedback
    vbar = [[...]]          # optional periodic reference, one row per step
    form = "observer"       # or "youla"
    twin_gain = "kalman"    # or "youla"

    [optimizer]             # source = "optimize"; fields of SearchConfig
    mode = "grid"

    [attack]                # optional
    kind = "covert"         # zero_dynamics | covert | replay | custom
    onset = 200
    a_u = [0.5, 0.5]

    [fault]                 # optional
    kind = "plant"          # actuator | sensor | plant
    onset = 200
    bias = [0.5, 0.5]

Unknown keys are rejected.  ``DUALGUARD_SEED`` in the environment overrides
``seed``.
"""

from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ..adversary import AttackKind, AttackSpec, FaultSpec
from ..lti import DimensionError, NoiseSpec, StateSpaceModel
from ..optimizer import SearchConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA_VERSION = 1
SEED_ENV = "DUALGUARD_SEED"

DEFAULTS = dict(
    horizon=1000, seed=0, alpha=0.01, persistence=5, burn_in=100, s=10,
    sample_time=0.1, simulate_noise=True,
)
DEFAULT_NOISE = dict(Sigma_omega=0.001, Sigma_eta=0.01, Sigma_eta_u=0.01)
DEFAULT_ONSET = 200

TOP_KEYS = {"schema_version", "name", "plant", "noise", "controller", "optimizer", "attack",
            "fault", *DEFAULTS}
REQUIRED = ("schema_version", "plant")
PLANT_KEYS = {"A", "B", "C", "D"}
NOISE_KEYS = set(DEFAULT_NOISE)
CONTROLLER_KEYS = {"source", "F", "state_weight", "input_weight", "L", "Q", "vbar", "form",
                   "twin_gain"}
ATTACK_KEYS = {"kind", "onset", "a_u", "a_y", "record_window", "z0", "g", "scale", "mode"}
FAULT_KEYS = {"kind", "onset", "bias"}
OPTIMIZER_KEYS = {f.name for f in dataclasses.fields(SearchConfig)} - {"s"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ControllerSource:
    source: str = "lqr"
    F: np.ndarray | None = None
    state_weight: np.ndarray | float = 1.0
    input_weight: np.ndarray | float = 1.0
    L: np.ndarray | None = None
    Q: np.ndarray | None = None
    vbar: np.ndarray | None = None
    form: str = "observer"
    twin_gain: str = "kalman"
    search: SearchConfig | None = None


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    plant: StateSpaceModel
    noise: NoiseSpec
    controller: ControllerSource = field(default_factory=ControllerSource)
    attack: AttackSpec | None = None
    fault: FaultSpec | None = None
    horizon: int = DEFAULTS["horizon"]
    alpha: float = DEFAULTS["alpha"]
    persistence: int = DEFAULTS["persistence"]
    burn_in: int = DEFAULTS["burn_in"]
    s: int = DEFAULTS["s"]
    sample_time: float = DEFAULTS["sample_time"]
    simulate_noise: bool = DEFAULTS["simulate_noise"]
    name: str = "scenario"

    @property
    def seed(self) -> int:
        return self.noise.seed

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return dataclasses.replace(self, noise=dataclasses.replace(self.noise, seed=int(seed)))

    def replace(self, **kw) -> "ScenarioConfig":
        return dataclasses.replace(self, **kw)

    def __post_init__(self):
        validate(self)

    @property
    def onset(self) -> int | None:
        """Earliest injection step, or ``None`` for a nominal scenario."""
        onsets = [int(np.ceil(e.onset)) for e in (self.attack, self.fault)
                  if e is not None and np.isfinite(e.onset)]
        return min(onsets) if onsets else None


def validate(cfg: ScenarioConfig):
    P = cfg.plant
    if cfg.horizon < 1:
        raise ConfigError(f"horizon must be positive, got {cfg.horizon}")
    if not 0 < cfg.alpha < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {cfg.alpha}")
    if cfg.persistence < 1:
        raise ConfigError("persistence must be >= 1")
    if cfg.burn_in < 0 or cfg.s < 1:
        raise ConfigError("burn_in must be >= 0 and s >= 1")
    if np.any(P.D != 0):
        raise ConfigError("closed-loop simulation needs a strictly proper plant (D = 0)")
    for name, S, dim in (("Sigma_omega", cfg.noise.Sigma_omega, P.n),
                         ("Sigma_eta", cfg.noise.Sigma_eta, P.p),
                         ("Sigma_eta_u", cfg.noise.Sigma_eta_u, P.m)):
        if S.shape != (dim, dim):
            raise ConfigError(f"noise.{name} must be {dim}x{dim}, got {S.shape}")
    c = cfg.controller
    if c.source not in ("gains", "lqr", "optimize"):
        raise ConfigError(f"controller.source must be gains, lqr or optimize, got {c.source!r}")
    if c.source == "gains":
        if c.F is None:
            raise ConfigError("controller.source = 'gains' needs controller.F")
        if c.F.shape != (P.m, P.n):
            raise ConfigError(f"controller.F must be {P.m}x{P.n}, got {c.F.shape}")
    if c.L is not None and c.L.shape != (P.n, P.p):
        raise ConfigError(f"controller.L must be {P.n}x{P.p}, got {c.L.shape}")
    if c.Q is not None and c.Q.shape != (P.m, P.p):
        raise ConfigError(f"controller.Q must be {P.m}x{P.p}, got {c.Q.shape}")
    if c.vbar is not None and (c.vbar.ndim != 2 or c.vbar.shape[1] != P.m):
        raise ConfigError(f"controller.vbar must have {P.m} columns")
    if c.form not in ("observer", "youla"):
        raise ConfigError(f"controller.form must be observer or youla, got {c.form!r}")
    if c.twin_gain not in ("kalman", "youla"):
        raise ConfigError(f"controller.twin_gain must be kalman or youla, got {c.twin_gain!r}")
    for label, event in (("attack", cfg.attack), ("fault", cfg.fault)):
        if event is not None and np.isfinite(event.onset) and event.onset >= cfg.horizon:
            raise ConfigError(f"{label}.onset={event.onset} must be below horizon={cfg.horizon}")
    if cfg.fault is not None:
        try:
            cfg.fault.check_dims(P.n, P.m, P.p)
        except ValueError as exc:
            raise ConfigError(f"fault.bias: {exc}") from None
    a = cfg.attack
    if a is not None:
        if a.a_u and len(a.a_u) != P.m:
            raise ConfigError(f"attack.a_u needs {P.m} entries, got {len(a.a_u)}")
        if a.a_y and len(a.a_y) != P.p:
            raise ConfigError(f"attack.a_y needs {P.p} entries, got {len(a.a_y)}")
        if a.g is not None and len(a.g) != P.m:
            raise ConfigError(f"attack.g needs {P.m} entries, got {len(a.g)}")


# ------------------------------------------------------------------ parsing

def _matrix(value, where: str) -> np.ndarray:
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: expected a number or nested numeric array") from None
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ConfigError(f"{where}: expected a matrix, got {arr.ndim}-D data")
    return arr


def _cov(value, dim: int, where: str) -> np.ndarray:
    if isinstance(value, (int, float)):
        return float(value) * np.eye(dim)
    return _matrix(value, where)


def _vector(value, where: str) -> tuple:
    if isinstance(value, (int, float)):
        return (float(value),)
    try:
        return tuple(float(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: expected a list of numbers") from None


def _section(doc: dict, name: str, allowed: set) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    unknown = sorted(set(sec) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    return sec


def parse_config(doc: dict, name: str = "scenario", env=None) -> ScenarioConfig:
    env = os.environ if env is None else env
    missing = [k for k in REQUIRED if k not in doc]
    if missing:
        raise ConfigError(f"missing required key(s): {', '.join(missing)}")
    unknown = sorted(set(doc) - TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {doc['schema_version']!r}; "
                          f"this build reads {SCHEMA_VERSION}")

    pl = _section(doc, "plant", PLANT_KEYS)
    for key in ("A", "B", "C"):
        if key not in pl:
            raise ConfigError(f"[plant] is missing {key}")
    A, B, C = (_matrix(pl[k], f"plant.{k}") for k in "ABC")
    if B.shape[0] != A.shape[0] and B.shape[0] == 1:
        B = B.T
    D = _matrix(pl["D"], "plant.D") if "D" in pl else np.zeros((C.shape[0], B.shape[1]))
    try:
        plant = StateSpaceModel(A, B, C, D)
    except DimensionError as exc:
        raise ConfigError(f"[plant] {exc}") from None

    top = {**DEFAULTS, **{k: doc[k] for k in DEFAULTS if k in doc}}
    if SEED_ENV in env:
        try:
            top["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    for key in ("horizon", "seed", "persistence", "burn_in", "s"):
        if isinstance(top[key], bool) or not isinstance(top[key], int):
            raise ConfigError(f"{key} must be an integer, got {top[key]!r}")

    nz = {**DEFAULT_NOISE, **_section(doc, "noise", NOISE_KEYS)}
    try:
        noise = NoiseSpec(_cov(nz["Sigma_omega"], plant.n, "noise.Sigma_omega"),
                          _cov(nz["Sigma_eta"], plant.p, "noise.Sigma_eta"),
                          _cov(nz["Sigma_eta_u"], plant.m, "noise.Sigma_eta_u"),
                          top["seed"])
    except ValueError as exc:
        raise ConfigError(f"[noise] {exc}") from None

    cs = _section(doc, "controller", CONTROLLER_KEYS)
    opt = _section(doc, "optimizer", OPTIMIZER_KEYS)
    try:
        search = SearchConfig(s=top["s"], **opt)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[optimizer] {exc}") from None
    controller = ControllerSource(
        source=cs.get("source", "gains" if "F" in cs else "lqr"),
        F=_matrix(cs["F"], "controller.F") if "F" in cs else None,
        state_weight=_cov(cs.get("state_weight", 1.0), plant.n, "controller.state_weight"),
        input_weight=_cov(cs.get("input_weight", 1.0), plant.m, "controller.input_weight"),
        L=_matrix(cs["L"], "controller.L").reshape(plant.n, -1) if "L" in cs else None,
        Q=_matrix(cs["Q"], "controller.Q") if "Q" in cs else None,
        vbar=_matrix(cs["vbar"], "controller.vbar") if "vbar" in cs else None,
        form=cs.get("form", "observer"),
        twin_gain=cs.get("twin_gain", "kalman"),
        search=search,
    )

    attack = fault = None
    if "attack" in doc:
        at = _section(doc, "attack", ATTACK_KEYS)
        if "kind" not in at:
            raise ConfigError("[attack] is missing kind")
        try:
            kind = AttackKind(at["kind"])
            z0 = at.get("z0", 1.05)
            attack = AttackSpec(
                kind=kind, onset=int(at.get("onset", DEFAULT_ONSET)),
                a_u=_vector(at["a_u"], "attack.a_u") if "a_u" in at else (),
                a_y=_vector(at["a_y"], "attack.a_y") if "a_y" in at else (),
                record_window=int(at.get("record_window", 200)),
                z0=complex(*z0) if isinstance(z0, list) else float(z0),
                g=_vector(at["g"], "attack.g") if "g" in at else None,
                scale=float(at.get("scale", 1.0)),
                zda_mode=at.get("mode", "kernel"),
            )
        except ValueError as exc:
            raise ConfigError(f"[attack] {exc}") from None
    if "fault" in doc:
        ft = _section(doc, "fault", FAULT_KEYS)
        for key in ("kind", "bias"):
            if key not in ft:
                raise ConfigError(f"[fault] is missing {key}")
        try:
            fault = FaultSpec(ft["kind"], float(ft.get("onset", DEFAULT_ONSET)),
                              _vector(ft["bias"], "fault.bias"))
        except ValueError as exc:
            raise ConfigError(f"[fault] {exc}") from None

    return ScenarioConfig(
        plant=plant, noise=noise, controller=controller, attack=attack, fault=fault,
        horizon=top["horizon"], alpha=float(top["alpha"]), persistence=top["persistence"],
        burn_in=top["burn_in"], s=top["s"], sample_time=float(top["sample_time"]),
        simulate_noise=bool(top["simulate_noise"]), name=str(doc.get("name", name)),
    )


def bundled_scenarios() -> list[str]:
    root = resources.files("dualguard") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


def resolve_path(ref) -> Path:
    """A filesystem path, or the name of a bundled scenario."""
    path = Path(ref)
    if path.exists():
        return path
    if path.suffix == "" and str(ref) in bundled_scenarios():
        return Path(str(resources.files("dualguard") / "scenarios" / f"{ref}.toml"))
    raise FileNotFoundError(f"no scenario file or bundled scenario named {str(ref)!r}")


def load_config(path, env=None) -> ScenarioConfig:
    path = resolve_path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        # message carries "(at line L, column C)"
        raise ConfigError(f"{path}: {exc}") from None
    try:
        return parse_config(doc, name=path.stem, env=env)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
