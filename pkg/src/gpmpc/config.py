"""Scenario configuration: a TOML file holding every model, cost and GP default.

The embedded default is the reference scenario. User files and ``key=value``
overrides are merged on top of it and type-checked against it, so a typo in a
key or a string where a number belongs is rejected instead of ignored.
"""

from __future__ import annotations

import copy
from dataclasses import replace
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import tomli
import tomli_w

from .dynamics import ProcessNoise, TireParamsLinear, TireParamsMagic, VehicleParams
from .gp import DEFAULT_M, DEFAULT_SIGMA_F2, DEFAULT_SIGMA_N2, Y_NAMES, Hyperparams
from .mpc import MPCConfig
from .path import BarrierParams, CostWeights
from .sim import GPConfig, LeadVehicle, Scenario


class ConfigError(ValueError):
    """Invalid configuration file or override."""


def _m_line(m) -> str:
    return "[" + ", ".join(repr(float(v)) for v in m) + "]"


DEFAULT_TOML = f"""\
# Reference overtaking scenario. Units: SI (m, s, N, rad).

[scenario]
road_length = 250.0
road_width = 7.5
lane_y = -1.875
ego_init = [0.0, -1.875, 0.0, 20.0, 0.0, 0.0]  # X, Y, phi, vx, vy, omega
vehicle_length = 4.0
vehicle_width = 1.6
detection_range = 20.0
t_max = 30.0
vx_min = 10.0
vx_max = 35.0
strict = false

[[scenario.leads]]
X = 25.0
Y = -1.875
v = 12.0

[[scenario.leads]]
X = 60.0
Y = -1.875
v = 10.0

[vehicle]          # chassis plus drive-train constants
M = 500.0
Iz = 600.0
Lf = 0.9
Lr = 1.5
zeta = 1.0
Fa = 4000.0
Fb = 6000.0
vx_floor = 0.5
restoring_tires = true

[tires.magic]      # true plant
Bf = 0.4
Cf = 8.0
Df = 4560.4
Ef = -0.5
Br = 0.45
Cr = 8.0
Dr = 4000.0
Er = -0.5

[tires.linear]     # nominal model used by the controller
Clf = 1400.0
Clr = 1400.0

[noise]
sigma_vx2 = 7.1304e-4
sigma_vy2 = 1.0358e-10
sigma_omega2 = 1.0059e-10

[mpc]
Np = 10
Ts = 0.05
square_barrier = true
delta_max = 0.3419
T_max = 1.0
max_iterations = 30
grad_tol = 1e-6
nu_min = 10.0
nu_max = 35.0
q_nu = 1e8
rho = 1e10
rate_delta = 0.1
rate_T = 1e5
fallback_violation = 0.5
armijo = 1e-4
max_backtracks = 20
fd_step = 1e-6
integrator = "rk4"
predict_obstacles = true

[mpc.weights]      # contouring cost weights
q_c = 20.0
q_l = 50.0
q_o = 20.0
q_off = 180.0

[mpc.barrier]      # relaxed road-offset barrier
beta = 1000.0
gamma = 4.0
lam = -0.1
c = 5.0

[phase1]           # overlay on [mpc] for the data-collection run; empty = same as [mpc]

[gp]
n_max = 300
evict_dim = 1
fit = true
learn_online = true
fit_max_iter = 60

[gp.hyperparams.d_vx]     # M holds squared lengthscales in z = [X, Y, phi, vx, vy, omega, delta, T]
M = {_m_line(DEFAULT_M[0])}
sigma_f2 = {DEFAULT_SIGMA_F2[0]!r}
sigma_n2 = {DEFAULT_SIGMA_N2[0]!r}

[gp.hyperparams.d_vy]
M = {_m_line(DEFAULT_M[1])}
sigma_f2 = {DEFAULT_SIGMA_F2[1]!r}
sigma_n2 = {DEFAULT_SIGMA_N2[1]!r}

[gp.hyperparams.d_omega]
M = {_m_line(DEFAULT_M[2])}
sigma_f2 = {DEFAULT_SIGMA_F2[2]!r}
sigma_n2 = {DEFAULT_SIGMA_N2[2]!r}
"""

# keys that may be absent from the defaults and take any value of the right shape
_OPEN_TABLES = {("phase1",)}
_OPTIONAL_KEYS = {("gp", "sigma_evict")}


def default_dict() -> dict:
    return tomli.loads(DEFAULT_TOML)


def _type_ok(default: Any, value: Any) -> bool:
    if isinstance(default, bool) or isinstance(value, bool):
        return isinstance(default, bool) and isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float))
    if isinstance(default, list):
        return isinstance(value, list)
    return isinstance(value, type(default))


def _merge(base: dict, update: Mapping, path: tuple = ()) -> None:
    for key, value in update.items():
        here = path + (key,)
        if path in _OPEN_TABLES:
            mpc_defaults = default_dict()["mpc"]
            if key not in mpc_defaults:
                raise ConfigError(f"unknown key {'.'.join(here)}")
            if not _type_ok(mpc_defaults[key], value):
                raise ConfigError(f"{'.'.join(here)}: expected {type(mpc_defaults[key]).__name__}")
            base[key] = value
            continue
        if here == ("scenario", "leads"):
            if not isinstance(value, list) or not all(isinstance(v, dict) for v in value):
                raise ConfigError("scenario.leads must be an array of tables")
            for lead in value:
                if set(lead) != {"X", "Y", "v"}:
                    raise ConfigError("each lead needs exactly X, Y and v")
            base[key] = copy.deepcopy(value)
            continue
        if here in _OPTIONAL_KEYS:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{'.'.join(here)}: expected a number")
            base[key] = value
            continue
        if key not in base:
            raise ConfigError(f"unknown key {'.'.join(here)}")
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"{'.'.join(here)} must be a table")
            _merge(base[key], value, here)
        else:
            if not _type_ok(base[key], value):
                raise ConfigError(f"{'.'.join(here)}: expected {type(base[key]).__name__}, got {value!r}")
            base[key] = value


def parse_override(text: str) -> dict:
    """``a.b.c=value`` (TOML value syntax; bare words are read as strings)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = (s.strip() for s in text.split("=", 1))
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw
    out: dict = {}
    node = out
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def load_dict(path: Optional[Path] = None, overrides: Sequence[str] = (),
              hyperparams_path: Optional[Path] = None) -> dict:
    cfg = default_dict()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"scenario file not found: {path}")
        try:
            _merge(cfg, tomli.loads(path.read_text()))
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if hyperparams_path is not None:
        cfg_hp = load_hyperparams_dict(hyperparams_path)
        _merge(cfg, {"gp": {"hyperparams": cfg_hp}})
    for ov in overrides:
        _merge(cfg, parse_override(ov))
    return cfg


def load_hyperparams_dict(path: Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"hyperparameter file not found: {path}")
    try:
        data = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    hp = data.get("gp", {}).get("hyperparams")
    if not isinstance(hp, dict):
        raise ConfigError(f"{path}: no [gp.hyperparams.*] tables")
    return hp


def _hyperparams(cfg: dict) -> tuple:
    out = []
    for name in Y_NAMES:
        entry = cfg["gp"]["hyperparams"][name]
        if len(entry["M"]) != 8:
            raise ConfigError(f"gp.hyperparams.{name}.M needs 8 entries")
        try:
            out.append(Hyperparams.from_M(entry["M"], float(entry["sigma_f2"]), float(entry["sigma_n2"])))
        except ValueError as exc:
            raise ConfigError(f"gp.hyperparams.{name}: {exc}") from exc
    return tuple(out)


def _mpc(section: dict) -> MPCConfig:
    kw = {k: v for k, v in section.items() if k not in ("weights", "barrier")}
    for k in ("Np", "max_iterations", "max_backtracks"):
        kw[k] = int(kw[k])
    return MPCConfig(weights=CostWeights(**section["weights"]), barrier=BarrierParams(**section["barrier"]), **kw)


def scenario_from_dict(cfg: dict) -> Scenario:
    try:
        s = cfg["scenario"]
        mpc = _mpc(cfg["mpc"])
        phase1 = replace(mpc, **cfg["phase1"]) if cfg["phase1"] else None
        g = cfg["gp"]
        gp = GPConfig(n_max=int(g["n_max"]), sigma_evict=g.get("sigma_evict"), evict_dim=int(g["evict_dim"]),
                      hyperparams=_hyperparams(cfg), fit=g["fit"], learn_online=g["learn_online"],
                      fit_max_iter=int(g["fit_max_iter"]))
        if len(s["ego_init"]) != 6:
            raise ConfigError("scenario.ego_init needs 6 entries")
        leads = tuple(LeadVehicle(float(l["X"]), float(l["Y"]), float(l["v"])) for l in s["leads"])
        if [l.X for l in leads] != sorted(l.X for l in leads):
            raise ConfigError("scenario.leads must be ordered by initial X")
        return Scenario(
            road_length=s["road_length"], road_width=s["road_width"], lane_y=s["lane_y"],
            ego_init=tuple(float(v) for v in s["ego_init"]), leads=leads,
            vehicle_length=s["vehicle_length"], vehicle_width=s["vehicle_width"],
            detection_range=s["detection_range"], t_max=s["t_max"], vx_min=s["vx_min"], vx_max=s["vx_max"],
            noise=ProcessNoise(**cfg["noise"]), vehicle=VehicleParams(**cfg["vehicle"]),
            tires_magic=TireParamsMagic(**cfg["tires"]["magic"]),
            tires_linear=TireParamsLinear(**cfg["tires"]["linear"]),
            mpc=mpc, phase1_mpc=phase1, gp=gp, strict=s["strict"],
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_scenario(path: Optional[Path] = None, overrides: Sequence[str] = (),
                  hyperparams_path: Optional[Path] = None) -> Scenario:
    return scenario_from_dict(load_dict(path, overrides, hyperparams_path))


def _tidy(v: float) -> float:
    # 15 significant digits absorb the sqrt/square round trip of M
    return float(f"{float(v):.15g}")


def hyperparams_dict(hps: Sequence[Hyperparams]) -> dict:
    return {"gp": {"hyperparams": {
        name: {"M": [_tidy(v) for v in hp.M], "sigma_f2": _tidy(hp.sigma_f2), "sigma_n2": _tidy(hp.sigma_n2)}
        for name, hp in zip(Y_NAMES, hps)}}}


def write_hyperparams(path: Path, hps: Sequence[Hyperparams]) -> None:
    Path(path).write_text(tomli_w.dumps(hyperparams_dict(hps)))


def read_hyperparams(path: Path) -> tuple:
    return _hyperparams({"gp": {"hyperparams": load_hyperparams_dict(path)}})
