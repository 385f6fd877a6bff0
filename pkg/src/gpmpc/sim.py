"""Closed-loop overtaking scenario: plant, lead vehicles, controller, metrics."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .constraints import ObstacleState, RoadBounds, safe_zone
from .dynamics import (
    BD, NominalModel, ProcessNoise, TireParamsLinear, TireParamsMagic, VehicleParams, step_true,
)
from .gp import GPDictionary, GPModel, Hyperparams, fit_hyperparams, insert_with_eviction, residual_target, default_hyperparams
from .mpc import ControlContext, MPCConfig, control_step
from .path import ReferencePath

logger = logging.getLogger(__name__)

STATE_COLS = ("X", "Y", "phi", "vx", "vy", "omega")


@dataclass(frozen=True)
class LeadVehicle:
    X: float
    Y: float
    v: float


@dataclass(frozen=True)
class GPConfig:
    n_max: int = 300
    sigma_evict: Optional[float] = None
    evict_dim: int = 1
    hyperparams: tuple = field(default_factory=lambda: tuple(default_hyperparams()))
    fit: bool = True
    learn_online: bool = True
    fit_max_iter: int = 60


@dataclass(frozen=True)
class Scenario:
    road_length: float = 250.0
    road_width: float = 7.5
    lane_y: float = -1.875
    ego_init: tuple = (0.0, -1.875, 0.0, 20.0, 0.0, 0.0)
    leads: tuple = (LeadVehicle(25.0, -1.875, 12.0), LeadVehicle(60.0, -1.875, 10.0))
    vehicle_length: float = 4.0
    vehicle_width: float = 1.6
    detection_range: float = 20.0
    t_max: float = 30.0
    vx_min: float = 10.0
    vx_max: float = 35.0
    noise: ProcessNoise = ProcessNoise()
    vehicle: VehicleParams = VehicleParams()
    tires_magic: TireParamsMagic = TireParamsMagic()
    tires_linear: TireParamsLinear = TireParamsLinear()
    mpc: MPCConfig = MPCConfig()
    phase1_mpc: Optional[MPCConfig] = None
    gp: GPConfig = GPConfig()
    strict: bool = False

    @property
    def bounds(self) -> RoadBounds:
        half = 0.5 * self.road_width
        return RoadBounds(half, half, 0.5 * self.vehicle_width)

    def path(self) -> ReferencePath:
        return ReferencePath.straight(self.lane_y, -50.0, self.road_length + 100.0, 0.5 * self.road_width)

    def nominal(self, mpc: Optional[MPCConfig] = None) -> NominalModel:
        mpc = mpc or self.mpc
        return NominalModel(self.vehicle, self.tires_linear, mpc.Ts, mpc.integrator)

    def obstacles_at(self, t: float) -> list[ObstacleState]:
        return [ObstacleState(l.X + l.v * t, l.Y, l.v, self.vehicle_length, self.vehicle_width, i)
                for i, l in enumerate(self.leads)]

    def context(self, mpc: Optional[MPCConfig] = None) -> ControlContext:
        mpc = mpc or self.mpc
        return ControlContext(mpc, self.nominal(mpc), self.path(), self.bounds, self.noise,
                              self.detection_range, self.vehicle_length, self.vehicle_width)


class SafeZoneEntry(RuntimeError):
    pass


@dataclass
class RunLog:
    mode: str
    seed: int
    Ts: float
    records: list[dict] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)  # x_k, k = 0..n
    inputs: list[np.ndarray] = field(default_factory=list)  # u_k
    gp_mean: list[np.ndarray] = field(default_factory=list)  # mu_d(z_k) used for the error metric
    obstacles: list[list[ObstacleState]] = field(default_factory=list)
    model: Optional[GPModel] = None

    @property
    def n_steps(self) -> int:
        return len(self.inputs)

    def pairs(self, nominal: NominalModel):
        Z = np.array([np.concatenate([x, u]) for x, u in zip(self.states[:-1], self.inputs)])
        Y = np.array([residual_target(self.states[k + 1], self.states[k], self.inputs[k], nominal)
                      for k in range(self.n_steps)])
        return Z, Y

    def rows(self) -> list[dict]:
        rows = []
        for k, rec in enumerate(self.records):
            row = {"step": k}
            row.update({f"x_{n}": float(v) for n, v in zip(STATE_COLS, self.states[k])})
            row.update({f"xnext_{n}": float(v) for n, v in zip(STATE_COLS, self.states[k + 1])})
            row.update({f"gp_{n}": float(v) for n, v in zip(("vx", "vy", "omega"), self.gp_mean[k])})
            for o in self.obstacles[k]:
                row[f"lead{o.ident}_X"] = o.X
                row[f"lead{o.ident}_Y"] = o.Y
            row.update(rec)
            rows.append(row)
        return rows

    def to_csv(self, path) -> None:
        write_csv(path, self.rows())


def write_csv(path, rows: Sequence[dict]) -> None:
    """CSV with a leading ``# schema:`` comment naming every column."""
    if not rows:
        raise ValueError("nothing to write")
    cols = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        fh.write("# schema: " + ",".join(cols) + "\n")
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: (repr(v) if isinstance(v, float) else v) for c, v in r.items()})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# schema: "):
            raise ValueError(f"{path}: missing schema comment")
        schema = first[len("# schema: "):].strip().split(",")
        reader = csv.DictReader(fh)
        if reader.fieldnames != schema:
            raise ValueError(f"{path}: header does not match declared schema")
        return list(reader)


def plant_step(x, u, scenario: Scenario, rng: np.random.Generator, Ts: float, method: str):
    x_next = step_true(x, u, scenario.vehicle, scenario.tires_magic, scenario.noise, rng, Ts, method)
    x_next[3] = np.clip(x_next[3], scenario.vx_min, scenario.vx_max)
    return x_next


def run_episode(scenario: Scenario, mode: str = "gpmpc", model: Optional[GPModel] = None, seed: int = 0,
                mpc: Optional[MPCConfig] = None, learn: Optional[bool] = None,
                rng: Optional[np.random.Generator] = None) -> RunLog:
    """Simulate one episode.

    ``mode="nmpc"`` ignores ``model`` in the controller. In ``"gpmpc"`` mode
    each new residual pair is inserted into ``model`` (mutated in place)
    unless ``learn`` is false.
    """
    if mode not in ("nmpc", "gpmpc"):
        raise ValueError(f"unknown controller mode {mode!r}")
    mpc = mpc or scenario.mpc
    ctx = scenario.context(mpc)
    learn = scenario.gp.learn_online if learn is None else learn
    rng = rng if rng is not None else np.random.default_rng(seed)
    ctrl_model = model if mode == "gpmpc" else None

    x = np.array(scenario.ego_init, dtype=float)
    log = RunLog(mode, seed, mpc.Ts, model=ctrl_model)
    log.states.append(x.copy())
    prev, u_prev = None, None
    n_max = int(round(scenario.t_max / mpc.Ts))
    for k in range(n_max):
        if x[0] > scenario.road_length:
            break
        t = k * mpc.Ts
        obstacles = scenario.obstacles_at(t)
        u, prev, rec = control_step(x, obstacles, ctrl_model, prev, ctx, t, u_prev=u_prev)
        z = np.concatenate([x, u])
        mu = ctrl_model.mean(z) if ctrl_model is not None else np.zeros(3)
        x_next = plant_step(x, u, scenario, rng, mpc.Ts, mpc.integrator)
        rec["dict_size"] = len(ctrl_model) if ctrl_model is not None else 0
        rec["in_zone"] = int(any(safe_zone(o).contains(x[0], x[1]) for o in obstacles))
        if scenario.strict and rec["in_zone"]:
            raise SafeZoneEntry(f"ego entered a safe zone at t={t:.2f}s")
        if ctrl_model is not None and learn:
            ctrl_model.insert(z, residual_target(x_next, x, u, ctx.nominal))
        log.records.append(rec)
        log.inputs.append(u)
        log.gp_mean.append(np.asarray(mu, dtype=float))
        log.obstacles.append(obstacles)
        log.states.append(x_next.copy())
        x, u_prev = x_next, u
    return log


@dataclass(frozen=True)
class Metrics:
    e_vx: float
    e_vy: float
    e_omega: float
    e_total: float
    min_clearance: tuple
    zone_entries: int
    boundary_violations: int
    completion_time: float
    overtakes: int
    pedal_variation: float
    steer_variation: float

    def row(self) -> dict:
        d = {"e_vx": self.e_vx, "e_vy": self.e_vy, "e_omega": self.e_omega, "e_total": self.e_total}
        for i, c in enumerate(self.min_clearance):
            d[f"min_clearance_{i}"] = c
        d.update(zone_entries=self.zone_entries, boundary_violations=self.boundary_violations,
                 completion_time=self.completion_time, overtakes=self.overtakes,
                 pedal_variation=self.pedal_variation, steer_variation=self.steer_variation)
        return d


def prediction_errors(log: RunLog, nominal: NominalModel, model: Optional[GPModel] = None) -> np.ndarray:
    """One-step errors on (vx, vy, omega); GP correction from ``model`` or the logged means."""
    X = np.array(log.states)
    U = np.array(log.inputs)
    pred = nominal.step(X[:-1], U)
    if model is not None:
        pred = pred + model.mean(np.concatenate([X[:-1], U], axis=1)) @ BD.T
    else:
        pred = pred + np.array(log.gp_mean) @ BD.T
    return (X[1:] - pred)[:, 3:]


@dataclass(frozen=True)
class SafetyReport:
    zone_entries: int
    entry_steps: tuple
    boundary_violations: int
    min_clearance: tuple
    overtakes: int


def _rect_distance(x, y, zone) -> float:
    dx = max(zone.x_min - x, 0.0, x - zone.x_max)
    dy = max(zone.y_min - y, 0.0, y - zone.y_max)
    return float(np.hypot(dx, dy))


def _corners(x, length, width):
    c, s = np.cos(x[2]), np.sin(x[2])
    pts = []
    for a in (0.5 * length, -0.5 * length):
        for b in (0.5 * width, -0.5 * width):
            pts.append((x[0] + a * c - b * s, x[1] + a * s + b * c))
    return pts


def check_safety(log: RunLog, scenario: Scenario, body_corners: bool = False) -> SafetyReport:
    n_leads = len(scenario.leads)
    clearance = [np.inf] * n_leads
    entries, boundary = [], 0
    limit = 0.5 * scenario.road_width - 0.5 * scenario.vehicle_width
    for k in range(log.n_steps):
        x = log.states[k]
        pts = _corners(x, scenario.vehicle_length, scenario.vehicle_width) if body_corners else [(x[0], x[1])]
        hit = False
        for o in log.obstacles[k]:
            zone = safe_zone(o)
            for px, py in pts:
                if zone.contains(px, py):
                    hit = True
            clearance[o.ident] = min(clearance[o.ident], _rect_distance(x[0], x[1], zone))
        if hit:
            entries.append(k)
        if abs(x[1]) > limit:
            boundary += 1
    final_x = log.states[-1][0]
    t_end = log.n_steps * log.Ts
    overtakes = sum(final_x > safe_zone(o).x_max for o in scenario.obstacles_at(t_end))
    return SafetyReport(len(entries), tuple(entries), boundary, tuple(clearance), int(overtakes))


def compute_metrics(log: RunLog, scenario: Scenario, model: Optional[GPModel] = None) -> Metrics:
    if log.n_steps == 0:
        raise ValueError("empty run log")
    err = prediction_errors(log, scenario.nominal(), model)
    mse = np.mean(err**2, axis=0)
    safety = check_safety(log, scenario)
    U = np.array(log.inputs)
    return Metrics(
        float(mse[0]), float(mse[1]), float(mse[2]), float(mse.sum()),
        safety.min_clearance, safety.zone_entries, safety.boundary_violations,
        log.n_steps * log.Ts, safety.overtakes,
        float(np.abs(np.diff(U[:, 1])).sum()), float(np.abs(np.diff(U[:, 0])).sum()),
    )


def build_dictionary(Z: np.ndarray, Y: np.ndarray, gp_cfg: GPConfig, hp: Hyperparams) -> GPDictionary:
    d = GPDictionary(n_max=gp_cfg.n_max, sigma_evict=gp_cfg.sigma_evict)
    for z, y in zip(Z, Y):
        d, _ = insert_with_eviction(d, z, y, hp)
    return d


def fit_model(dictionary: GPDictionary, gp_cfg: GPConfig) -> GPModel:
    hps = list(gp_cfg.hyperparams)
    if gp_cfg.fit and len(dictionary) >= 5:
        hps = [fit_hyperparams(dictionary, hps[d], d, max_iter=gp_cfg.fit_max_iter).hyperparams for d in range(3)]
    return GPModel(hps, dictionary, gp_cfg.evict_dim)


@dataclass
class ExperimentResult:
    nmpc: Metrics
    gpmpc: Metrics
    nmpc_log: RunLog
    gpmpc_log: RunLog
    model: GPModel
    initial_dictionary: GPDictionary


def two_phase_experiment(scenario: Scenario, seed: int = 0) -> ExperimentResult:
    """Phase 1 drives with the nominal controller and harvests residual pairs;
    phase 2 drives with the GP-augmented controller, learning online."""
    seq = np.random.SeedSequence(seed)
    rng1, rng2 = (np.random.default_rng(s) for s in seq.spawn(2))
    phase1 = scenario.phase1_mpc or scenario.mpc
    log1 = run_episode(scenario, "nmpc", None, seed, mpc=phase1, rng=rng1)
    Z, Y = log1.pairs(scenario.nominal(phase1))
    d0 = build_dictionary(Z, Y, scenario.gp, scenario.gp.hyperparams[scenario.gp.evict_dim])
    model = fit_model(d0, scenario.gp)
    initial = replace(model.dictionary)
    log2 = run_episode(scenario, "gpmpc", model, seed, rng=rng2)
    return ExperimentResult(compute_metrics(log1, scenario), compute_metrics(log2, scenario),
                            log1, log2, model, initial)
