"""Model predictive contouring control with an optional GP residual model.

Decision variables per horizon step are the steering angle, the pedal and a
virtual progress rate ``nu`` that advances the path parameter,
``xi[k+1] = xi[k] + nu[k] * Ts``. The cost is the contouring stage cost on the
predicted mean, a progress reward, a quadratic penalty on violations of the
linear corridor constraints and a small input-rate term.

Everything except the progress reward is a sum of squares, which the solver
exploits: the search direction is a damped Gauss-Newton step restricted to
the free variables (those not pinned at a bound), followed by a projected
Armijo backtracking line search. Derivatives are central finite differences,
evaluated as one batched rollout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .constraints import ConstraintSet, ObstacleState, Phase, RoadBounds, horizon_constraints
from .dynamics import BD, STATE_DIM, DomainError, NominalModel, ProcessNoise
from .gp import GPModel
from .path import BarrierParams, CostWeights, ReferencePath, contouring_errors, project_progress, relaxed_barrier
from .propagation import PropagationError, StateBelief, propagate_horizon


class Status(str, Enum):
    CONVERGED = "converged"
    ITERATION_CAPPED = "iteration-capped"
    INFEASIBLE_FALLBACK = "infeasible-fallback"


@dataclass(frozen=True)
class MPCConfig:
    Np: int = 10
    Ts: float = 0.05
    weights: CostWeights = field(default_factory=CostWeights)
    barrier: BarrierParams = field(default_factory=BarrierParams)
    square_barrier: bool = True
    delta_max: float = 0.3419
    T_max: float = 1.0
    max_iterations: int = 30
    grad_tol: float = 1e-6
    nu_min: float = 10.0
    nu_max: float = 35.0
    q_nu: float = 1e8
    rho: float = 1e10
    rate_delta: float = 0.1
    rate_T: float = 1e5
    fallback_violation: float = 0.5
    armijo: float = 1e-4
    max_backtracks: int = 20
    fd_step: float = 1e-6
    integrator: str = "rk4"
    predict_obstacles: bool = True

    def __post_init__(self):
        if self.Np < 1 or self.Ts <= 0 or self.max_iterations < 1:
            raise ValueError("need Np >= 1, Ts > 0 and max_iterations >= 1")
        if not 0 < self.nu_min <= self.nu_max:
            raise ValueError("progress-rate bounds must satisfy 0 < nu_min <= nu_max")

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        N = self.Np
        lo = np.concatenate([np.full(N, -self.delta_max), np.full(N, -self.T_max), np.full(N, self.nu_min)])
        hi = np.concatenate([np.full(N, self.delta_max), np.full(N, self.T_max), np.full(N, self.nu_max)])
        return lo, hi


@dataclass
class HorizonSolution:
    inputs: np.ndarray  # (Np, 2)
    nus: np.ndarray  # (Np,)
    beliefs: list[StateBelief]
    xi: np.ndarray  # (Np + 1,)
    cost: float
    status: Status
    iterations: int
    max_violation: float
    cost_history: list[float] = field(default_factory=list)
    sides: dict = field(default_factory=dict)  # obstacle id -> Side, kept across steps

    @property
    def means(self) -> np.ndarray:
        return np.array([b.mu_x for b in self.beliefs])

    @property
    def variances(self) -> np.ndarray:
        return np.array([np.diag(b.Sigma_x) for b in self.beliefs])


def _pack(inputs: np.ndarray, nus: np.ndarray) -> np.ndarray:
    return np.concatenate([inputs[:, 0], inputs[:, 1], nus])


def _unpack(theta: np.ndarray, N: int):
    theta = np.atleast_2d(theta)
    U = np.stack([theta[:, :N], theta[:, N:2 * N]], axis=-1)
    return U, theta[:, 2 * N:]


def rollout_means(x0, U: np.ndarray, model: Optional[GPModel], nominal: NominalModel) -> np.ndarray:
    """Mean trajectories for a batch of input sequences ``U`` of shape ``(B, N, 2)``."""
    B, N, _ = U.shape
    out = np.empty((B, N + 1, STATE_DIM))
    x = np.broadcast_to(np.asarray(x0, dtype=float), (B, STATE_DIM)).copy()
    out[:, 0] = x
    use_gp = model is not None and not model.empty
    for k in range(N):
        u = U[:, k]
        x_next = nominal.step(x, u)
        if use_gp:
            x_next = x_next + model.mean(np.concatenate([x, u], axis=1)) @ BD.T
        out[:, k + 1] = x_next
        x = x_next
    return out


def progress_sequence(xi0: float, nus: np.ndarray, Ts: float) -> np.ndarray:
    nus = np.atleast_2d(nus)
    return xi0 + np.concatenate([np.zeros((len(nus), 1)), np.cumsum(nus * Ts, axis=1)], axis=1)


def rollout(x0, xi0: float, inputs, nus, model: Optional[GPModel], config: MPCConfig,
            nominal: NominalModel, noise: ProcessNoise = ProcessNoise.zero()):
    beliefs = propagate_horizon(x0, inputs, model, noise, nominal)
    return beliefs, progress_sequence(xi0, np.asarray(nus, dtype=float), config.Ts)[0]


def _stack_constraints(constraints: Sequence[ConstraintSet]):
    A = np.stack([c.A for c in constraints])  # (N, 3, 6)
    B = np.stack([c.B for c in constraints])  # (N, 3)
    return A, B


def _residuals(states, xi, U, nus, u_prev, A, B, path: ReferencePath, config: MPCConfig):
    """Least-squares residuals ``(batch, R)`` and the non-square remainder of the cost."""
    w = config.weights
    Xs, xis = states[:, 1:], xi[:, 1:]
    e = contouring_errors(Xs[..., 0], Xs[..., 1], Xs[..., 2], path, xis)
    rb = relaxed_barrier(e.e_off, config.barrier)
    parts = [np.sqrt(w.q_c) * e.e_c, np.sqrt(w.q_l) * e.e_l, np.sqrt(w.q_o) * e.e_o]
    extra = -config.q_nu * config.Ts * nus.sum(axis=1)
    if config.square_barrier:
        parts.append(np.sqrt(w.q_off) * rb)
    else:
        extra = extra + w.q_off * rb.sum(axis=1)
    viol = np.maximum(0.0, np.einsum("nij,bnj->bni", A, Xs) - B[None])
    parts.append(np.sqrt(config.rho) * viol.reshape(len(Xs), -1))
    prev = np.broadcast_to(np.asarray(u_prev, dtype=float), (len(U), 1, 2))
    dU = np.diff(np.concatenate([prev, U], axis=1), axis=1)
    parts.append(np.sqrt(config.rate_delta) * dU[..., 0])
    parts.append(np.sqrt(config.rate_T) * dU[..., 1])
    return np.concatenate(parts, axis=1), extra, viol.max(axis=(1, 2))


def total_cost(beliefs: Sequence[StateBelief], xi_seq, inputs, nus, constraints: Sequence[ConstraintSet],
               config: MPCConfig, path: ReferencePath, u_prev=None) -> float:
    """Stage costs over the predicted means ``k = 1..Np`` plus progress reward and penalties."""
    states = np.array([b.mu_x for b in beliefs])[None]
    inputs = np.asarray(inputs, dtype=float).reshape(1, -1, 2)
    u_prev = inputs[0, 0] if u_prev is None else u_prev
    A, B = _stack_constraints(constraints)
    r, extra, _ = _residuals(states, np.asarray(xi_seq, dtype=float)[None], inputs,
                             np.asarray(nus, dtype=float)[None], u_prev, A, B, path, config)
    return float((r * r).sum() + extra[0])


class _Problem:
    """Batched cost evaluation for one solve."""

    def __init__(self, x0, xi0, constraints, model, config: MPCConfig, nominal, path, u_prev):
        self.x0, self.xi0 = np.asarray(x0, dtype=float), xi0
        self.A, self.B = _stack_constraints(constraints)
        self.model, self.config, self.nominal, self.path = model, config, nominal, path
        self.u_prev = np.asarray(u_prev, dtype=float)
        self.N = config.Np

    def _states(self, U: np.ndarray) -> np.ndarray:
        try:
            return rollout_means(self.x0, U, self.model, self.nominal)
        except DomainError:
            # redo row by row; candidates that leave the model's domain get NaN states
            out = np.full((len(U), self.N + 1, STATE_DIM), np.nan)
            for i in range(len(U)):
                try:
                    out[i] = rollout_means(self.x0, U[i:i + 1], self.model, self.nominal)[0]
                except DomainError:
                    pass
            return out

    def evaluate(self, thetas: np.ndarray):
        U, nus = _unpack(thetas, self.N)
        states = self._states(U)
        xi = progress_sequence(self.xi0, nus, self.config.Ts)
        bad = np.isnan(states).any(axis=(1, 2))
        if bad.any():
            states[bad] = self.x0
        r, extra, viol = _residuals(states, xi, U, nus, self.u_prev, self.A, self.B, self.path, self.config)
        cost = (r * r).sum(axis=1) + extra
        cost[bad] = np.inf
        viol[bad] = np.inf
        return cost, r, viol


def _warm_start(prev: Optional[HorizonSolution], x0, config: MPCConfig):
    N = config.Np
    if prev is not None:
        inputs = np.vstack([prev.inputs[1:], prev.inputs[-1:]])
        nus = np.concatenate([prev.nus[1:], prev.nus[-1:]])
    else:
        inputs = np.zeros((N, 2))
        nus = np.full(N, x0[3])
    lo, hi = config.bounds()
    return np.clip(_pack(inputs, nus), lo, hi)


def fallback_solution(x0, xi0, model, config: MPCConfig, nominal, noise) -> HorizonSolution:
    N = config.Np
    inputs = np.tile([0.0, -config.T_max], (N, 1))
    nus = np.full(N, np.clip(x0[3], config.nu_min, config.nu_max))
    try:
        beliefs, xi = rollout(x0, xi0, inputs, nus, model, config, nominal, noise)
    except PropagationError:
        # the input does not depend on the prediction; log the nominal one instead
        beliefs, xi = rollout(x0, xi0, inputs, nus, None, config, nominal, noise)
    return HorizonSolution(inputs, nus, beliefs, xi, float("nan"), Status.INFEASIBLE_FALLBACK, 0, float("nan"))


def solve(x0, xi0: float, constraints: Sequence[ConstraintSet], model: Optional[GPModel],
          warm_start: Optional[HorizonSolution], config: MPCConfig, nominal: NominalModel,
          path: ReferencePath, noise: ProcessNoise = ProcessNoise.zero(), u_prev=None) -> HorizonSolution:
    x0 = np.asarray(x0, dtype=float)
    if any(c.infeasible for c in constraints):
        return fallback_solution(x0, xi0, model, config, nominal, noise)

    N = config.Np
    n = 3 * N
    lo, hi = config.bounds()
    theta = _warm_start(warm_start, x0, config)
    if u_prev is None:
        u_prev = theta[[0, N]]
    prob = _Problem(x0, xi0, constraints, model, config, nominal, path, u_prev)

    h = np.full(n, config.fd_step)
    h[2 * N:] *= 10.0
    E = np.diag(h)
    alphas = 0.5 ** np.arange(config.max_backtracks + 1)
    damping = 1e-6

    cost0, _, _ = prob.evaluate(theta)
    cost = float(cost0[0])
    if not np.isfinite(cost):
        return fallback_solution(x0, xi0, model, config, nominal, noise)
    history = [cost]
    status = Status.ITERATION_CAPPED
    iterations = 0
    for it in range(config.max_iterations):
        iterations = it + 1
        batch = np.vstack([theta + E, theta - E])
        c_b, r_b, _ = prob.evaluate(batch)
        if not np.all(np.isfinite(c_b)):
            break  # a perturbation leaves the model's domain; keep the current iterate
        grad = (c_b[:n] - c_b[n:]) / (2.0 * h)
        J = ((r_b[:n] - r_b[n:]) / (2.0 * h)[:, None]).T

        pg = theta - np.clip(theta - grad, lo, hi)
        if np.max(np.abs(pg)) < config.grad_tol:
            status = Status.CONVERGED
            break

        pinned = ((theta <= lo) & (grad > 0)) | ((theta >= hi) & (grad < 0))
        free = ~pinned
        H = 2.0 * J.T @ J
        step = np.zeros(n)
        Hf = H[np.ix_(free, free)]
        diag = np.diag(Hf).copy()
        reg = damping * (diag + 1e-9 * max(diag.max(initial=0.0), 1.0))
        try:
            step[free] = np.linalg.solve(Hf + np.diag(reg), -grad[free])
        except np.linalg.LinAlgError:
            step[free] = -grad[free]
        if grad @ step >= 0.0:
            step = -grad

        trials = np.clip(theta[None, :] + alphas[:, None] * step[None, :], lo, hi)
        c_t, _, _ = prob.evaluate(trials)
        decrease = config.armijo * ((trials - theta) @ grad)
        ok = np.flatnonzero(c_t <= cost + decrease)
        if len(ok) == 0 or not c_t[ok[0]] < cost:
            status = Status.CONVERGED
            damping *= 10.0
            break
        j = ok[0]
        damping = damping / 3.0 if j == 0 else damping * 2.0**j
        rel = (cost - c_t[j]) / max(abs(cost), 1.0)
        theta, cost = trials[j], float(c_t[j])
        history.append(cost)
        if rel < 1e-13:
            status = Status.CONVERGED
            break

    U, nus = _unpack(theta, N)
    inputs, nus = U[0], nus[0]
    _, _, viol = prob.evaluate(theta)
    beliefs, xi = rollout(x0, xi0, inputs, nus, model, config, nominal, noise)
    sol = HorizonSolution(inputs, nus, beliefs, xi, cost, status, iterations, float(viol[0]), history)
    if sol.max_violation > config.fallback_violation:
        # brake only when braking is actually the safer plan
        fb = fallback_solution(x0, xi0, model, config, nominal, noise)
        _, _, fb_viol = prob.evaluate(_pack(fb.inputs, fb.nus))
        if fb_viol[0] < sol.max_violation:
            fb.max_violation = float(fb_viol[0])
            return fb
    return sol


def log_record(t: float, u, sol: HorizonSolution, constraints: Sequence[ConstraintSet], xi0: float) -> dict:
    rec = {
        "t": t,
        "delta": float(u[0]),
        "T": float(u[1]),
        "status": sol.status.value,
        "iterations": sol.iterations,
        "cost": sol.cost,
        "max_violation": sol.max_violation,
        "xi0": xi0,
        "phase": constraints[0].phase.value if constraints else Phase.NONE.value,
        "active": -1 if not constraints or constraints[0].active_obstacle is None else constraints[0].active_obstacle,
        "side": constraints[0].side.value if constraints else "left",
        "corr_k": float(constraints[0].A[2, 0]) if constraints else 0.0,
        "corr_ay": float(constraints[0].A[2, 1]) if constraints else -1.0,
        "corr_B3": float(constraints[0].B[2]) if constraints else 0.0,
    }
    means, variances = sol.means, sol.variances
    for k in range(len(means)):
        for i, name in enumerate(("X", "Y", "phi", "vx", "vy", "omega")):
            rec[f"pred{k}_{name}"] = float(means[k, i])
            rec[f"pvar{k}_{name}"] = float(variances[k, i])
    return rec


@dataclass(frozen=True)
class ControlContext:
    """Everything a control step needs besides the state and the GP."""

    config: MPCConfig
    nominal: NominalModel
    path: ReferencePath
    bounds: RoadBounds
    noise: ProcessNoise = ProcessNoise()
    detection_range: float = 20.0
    vehicle_length: float = 4.0
    vehicle_width: float = 1.6


def control_step(x, obstacles: Sequence[ObstacleState], model: Optional[GPModel],
                 previous: Optional[HorizonSolution], ctx: ControlContext, t: float = 0.0,
                 xi_hint: Optional[float] = None, u_prev=None):
    """One receding-horizon step: returns ``(u, solution, record)``."""
    x = np.asarray(x, dtype=float)
    cfg = ctx.config
    if xi_hint is None:
        xi_hint = previous.xi[1] if previous is not None else x[0] - ctx.path.knots[0]
    xi0 = project_progress(ctx.path, x[0], x[1], xi_hint)
    sides = dict(previous.sides) if previous is not None else {}
    constraints = horizon_constraints(
        x, obstacles, ctx.bounds, cfg.Np, cfg.Ts, cfg.predict_obstacles, ctx.detection_range,
        ctx.vehicle_width, ctx.vehicle_length, ctx.nominal.params.Lr, sides)
    for cs in constraints:
        if cs.active_obstacle is not None:
            sides.setdefault(cs.active_obstacle, cs.side)
    sol = solve(x, xi0, constraints, model, previous, cfg, ctx.nominal, ctx.path, ctx.noise, u_prev)
    sol.sides = sides
    u = sol.inputs[0].copy()
    return u, sol, log_record(t, u, sol, constraints, xi0)
