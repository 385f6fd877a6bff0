"""Arc-length parameterized reference path and the contouring cost terms."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)


class PathPoint(NamedTuple):
    Xc: np.ndarray
    Yc: np.ndarray
    Phic: np.ndarray
    Rc: np.ndarray
    clamped: np.ndarray


class ContouringErrors(NamedTuple):
    e_l: np.ndarray
    e_c: np.ndarray
    e_o: np.ndarray
    e_off: np.ndarray


@dataclass(frozen=True)
class BarrierParams:
    beta: float = 1000.0
    gamma: float = 4.0
    lam: float = -0.1
    c: float = 5.0

    def __post_init__(self):
        if self.beta <= 0 or self.gamma <= 0 or self.c <= 0:
            raise ValueError("barrier beta, gamma and c must be positive")


@dataclass(frozen=True)
class CostWeights:
    q_c: float = 20.0
    q_l: float = 50.0
    q_o: float = 20.0
    q_off: float = 180.0

    def __post_init__(self):
        if min(self.q_c, self.q_l, self.q_o, self.q_off) < 0:
            raise ValueError("cost weights must be non-negative")


def _segment_lengths(sx: CubicSpline, sy: CubicSpline, knots: np.ndarray) -> np.ndarray:
    a, b = knots[:-1, None], knots[1:, None]
    t = 0.5 * (b - a) * _GL_NODES[None, :] + 0.5 * (a + b)
    speed = np.hypot(sx(t, 1), sy(t, 1))
    return 0.5 * (b - a)[:, 0] * (speed @ _GL_WEIGHTS)


class ReferencePath:
    """Natural cubic spline through waypoints, parameterized by arc length."""

    def __init__(self, waypoints: Sequence[Sequence[float]], reparam_iters: int = 5):
        wp = np.asarray(waypoints, dtype=float)
        if wp.ndim != 2 or wp.shape[1] != 3 or len(wp) < 2:
            raise ValueError("need at least two (X, Y, half_width) waypoints")
        chords = np.hypot(*np.diff(wp[:, :2], axis=0).T)
        if np.any(chords <= 1e-9):
            raise ValueError("duplicate consecutive waypoints")
        if np.any(wp[:, 2] <= 0):
            raise ValueError("half-widths must be positive")

        knots = np.concatenate([[0.0], np.cumsum(chords)])
        for _ in range(reparam_iters):
            sx = CubicSpline(knots, wp[:, 0], bc_type="natural")
            sy = CubicSpline(knots, wp[:, 1], bc_type="natural")
            new = np.concatenate([[0.0], np.cumsum(_segment_lengths(sx, sy, knots))])
            converged = np.max(np.abs(new - knots)) <= 1e-10 * max(new[-1], 1.0)
            knots = new
            if converged:
                break
        self._sx = CubicSpline(knots, wp[:, 0], bc_type="natural")
        self._sy = CubicSpline(knots, wp[:, 1], bc_type="natural")
        self.knots = knots
        self.waypoints = wp
        self.half_widths = wp[:, 2]

    @property
    def length(self) -> float:
        return float(self.knots[-1])

    @classmethod
    def straight(cls, y: float, x_start: float, x_end: float, half_width: float) -> "ReferencePath":
        return cls([(x_start, y, half_width), (x_end, y, half_width)])

    def _clamp(self, xi):
        xi = np.asarray(xi, dtype=float)
        c = np.clip(xi, 0.0, self.length)
        return c, c != xi

    def position(self, xi):
        xi, _ = self._clamp(xi)
        return self._sx(xi), self._sy(xi)

    def tangent(self, xi):
        xi, _ = self._clamp(xi)
        return self._sx(xi, 1), self._sy(xi, 1)

    def evaluate(self, xi) -> PathPoint:
        xi, clamped = self._clamp(xi)
        dx, dy = self._sx(xi, 1), self._sy(xi, 1)
        rc = np.interp(xi, self.knots, self.half_widths)
        return PathPoint(self._sx(xi), self._sy(xi), np.arctan2(dy, dx), rc, clamped)

    def sample(self, step: float = 1.0) -> np.ndarray:
        xi = np.arange(0.0, self.length + 0.5 * step, step)
        p = self.evaluate(xi)
        return np.column_stack([xi, p.Xc, p.Yc, p.Phic, p.Rc])


def eval_path(path: ReferencePath, xi) -> PathPoint:
    return path.evaluate(xi)


def contouring_errors(X, Y, phi, path: ReferencePath, xi) -> ContouringErrors:
    p = path.evaluate(xi)
    dx, dy = p.Xc - X, p.Yc - Y
    c, s = np.cos(p.Phic), np.sin(p.Phic)
    e_l = c * dx + s * dy
    e_c = -s * dx + c * dy
    e_o = 1.0 - np.abs(c * np.cos(phi) + s * np.sin(phi))
    e_off = np.sqrt(e_l**2 + e_c**2) / p.Rc - 1.0
    return ContouringErrors(e_l, e_c, e_o, e_off)


def relaxed_barrier(e_off, p: BarrierParams):
    s = p.lam - np.asarray(e_off, dtype=float)
    return p.beta * (np.sqrt((p.c + p.gamma * s * s) / p.gamma) - s)


def stage_cost(X, Y, phi, xi, weights: CostWeights, barrier: BarrierParams, path: ReferencePath,
               square_barrier: bool = True):
    e = contouring_errors(X, Y, phi, path, xi)
    rb = relaxed_barrier(e.e_off, barrier)
    rb_term = rb * rb if square_barrier else rb
    return (weights.q_c * e.e_c**2 + weights.q_l * e.e_l**2 + weights.q_o * e.e_o**2
            + weights.q_off * rb_term)


def project_progress(path: ReferencePath, X: float, Y: float, xi_hint: float,
                     newton_iters: int = 10, window: float = 20.0) -> float:
    """Arc length of the closest path point near ``xi_hint``."""
    p = np.array([X, Y], dtype=float)

    def dist2(xi):
        px, py = path.position(xi)
        return (px - p[0]) ** 2 + (py - p[1]) ** 2

    def newton(xi):
        for _ in range(newton_iters):
            px, py = path.position(xi)
            tx, ty = path.tangent(xi)
            ax, ay = path._sx(np.clip(xi, 0, path.length), 2), path._sy(np.clip(xi, 0, path.length), 2)
            rx, ry = px - p[0], py - p[1]
            g = rx * tx + ry * ty
            h = tx * tx + ty * ty + rx * ax + ry * ay
            if h <= 1e-12:
                return None
            step = g / h
            xi = float(np.clip(xi - step, 0.0, path.length))
            if abs(step) < 1e-12:
                break
        return xi

    xi = newton(float(np.clip(xi_hint, 0.0, path.length)))
    stationary = xi is not None and abs(dist2(xi + 1e-6) - dist2(xi - 1e-6)) < 1e-8 and \
        abs(xi - xi_hint) <= window
    if not stationary:
        grid = np.linspace(max(0.0, xi_hint - window), min(path.length, xi_hint + window), 401)
        xi = newton(float(grid[np.argmin(dist2(grid))]))
        if xi is None:
            xi = float(grid[np.argmin(dist2(grid))])
    return float(xi)
