"""Linear state constraints ``A x <= B`` for road bounds and overtaking corridors.

Row 1 and 2 bound the lateral position by the road; row 3 is the corridor
line ``Y >= k X + b`` (left pass) around the active lead vehicle's safe zone.
The corridor goes through three phases: while the ego is behind the zone it
aims at the zone's rear corner, alongside the zone it keeps a lateral margin
above it, and once past the front corner the row falls back to the road bound.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .dynamics import STATE_DIM


class Side(str, Enum):
    LEFT = "left"
    RIGHT = "right"


class Phase(str, Enum):
    NONE = "none"
    BEHIND = "behind"
    ABOVE = "above"  # still behind, but already beside the zone laterally
    ALONGSIDE = "alongside"
    PASSED = "passed"


@dataclass(frozen=True)
class ObstacleState:
    X: float
    Y: float
    v: float = 0.0
    length: float = 4.0
    width: float = 1.6
    ident: int = 0

    def __post_init__(self):
        if self.length < 0 or self.width < 0:
            raise ValueError("obstacle dimensions must be non-negative")

    def advanced(self, dt: float) -> "ObstacleState":
        return replace(self, X=self.X + self.v * dt)

    def reflected(self) -> "ObstacleState":
        return replace(self, Y=-self.Y)


@dataclass(frozen=True)
class SafeZone:
    X: float
    Y: float
    half_length: float
    half_width: float

    @property
    def x_min(self) -> float:
        return self.X - self.half_length

    @property
    def x_max(self) -> float:
        return self.X + self.half_length

    @property
    def y_min(self) -> float:
        return self.Y - self.half_width

    @property
    def y_max(self) -> float:
        return self.Y + self.half_width

    def contains(self, X, Y):
        return (np.abs(np.asarray(X) - self.X) < self.half_length) & (np.abs(np.asarray(Y) - self.Y) < self.half_width)


@dataclass(frozen=True)
class RoadBounds:
    L1: float = 3.75
    L2: float = 3.75
    epsilon: float = 0.8

    def __post_init__(self):
        if self.L1 <= 0 or self.L2 <= 0:
            raise ValueError("road bounds must be positive")

    def reflected(self) -> "RoadBounds":
        return replace(self, L1=self.L2, L2=self.L1)


@dataclass(frozen=True)
class ConstraintSet:
    A: np.ndarray
    B: np.ndarray
    active_obstacle: Optional[int] = None
    phase: Phase = Phase.NONE
    side: Side = Side.LEFT
    infeasible: bool = False

    def violation(self, x) -> np.ndarray:
        return np.maximum(0.0, np.asarray(x)[..., :STATE_DIM] @ self.A.T - self.B)

    def reflected(self) -> "ConstraintSet":
        """Image under Y -> -Y, keeping rows 1-2 in template form."""
        A = self.A.copy()
        A[:, 1] *= -1.0
        A[[0, 1]] = A[[1, 0]]
        B = self.B.copy()
        B[[0, 1]] = B[[1, 0]]
        side = Side.RIGHT if self.side is Side.LEFT else Side.LEFT
        return replace(self, A=A, B=B, side=side)


def _template(bounds: RoadBounds, k: float, b: float, sign_y: float = -1.0) -> tuple[np.ndarray, np.ndarray]:
    A = np.zeros((3, STATE_DIM))
    A[0, 1] = 1.0
    A[1, 1] = -1.0
    A[2, 0] = k
    A[2, 1] = sign_y
    return A, np.array([bounds.L1, bounds.L2, -b])


def road_only(bounds: RoadBounds) -> ConstraintSet:
    A, B = _template(bounds, 0.0, -bounds.L2)
    return ConstraintSet(A, B)


def safe_zone(obs: ObstacleState) -> SafeZone:
    return SafeZone(obs.X, obs.Y, obs.length, obs.width)


def fully_overtaken(ego, obs: ObstacleState, ego_length: float = 4.0, rear_offset: float = 1.5) -> bool:
    """Ego rear axle ahead of the zone's front edge plus one vehicle length."""
    return ego[0] - rear_offset > safe_zone(obs).x_max + ego_length


def detect(ego, obs: ObstacleState, detection_range: float = 20.0, ego_length: float = 4.0,
           rear_offset: float = 1.5) -> bool:
    if fully_overtaken(ego, obs, ego_length, rear_offset):
        return False
    return obs.X - ego[0] < detection_range


def side_decision(ego, obs: ObstacleState, tie_tol: float = 0.25, frame: str = "road") -> Side:
    """Left when the obstacle sits at non-positive lateral offset from the ego.

    ``frame="road"`` measures the offset along the road's Y axis; ``"body"``
    rotates it into the ego body frame, which flips with small heading
    wobbles at long range. Offsets within ``tie_tol`` count as a tie (left).
    """
    dx, dy = obs.X - ego[0], obs.Y - ego[1]
    if frame == "body":
        dy = -np.sin(ego[2]) * dx + np.cos(ego[2]) * dy
    elif frame != "road":
        raise ValueError(f"unknown frame {frame!r}")
    return Side.LEFT if dy <= tie_tol else Side.RIGHT


def left_overtaking_constraint(ego, obs: ObstacleState, bounds: RoadBounds, detected: bool,
                               anchor=None) -> ConstraintSet:
    """Corridor for passing on the left.

    ``ego`` decides the phase; ``anchor`` (default ``ego``) is the point the
    corridor line is drawn from while behind the zone.
    """
    anchor = ego if anchor is None else anchor
    zone = safe_zone(obs)
    rear_x, left_y, front_x = zone.x_min, zone.y_max, zone.x_max
    phase = Phase.NONE
    k, b = 0.0, -bounds.L2
    if detected:
        ego_x, ego_y = ego[0], ego[1]
        if ego_x <= rear_x:
            if ego_y > left_y:
                phase, k, b = Phase.ABOVE, 0.0, left_y + bounds.epsilon
            else:
                ax, ay = anchor[0], anchor[1]
                phase = Phase.BEHIND
                if rear_x - ax > 1e-9:
                    k = (left_y - ay) / (rear_x - ax)
                    b = left_y - k * rear_x
                else:
                    k, b = 0.0, left_y + bounds.epsilon
        elif ego_x <= front_x:
            phase, k, b = Phase.ALONGSIDE, 0.0, left_y + bounds.epsilon
        else:
            phase = Phase.PASSED
    A, B = _template(bounds, k, b)
    active = obs.ident if detected else None
    return ConstraintSet(A, B, active, phase, Side.LEFT)


def right_overtaking_constraint(ego, obs: ObstacleState, bounds: RoadBounds, detected: bool,
                                anchor=None) -> ConstraintSet:
    ego_r = _reflect_point(ego)
    anchor_r = None if anchor is None else _reflect_point(anchor)
    left = left_overtaking_constraint(ego_r, obs.reflected(), bounds.reflected(), detected, anchor_r)
    return left.reflected()


def _reflect_point(p):
    p = np.array(p, dtype=float)
    p[1] = -p[1]
    if len(p) > 2:
        p[2] = -p[2]
    return p


def corridor_infeasible(cs: ConstraintSet, vehicle_width: float) -> bool:
    """Lateral corridor at the line's own X narrower than the vehicle.

    Only horizontal corridor lines (k = 0) can pinch the road shut.
    """
    if cs.A[2, 0] != 0.0:
        return False
    upper, lower = cs.B[0], -cs.B[1]
    if cs.A[2, 1] < 0:
        lower = max(lower, -cs.B[2])
    else:
        upper = min(upper, cs.B[2])
    return lower > upper - vehicle_width


def overtaking_constraint(ego, obs: ObstacleState, bounds: RoadBounds, vehicle_width: float,
                          anchor=None, side: Optional[Side] = None) -> ConstraintSet:
    """Side choice with a switch to the other side when the chosen one cannot fit.

    ``side`` overrides the geometric decision (used to keep an earlier choice).
    """
    side = side_decision(ego, obs) if side is None else side
    gen = {Side.LEFT: left_overtaking_constraint, Side.RIGHT: right_overtaking_constraint}
    cs = gen[side](ego, obs, bounds, True, anchor)
    if corridor_infeasible(cs, vehicle_width):
        other = Side.RIGHT if side is Side.LEFT else Side.LEFT
        alt = gen[other](ego, obs, bounds, True, anchor)
        if not corridor_infeasible(alt, vehicle_width):
            return alt
        return replace(cs, infeasible=True)
    return cs


def merge_constraints(ego, obstacles: Sequence[ObstacleState], bounds: RoadBounds,
                      detection_range: float = 20.0, vehicle_width: float = 1.6,
                      vehicle_length: float = 4.0, rear_offset: float = 1.5, anchor=None,
                      lead_time: float = 0.0, sides: Optional[dict] = None) -> ConstraintSet:
    """Road rows plus the corridor of the nearest detected, not yet passed obstacle.

    ``lead_time`` moves ``anchor`` forward with the chosen obstacle, so a
    corridor predicted ``lead_time`` seconds ahead is the current one carried
    along with the lead vehicle. ``sides`` maps obstacle ids to a side
    already chosen for them.
    """
    candidates = []
    for obs in obstacles:
        if not detect(ego, obs, detection_range, vehicle_length, rear_offset):
            continue
        if ego[0] > safe_zone(obs).x_max:
            continue
        candidates.append(obs)
    if not candidates:
        return road_only(bounds)
    nearest = min(candidates, key=lambda o: (abs(o.X - ego[0]), o.ident))
    if anchor is not None and lead_time:
        anchor = np.array(anchor, dtype=float)
        anchor[0] += nearest.v * lead_time
    side = None if sides is None else sides.get(nearest.ident)
    return overtaking_constraint(ego, nearest, bounds, vehicle_width, anchor, side)


def horizon_constraints(ego, obstacles: Sequence[ObstacleState], bounds: RoadBounds, Np: int, Ts: float,
                        predict_obstacles: bool = True, detection_range: float = 20.0,
                        vehicle_width: float = 1.6, vehicle_length: float = 4.0,
                        rear_offset: float = 1.5, sides: Optional[dict] = None) -> list[ConstraintSet]:
    """One constraint set per predicted state ``k = 1..Np``.

    With ``predict_obstacles`` the lead vehicles and the ego (for phase
    classification) are advanced at constant speed; the corridor line is the
    one drawn from the ego's current position, translated with the obstacle.
    """
    ego = np.asarray(ego, dtype=float)
    if not predict_obstacles:
        cs = merge_constraints(ego, obstacles, bounds, detection_range, vehicle_width, vehicle_length,
                               rear_offset, sides=sides)
        return [cs] * Np
    speed = ego[3] * np.cos(ego[2]) - ego[4] * np.sin(ego[2])
    sets = []
    for k in range(1, Np + 1):
        ego_k = ego.copy()
        ego_k[0] += speed * k * Ts
        obs_k = [o.advanced(k * Ts) for o in obstacles]
        sets.append(merge_constraints(ego_k, obs_k, bounds, detection_range, vehicle_width,
                                      vehicle_length, rear_offset, anchor=ego, lead_time=k * Ts, sides=sides))
    return sets
