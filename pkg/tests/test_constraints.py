import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gpmpc.constraints import (
    ObstacleState, Phase, RoadBounds, Side, corridor_infeasible, detect, horizon_constraints,
    left_overtaking_constraint, merge_constraints, overtaking_constraint, right_overtaking_constraint, road_only,
    safe_zone, side_decision,
)
from oracles import corridor_left


def ego_at(X, Y, phi=0.0, vx=20.0):
    return np.array([X, Y, phi, vx, 0.0, 0.0])


def template_ok(cs, bounds):
    assert np.array_equal(cs.A[0], [0, 1, 0, 0, 0, 0])
    assert np.array_equal(cs.A[1], [0, -1, 0, 0, 0, 0])
    assert cs.B[0] == bounds.L1 and cs.B[1] == bounds.L2
    assert np.all(cs.A[2, 2:] == 0)


# ---------------------------------------------------------------- safe zone and detection

def test_safe_zone_corners(lead1):
    z = safe_zone(lead1)
    assert (z.x_min, z.x_max) == (21.0, 29.0)
    assert z.y_min == pytest.approx(-3.475, abs=1e-12) and z.y_max == pytest.approx(-0.275, abs=1e-12)


def test_safe_zone_zero_size_and_translation(lead1):
    z = safe_zone(ObstacleState(5, 1, 0, 0, 0))
    assert (z.x_min, z.x_max, z.y_min, z.y_max) == (5, 5, 1, 1)
    z0, z1 = safe_zone(lead1), safe_zone(lead1.advanced(0.5))
    assert z1.x_min - z0.x_min == pytest.approx(6.0) and z1.y_max == z0.y_max


def test_detect_examples(lead1):
    assert detect(ego_at(25 - 19.9, -1.875), lead1)
    assert not detect(ego_at(0.0, -1.875), lead1)
    assert not detect(ego_at(40.0, -1.875), lead1)


def test_detect_keeps_obstacle_until_fully_overtaken(lead1):
    # alongside and just past the zone front the obstacle stays detected
    assert detect(ego_at(27.0, 1.0), lead1)
    assert detect(ego_at(30.0, 1.0), lead1)
    assert not detect(ego_at(29.0 + 4.0 + 1.5 + 0.01, 1.0), lead1)


def test_side_decision_examples():
    obs = ObstacleState(20, -1.875)
    assert side_decision(ego_at(0, -1.875), obs) is Side.LEFT
    assert side_decision(ego_at(0, -1.375), obs) is Side.LEFT
    assert side_decision(ego_at(0, -2.375), obs) is Side.RIGHT
    # body frame: a small heading rotates the offset
    assert side_decision(ego_at(0, -1.875, phi=0.1), obs, tie_tol=0.0, frame="body") is Side.LEFT
    assert side_decision(ego_at(0, -1.875, phi=-0.1), obs, tie_tol=0.0, frame="body") is Side.RIGHT
    assert side_decision(ego_at(0, -1.875, phi=-0.1), obs, tie_tol=0.0, frame="road") is Side.LEFT
    with pytest.raises(ValueError):
        side_decision(ego_at(0, 0), obs, frame="world")


# ---------------------------------------------------------------- left corridor branches

def test_no_detection(lead1, bounds):
    cs = left_overtaking_constraint(ego_at(0, -1.875), lead1, bounds, detected=False)
    template_ok(cs, bounds)
    assert np.array_equal(cs.A[2], [0, -1, 0, 0, 0, 0])
    assert np.array_equal(cs.B, [3.75, 3.75, 3.75])
    assert cs.phase is Phase.NONE and cs.active_obstacle is None


def test_behind_slope_example(lead1, bounds):
    cs = left_overtaking_constraint(ego_at(10, -1.875), lead1, bounds, detected=True)
    template_ok(cs, bounds)
    k, b = cs.A[2, 0], -cs.B[2]
    assert round(k, 6) == 0.145455
    assert round(b, 4) == -3.3295
    assert round(cs.B[2], 4) == 3.3295
    assert (k, b) == pytest.approx(corridor_left((10, -1.875), 21, 29, -0.275, 3.75, 0.8), abs=1e-12)
    assert cs.phase is Phase.BEHIND and cs.active_obstacle == 0


def test_behind_but_already_above(lead1, bounds):
    cs = left_overtaking_constraint(ego_at(15, 0.5), lead1, bounds, detected=True)
    assert cs.A[2, 0] == 0.0 and cs.B[2] == pytest.approx(-0.525)
    assert cs.phase is Phase.ABOVE


def test_alongside_example(lead1, bounds):
    for X in (21.5, 25.0, 29.0):
        cs = left_overtaking_constraint(ego_at(X, 1.0), lead1, bounds, detected=True)
        assert cs.A[2, 0] == 0.0
        assert -cs.B[2] == pytest.approx(0.525, abs=1e-12)
        assert cs.phase is Phase.ALONGSIDE


def test_passed_reverts_to_road(lead1, bounds):
    cs = left_overtaking_constraint(ego_at(30, 1.0), lead1, bounds, detected=True)
    assert np.array_equal(cs.A[2], [0, -1, 0, 0, 0, 0]) and cs.B[2] == 3.75
    assert cs.phase is Phase.PASSED


@given(st.floats(-20, 40), st.floats(-3.7, 3.7))
def test_left_matches_oracle(X, Y):
    obs, bounds = ObstacleState(25, -1.875, 12, 4, 1.6), RoadBounds()
    cs = left_overtaking_constraint(ego_at(X, Y), obs, bounds, detected=True)
    if abs(X - 21) < 1e-6:
        return
    k, b = corridor_left((X, Y), 21, 29, -0.275, 3.75, 0.8)
    assert cs.A[2, 0] == pytest.approx(k, abs=1e-12)
    assert -cs.B[2] == pytest.approx(b, abs=1e-9)


def test_anchor_sets_line_origin(lead1, bounds):
    cs = left_overtaking_constraint(ego_at(10, -1.875), lead1, bounds, True, anchor=ego_at(0, -1.875))
    assert cs.A[2, 0] == pytest.approx(1.6 / 21)


# ---------------------------------------------------------------- right corridor

@given(st.floats(-20, 40), st.floats(-3.7, 3.7), st.floats(-3, 3), st.booleans())
def test_right_is_mirror_of_left(X, Y, oy, detected):
    obs, bounds = ObstacleState(25, oy, 12, 4, 1.6), RoadBounds(3.75, 3.0, 0.8)
    right = right_overtaking_constraint(ego_at(X, Y), obs, bounds, detected)
    left = left_overtaking_constraint(ego_at(X, -Y), obs.reflected(), bounds.reflected(), detected)
    refl = left.reflected()
    assert np.array_equal(right.A, refl.A) and np.array_equal(right.B, refl.B)
    assert right.side is Side.RIGHT and right.phase is left.phase
    template_ok(right, bounds)


def test_right_examples(bounds):
    obs = ObstacleState(25, 1.875, 12, 4, 1.6)
    cs = right_overtaking_constraint(ego_at(0, 0), obs, bounds, detected=False)
    assert np.array_equal(cs.B, [3.75, 3.75, 3.75])
    assert np.array_equal(cs.A[2], [0, 1, 0, 0, 0, 0])
    cs = right_overtaking_constraint(ego_at(10, 1.875), obs, bounds, detected=True)
    # row k X + Y <= 3.3295, i.e. Y <= -k X + 3.3295 through the corner (21, 0.275)
    assert cs.A[2, 1] == 1.0
    assert cs.A[2, 0] == pytest.approx(0.145455, abs=1e-6)
    assert cs.B[2] == pytest.approx(3.3295, abs=1e-4)
    assert cs.A[2, 0] * 21 + 0.275 == pytest.approx(cs.B[2], abs=1e-12)
    cs = right_overtaking_constraint(ego_at(25, -1.0), obs, bounds, detected=True)
    assert cs.B[2] == pytest.approx(-0.525, abs=1e-12)


# ---------------------------------------------------------------- rasterization

def test_alongside_raster_excludes_zone(lead1, bounds):
    cs = left_overtaking_constraint(ego_at(25, 1.0), lead1, bounds, detected=True)
    z = safe_zone(lead1)
    xs = np.arange(z.x_min, z.x_max + 1e-9, 0.05)
    ys = np.arange(-3.75, 3.75 + 1e-9, 0.05)
    XX, YY = np.meshgrid(xs, ys)
    pts = np.zeros(XX.shape + (6,))
    pts[..., 0], pts[..., 1] = XX, YY
    feasible = np.all(pts @ cs.A.T <= cs.B + 1e-12, axis=-1)
    inside = z.contains(XX, YY)
    assert inside.sum() > 0
    assert not np.any(feasible & inside)
    assert np.any(feasible)


# ---------------------------------------------------------------- merge and infeasibility

def test_merge_single_and_nearest(bounds):
    o1 = ObstacleState(25, -1.875, 12, ident=0)
    o2 = ObstacleState(35, -1.875, 10, ident=1)
    ego = ego_at(10, -1.875)
    single = merge_constraints(ego, [o1], bounds)
    assert single.active_obstacle == 0
    assert np.array_equal(single.A, left_overtaking_constraint(ego, o1, bounds, True).A)
    both = merge_constraints(ego, [o2, o1], bounds)
    assert both.active_obstacle == 0
    assert merge_constraints(ego_at(-30, -1.875), [o1, o2], bounds).active_obstacle is None
    template_ok(both, bounds)


def test_merge_skips_passed_obstacle(bounds):
    o1 = ObstacleState(25, -1.875, 12, ident=0)
    o2 = ObstacleState(45, -1.875, 10, ident=1)
    cs = merge_constraints(ego_at(30, 1.0), [o1, o2], bounds)
    assert cs.active_obstacle == 1


def test_infeasible_corridor_flag():
    narrow = RoadBounds(1.0, 3.75, 0.8)
    obs = ObstacleState(25, -1.875, 12)
    cs = left_overtaking_constraint(ego_at(25, 0.0), obs, narrow, True)
    assert corridor_infeasible(cs, 1.6)
    # the right side does not fit either on this road, so the set is flagged
    out = overtaking_constraint(ego_at(25, 0.0), obs, narrow, 1.6)
    assert out.infeasible
    ok = left_overtaking_constraint(ego_at(25, 1.0), obs, RoadBounds(), True)
    assert not corridor_infeasible(ok, 1.6)
    assert not corridor_infeasible(road_only(RoadBounds()), 1.6)


def test_switch_side_when_only_other_fits():
    bounds = RoadBounds(1.0, 3.75, 0.8)
    obs = ObstacleState(25, 0.5, 12)
    cs = overtaking_constraint(ego_at(25, 0.0), obs, bounds, 1.6, side=Side.LEFT)
    assert cs.side is Side.RIGHT and not cs.infeasible


# ---------------------------------------------------------------- horizon

def test_horizon_translates_with_obstacle(lead1, bounds):
    ego = ego_at(10, -1.875)
    sets = horizon_constraints(ego, [lead1], bounds, 10, 0.05)
    assert len(sets) == 10
    for k, cs in enumerate(sets, 1):
        template_ok(cs, bounds)
        k_slope = cs.A[2, 0]
        assert k_slope == pytest.approx(1.6 / 11, abs=1e-12)
        # line passes through the moved corner
        cx = 21 + 12 * k * 0.05
        assert k_slope * cx - (-0.275) == pytest.approx(cs.B[2], abs=1e-9)
    static = horizon_constraints(ego, [lead1], bounds, 10, 0.05, predict_obstacles=False)
    assert all(np.array_equal(s.A, static[0].A) for s in static)
