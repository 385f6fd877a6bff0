"""Acceptance criteria 1-10, one test each.

Every test records a ``CRITERION n: PASS/FAIL - detail`` line, printed again
in the terminal summary.
"""

import filecmp
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from gpmpc.cli import main
from gpmpc.constraints import (
    ObstacleState, RoadBounds, left_overtaking_constraint, right_overtaking_constraint, safe_zone,
)
from gpmpc.dynamics import BD, NominalModel, ProcessNoise
from gpmpc.gp import (
    GPDictionary, GPModel, Hyperparams, default_hyperparams, insert_with_eviction, nll, posterior,
    posterior_mean_jacobian,
)
from gpmpc.path import BarrierParams, ReferencePath, contouring_errors, relaxed_barrier
from gpmpc.propagation import StateBelief, dynamics_jacobian, propagate_cov
from gpmpc.sim import LeadVehicle, Scenario, run_episode, two_phase_experiment

from criteria import record_criterion
from oracles import block_sandwich, brute_force_eviction, corridor_left, dense_nll, dense_posterior

SEEDS = (0, 1, 2, 3, 4)


def random_hp(rng):
    return Hyperparams(rng.uniform(0.5, 3.0, 8), rng.uniform(0.5, 2.0), rng.uniform(0.01, 0.5))


def random_state(rng):
    return np.array([rng.uniform(0, 200), rng.uniform(-3, 3), rng.uniform(-0.3, 0.3), rng.uniform(12, 30),
                     rng.uniform(-1, 1), rng.uniform(-0.5, 0.5)])


def random_input(rng):
    return np.array([rng.uniform(-0.3, 0.3), rng.uniform(-1, 1)])


def random_state_model(rng, n):
    """GP over plausible (state, input) points with random SE hyperparameters."""
    Z = np.array([np.concatenate([random_state(rng), random_input(rng)]) for _ in range(n)])
    scale = np.array([50, 1.5, 0.2, 5, 0.5, 0.3, 0.2, 0.6])
    hps = [Hyperparams(scale * rng.uniform(0.5, 2.0, 8), rng.uniform(0.01, 0.5), rng.uniform(1e-3, 1e-2))
           for _ in range(3)]
    return GPModel(hps, GPDictionary(Z, rng.normal(size=(n, 3)) * 0.3, n_max=n)), Z


# ---------------------------------------------------------------- 1

def test_criterion_1_gp_oracle_equivalence():
    rng = np.random.default_rng(1001)
    cases = []
    for _ in range(200):
        n = int(rng.integers(1, 51))
        hps = [random_hp(rng) for _ in range(3)]
        Z, Y = rng.normal(size=(n, 8)), rng.normal(size=(n, 3))
        cases.append((Z, Y, hps, rng.normal(size=(3, 8))))

    t0 = time.perf_counter()
    got = []
    for Z, Y, hps, Q in cases:
        m = GPModel(hps, GPDictionary(Z, Y, n_max=len(Z)))
        got.append(([posterior(m, q) for q in Q], [nll(m, d) for d in range(3)]))
    elapsed = time.perf_counter() - t0

    worst = 0.0
    for (Z, Y, hps, Q), (posts, nlls) in zip(cases, got):
        for d in range(3):
            hp = hps[d]
            for q, p in zip(Q, posts):
                mu, var = dense_posterior(Z, Y[:, d], q, hp.lengthscales, hp.sigma_f2, hp.sigma_n2)
                worst = max(worst, abs(p.mu_d[d] - mu), abs(p.Sigma_d[d, d] - var))
            worst = max(worst, abs(nlls[d] - dense_nll(Z, Y[:, d], hp.lengthscales, hp.sigma_f2, hp.sigma_n2)))
    ok = worst <= 1e-9 and elapsed < 10.0
    record_criterion(1, ok, f"max abs deviation {worst:.2e} (tol 1e-9), package time {elapsed:.2f}s (< 10s)")
    assert worst <= 1e-9
    assert elapsed < 10.0


# ---------------------------------------------------------------- 2

def test_criterion_2_eviction_brute_force():
    rng = np.random.default_rng(1002)
    agree = 0
    for _ in range(100):
        n_max = int(rng.integers(1, 11))
        hp = random_hp(rng)
        Z = rng.normal(size=(n_max + 1, 8))
        d = GPDictionary(Z[:-1], rng.normal(size=(n_max, 3)), n_max=n_max)
        _, dropped = insert_with_eviction(d, Z[-1], rng.normal(size=3), hp)
        want, _ = brute_force_eviction(Z, hp.lengthscales, hp.sigma_f2, hp.sigma_n2)
        agree += dropped == want
    record_criterion(2, agree == 100, f"{agree}/100 dropped indices agree with exhaustive search")
    assert agree == 100


# ---------------------------------------------------------------- 3

def test_criterion_3_propagation():
    rng = np.random.default_rng(1003)
    nominal = NominalModel()
    worst_sandwich, worst_mc = 0.0, 0.0
    for _ in range(20):
        model, _ = random_state_model(rng, int(rng.integers(5, 30)))
        x, u = random_state(rng), random_input(rng)
        noise = ProcessNoise(*rng.uniform(1e-5, 1e-3, 3))
        z = np.concatenate([x, u])
        J = posterior_mean_jacobian(model, z)
        Sd = posterior(model, z).Sigma_d
        R = rng.normal(size=(6, 6)) * np.array([0.3, 0.1, 0.01, 0.1, 0.05, 0.02])[:, None]
        Sx = R @ R.T * 1e-2
        # keep the joint covariance a valid covariance
        while np.linalg.eigvalsh(Sd + noise.cov - J @ Sx @ J.T).min() < 0:
            Sx *= 0.5
        A = dynamics_jacobian(x, u, nominal)
        got = propagate_cov(StateBelief(x, Sx), u, model, noise, nominal)
        want, joint = block_sandwich(A, Sx, Sd, J, noise.cov)
        worst_sandwich = max(worst_sandwich, np.max(np.abs(got - want)))

        samples = rng.multivariate_normal(np.zeros(9), joint, size=100_000, method="eigh")
        out = samples @ np.hstack([A, BD]).T
        emp = np.cov(out.T)
        worst_mc = max(worst_mc, np.linalg.norm(emp - got) / np.linalg.norm(got))
    ok = worst_sandwich <= 1e-10 and worst_mc <= 0.03
    record_criterion(3, ok, f"block oracle max deviation {worst_sandwich:.2e} (tol 1e-10); "
                            f"Monte Carlo worst relative Frobenius {worst_mc:.4f} (tol 0.03)")
    assert worst_sandwich <= 1e-10
    assert worst_mc <= 0.03


# ---------------------------------------------------------------- 4

def test_criterion_4_jacobians():
    rng = np.random.default_rng(1004)
    nominal = NominalModel()
    worst_gp, worst_dyn = 0.0, 0.0
    for _ in range(100):
        model, _ = random_state_model(rng, int(rng.integers(1, 40)))
        # query near a dictionary point so the Jacobian is not vanishingly small
        z = model.dictionary.Z[rng.integers(len(model))] + rng.normal(size=8) * 0.1
        Jg = posterior_mean_jacobian(model, z)
        fd = np.zeros((3, 6))
        for j in range(6):
            h = 1e-5 * max(1.0, abs(z[j]))
            e = np.zeros(8)
            e[j] = h
            fd[:, j] = (model.mean(z + e) - model.mean(z - e)) / (2 * h)
        worst_gp = max(worst_gp, np.linalg.norm(Jg - fd) / max(np.linalg.norm(fd), 1e-12))

        x, u = random_state(rng), random_input(rng)
        A = dynamics_jacobian(x, u, nominal)
        ref = np.zeros((6, 6))
        for j in range(6):
            h = 1e-4 * max(1.0, abs(x[j]))
            e = np.zeros(6)
            e[j] = h
            ref[:, j] = (nominal.step(x + e, u) - nominal.step(x - e, u)) / (2 * h)
        worst_dyn = max(worst_dyn, np.linalg.norm(A - ref) / np.linalg.norm(ref))
    ok = worst_gp <= 1e-5 and worst_dyn <= 1e-4
    record_criterion(4, ok, f"GP mean Jacobian worst relative error {worst_gp:.2e} (tol 1e-5); "
                            f"dynamics Jacobian {worst_dyn:.2e} (tol 1e-4)")
    assert worst_gp <= 1e-5
    assert worst_dyn <= 1e-4


# ---------------------------------------------------------------- 5

def test_criterion_5_contouring_geometry():
    rng = np.random.default_rng(1005)
    wp = [(0, -1.875, 3.75), (40, -1.0, 3.75), (80, 2.0, 3.75), (120, 0.0, 3.75), (200, -1.875, 3.75)]
    path = ReferencePath(wp)
    xi = rng.uniform(0, path.length, 10_000)
    p = path.evaluate(xi)
    X = p.Xc + rng.uniform(-10, 10, xi.size)
    Y = p.Yc + rng.uniform(-10, 10, xi.size)
    phi = rng.uniform(-np.pi, np.pi, xi.size)
    e = contouring_errors(X, Y, phi, path, xi)
    d2 = (p.Xc - X) ** 2 + (p.Yc - Y) ** 2
    worst = float(np.max(np.abs(e.e_l**2 + e.e_c**2 - d2)))
    bp = BarrierParams()
    rb = float(relaxed_barrier(bp.lam, bp))
    barrier_dev = abs(rb - bp.beta * np.sqrt(bp.c / bp.gamma))
    ok = worst <= 1e-12 and barrier_dev <= 1e-9 and round(rb, 3) == 1118.034
    record_criterion(5, ok, f"norm identity max abs deviation {worst:.2e} on 1e4 poses (tol 1e-12); "
                            f"barrier at lambda {rb:.6f} (deviation {barrier_dev:.1e})")
    assert worst <= 1e-12
    assert barrier_dev <= 1e-9
    assert round(rb, 3) == 1118.034


# ---------------------------------------------------------------- 6

def test_criterion_6_constraint_generator():
    bounds = RoadBounds(3.75, 3.75, 0.8)
    lead = ObstacleState(25.0, -1.875, 12.0, 4.0, 1.6, 0)
    ego = lambda X, Y: np.array([X, Y, 0.0, 20.0, 0.0, 0.0])
    checks = {}

    z = safe_zone(lead)
    checks["safe zone corners"] = (z.x_min, z.x_max, round(z.y_min, 12), round(z.y_max, 12)) == \
        (21.0, 29.0, -3.475, -0.275)

    cs = left_overtaking_constraint(ego(0, -1.875), lead, bounds, detected=False)
    checks["no detection"] = np.array_equal(cs.A[2], [0, -1, 0, 0, 0, 0]) and np.array_equal(cs.B, [3.75] * 3)

    cs = left_overtaking_constraint(ego(10, -1.875), lead, bounds, detected=True)
    k, b = cs.A[2, 0], -cs.B[2]
    checks["slope branch"] = (round(k, 6), round(b, 4), round(cs.B[2], 4)) == (0.145455, -3.3295, 3.3295) and \
        np.allclose((k, b), corridor_left((10, -1.875), 21, 29, -0.275, 3.75, 0.8), atol=1e-12)

    cs = left_overtaking_constraint(ego(15, 0.5), lead, bounds, detected=True)
    checks["beside corner while behind"] = cs.A[2, 0] == 0.0 and abs(-cs.B[2] - 0.525) < 1e-12

    cs = left_overtaking_constraint(ego(25, 1.0), lead, bounds, detected=True)
    checks["alongside"] = cs.A[2, 0] == 0.0 and abs(-cs.B[2] - 0.525) < 1e-12
    alongside = cs

    cs = left_overtaking_constraint(ego(30, 1.0), lead, bounds, detected=True)
    checks["passed"] = np.array_equal(cs.A[2], [0, -1, 0, 0, 0, 0]) and cs.B[2] == 3.75

    mirror = ObstacleState(25.0, 1.875, 12.0, 4.0, 1.6, 0)
    r = right_overtaking_constraint(ego(10, 1.875), mirror, bounds, detected=True)
    checks["mirrored slope"] = abs(r.A[2, 0] - k) < 1e-15 and r.A[2, 1] == 1.0 and abs(r.B[2] + b) < 1e-15
    r = right_overtaking_constraint(ego(0, 1.875), mirror, bounds, detected=False)
    checks["mirrored no detection"] = np.array_equal(r.B, [3.75] * 3)

    xs = np.arange(z.x_min, z.x_max + 1e-9, 0.05)
    ys = np.arange(-3.75, 3.75 + 1e-9, 0.05)
    XX, YY = np.meshgrid(xs, ys)
    pts = np.zeros(XX.shape + (6,))
    pts[..., 0], pts[..., 1] = XX, YY
    feasible = np.all(pts @ alongside.A.T <= alongside.B, axis=-1)
    bad = int(np.sum(feasible & z.contains(XX, YY)))
    checks["rasterization"] = bad == 0

    failed = [name for name, ok in checks.items() if not ok]
    record_criterion(6, not failed, f"{len(checks) - len(failed)}/{len(checks)} branch checks pass; "
                                    f"{bad} feasible grid points inside the zone at 0.05 m"
                                    + (f"; failed: {failed}" if failed else ""))
    assert not failed


# ---------------------------------------------------------------- 7 and 10

@pytest.fixture(scope="session")
def experiments():
    scenario = Scenario()
    out = {}
    for seed in SEEDS:
        t0 = time.perf_counter()
        res = two_phase_experiment(scenario, seed)
        out[seed] = (res, time.perf_counter() - t0)
    return out


@pytest.mark.slow
def test_criterion_7_scenario_reproduction(experiments):
    gp = {s: r.gpmpc for s, (r, _) in experiments.items()}
    nm = {s: r.nmpc for s, (r, _) in experiments.items()}
    walls = [w for _, w in experiments.values()]
    med = lambda ms, f: float(np.median([getattr(m, f) for m in ms.values()]))
    safe = all(m.overtakes == 2 and m.zone_entries == 0 for m in gp.values())
    total = med(gp, "e_total") < med(nm, "e_total")
    vx = med(gp, "e_vx") < med(nm, "e_vx")
    vy = med(gp, "e_vy") < med(nm, "e_vy")
    om = med(gp, "e_omega") <= 1.05 * med(nm, "e_omega")
    fast = max(walls) < 120.0
    detail = (f"seeds {list(SEEDS)}: GPMPC overtakes {[gp[s].overtakes for s in SEEDS]}, zone entries "
              f"{[gp[s].zone_entries for s in SEEDS]}; median MSE NMPC/GPMPC total "
              f"{med(nm, 'e_total'):.4f}/{med(gp, 'e_total'):.4f}, vx {med(nm, 'e_vx'):.4f}/{med(gp, 'e_vx'):.4f}, "
              f"vy {med(nm, 'e_vy'):.4f}/{med(gp, 'e_vy'):.4f}, omega {med(nm, 'e_omega'):.4f}/"
              f"{med(gp, 'e_omega'):.4f}; max wall time per seed {max(walls):.0f}s")
    record_criterion(7, safe and total and vx and vy and om and fast, detail)
    assert safe, "GPMPC must complete both overtakes with no safe-zone entry on every seed"
    assert total and vx and vy and om
    assert fast


@pytest.mark.slow
def test_criterion_10_pedal_smoothness(experiments):
    res, _ = experiments[0]
    tv_n, tv_g = res.nmpc.pedal_variation, res.gpmpc.pedal_variation
    record_criterion(10, tv_g < tv_n, f"seed 0 total variation of pedal: NMPC {tv_n:.2f}, GPMPC {tv_g:.2f}")
    assert tv_g < tv_n


# ---------------------------------------------------------------- 8

_DEGENERACY = {"runs": 0, "identical": 0}


@settings(max_examples=4, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(seed=st.integers(0, 2**16), y0=st.floats(-2.5, -1.0), lead_x=st.floats(15.0, 40.0))
def test_criterion_8_degeneracy(seed, y0, lead_x):
    sc = Scenario(ego_init=(0.0, y0, 0.0, 20.0, 0.0, 0.0), leads=(LeadVehicle(lead_x, -1.875, 12.0),),
                  noise=ProcessNoise.zero(), t_max=0.75)
    nmpc = run_episode(sc, "nmpc", seed=seed)
    model = GPModel(default_hyperparams(), GPDictionary(n_max=300))
    gpmpc = run_episode(sc, "gpmpc", model, seed=seed, learn=False)
    same = nmpc.rows() == gpmpc.rows() and all(np.array_equal(a, b) for a, b in zip(nmpc.states, gpmpc.states))
    _DEGENERACY["runs"] += 1
    _DEGENERACY["identical"] += same
    record_criterion(8, _DEGENERACY["identical"] == _DEGENERACY["runs"],
                     f"{_DEGENERACY['identical']}/{_DEGENERACY['runs']} random short episodes bitwise identical")
    assert same


# ---------------------------------------------------------------- 9

def _same_tree(a: Path, b: Path) -> list[str]:
    fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    if fa != fb:
        return ["file lists differ"]
    return [str(p) for p in fa if not filecmp.cmp(a / p, b / p, shallow=False)]


def test_criterion_9_determinism(tmp_path):
    short = ["--override", "scenario.t_max=0.5"]
    diffs, n_files = [], 0
    for i, cmd in enumerate((["simulate", "--mode", "nmpc", "--seed", "2"], ["simulate", "--mode", "gpmpc", "--seed", "2"],
                             ["compare", "--seeds", "0,1"])):
        dirs = []
        for run in ("a", "b"):
            out = tmp_path / f"cmd{i}_{run}"
            assert main([*cmd, "--out", str(out), *short]) == 0
            dirs.append(out)
        diffs += _same_tree(*dirs)
        n_files += sum(1 for p in dirs[0].rglob("*") if p.is_file())
    fits = []
    for run in ("a", "b"):
        out = tmp_path / f"hp_{run}.toml"
        assert main(["gp-fit", str(tmp_path / "cmd2_a" / "seed_0" / "dictionary.csv"),
                     "--out", str(out)]) == 0
        fits.append(out)
    n_files += 1
    if not filecmp.cmp(*fits, shallow=False):
        diffs.append("gp-fit output")
    record_criterion(9, not diffs, f"{n_files} output files compared across reruns, {len(diffs)} differ")
    assert not diffs
