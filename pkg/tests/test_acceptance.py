"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The end-to-end and latency checks build full-size action trees and run a
500-trial batch, so this module takes tens of minutes on one core.
"""

import json
import math
import os

import numpy as np
import pytest

from intercept.belief import (
    CrossingBelief,
    Footprint,
    PlaneSpec,
    ProjectileBelief,
    crossing_jacobian,
    crossing_map,
    project_to_plane,
    success_probability,
)
from intercept.config import ExperimentConfig, TreeParams
from intercept.estimator import FilterConfig, Measurement, run_filter, white_accel_q
from intercept.jerk import Infeasible, JointLimits, JointSpaceState, JointState1D, SteeringError, solve_min_time_1d, steer
from intercept.sim import SurrogateArm, benchmark_planning, noise_table, run_batch, tree_config
from intercept.tree import build_action_tree
from oracles import central_jacobian, lp_min_time, mc_success, path_max_terminal_value, random_arena_tree

PLANE = PlaneSpec()
DT = 0.02
G = -9.81


# -- 1. steering optimality ---------------------------------------------------

def _random_limits(rng):
    return JointLimits(-50, 50, -rng.uniform(0.5, 3), rng.uniform(0.5, 3),
                       -rng.uniform(1, 8), rng.uniform(1, 8), rng.uniform(5, 40))


def _random_endpoint(rng, lim, start):
    # keep the velocity reachable after the acceleration is brought to zero
    while True:
        v = rng.uniform(lim.v_min, lim.v_max) * rng.integers(0, 2)
        a = rng.uniform(lim.a_min, lim.a_max) * rng.integers(0, 2)
        ramp = a * abs(a) / (2 * lim.u_max)
        if lim.v_min <= (v + ramp if start else v - ramp) <= lim.v_max:
            return JointState1D(rng.uniform(-2, 2), v, a)


def test_c1_steering_optimality(report):
    rng = np.random.default_rng(2024)
    worst, bad = 0.0, []
    for i in range(1000):
        lim = _random_limits(rng)
        s, g = _random_endpoint(rng, lim, True), _random_endpoint(rng, lim, False)
        ref = lp_min_time(s.as_tuple(), g.as_tuple(), lim)
        try:
            t = solve_min_time_1d(s, g, lim).total_duration
        except Infeasible:
            t = math.inf
        err = abs(t - ref)
        tol = max(1e-3, 1e-3 * ref)
        worst = max(worst, err / tol if math.isfinite(err) else math.inf)
        if not err <= tol:
            bad.append(i)
    ok = report("C1 steering optimality", not bad,
                f"{len(bad)} of 1000 instances outside max(1 ms, 0.1 %); worst error/tol {worst:.3f}")
    assert ok


# -- 2. bound safety ----------------------------------------------------------

def test_c2_bound_safety(report):
    cfg = ExperimentConfig()
    arm = SurrogateArm(cfg)
    lims = arm.limits
    rng = np.random.default_rng(7)

    def draw(rest):
        p = [rng.uniform(l.p_min, l.p_max) for l in lims]
        if rest:
            return JointSpaceState.at_rest(p)
        v = [rng.uniform(0.8 * l.v_min, 0.8 * l.v_max) for l in lims]
        a = [rng.uniform(0.5 * l.a_min, 0.5 * l.a_max) for l in lims]
        return JointSpaceState(p, v, a)

    worst, count, n = 0.0, 0, 0
    while n < 10_000:
        start, goal = draw(rng.random() < 0.3), draw(rng.random() < 0.7)
        eps = cfg.tree.eps if rng.random() < 0.5 else math.inf
        try:
            pr = steer(start, goal, lims, eps)
        except SteeringError:
            continue
        n += 1
        ts = np.arange(0.0, pr.duration + 1e-12, 1e-3)
        p, v, a = pr.sample(np.append(ts, pr.duration))
        for j, l in enumerate(lims):
            excess = max(p[:, j].max() - l.p_max, l.p_min - p[:, j].min(),
                         v[:, j].max() - l.v_max, l.v_min - v[:, j].min(),
                         a[:, j].max() - l.a_max, l.a_min - a[:, j].min(), 0.0)
            worst = max(worst, excess)
            count += excess > 1e-6
            for prof in pr.profiles:
                u = max((abs(x) for x in prof.jerks), default=0.0)
                count += u > l.u_max + 1e-6
    ok = report("C2 bound safety", count == 0,
                f"{count} violations > 1e-6 over {n} primitives at 1 ms; worst excess {worst:.2e}")
    assert ok


# -- 3. delta-method fidelity --------------------------------------------------

def _random_belief(rng, rel):
    mu = np.array([rng.uniform(-8, -4), rng.uniform(-1, 1), rng.uniform(0.5, 2),
                   rng.uniform(6, 15), rng.uniform(-1.5, 1.5), rng.uniform(2, 6)])
    A = rng.normal(size=(6, 6))
    C = A @ A.T
    d = np.sqrt(np.diag(C))
    sd = rel * np.maximum(np.abs(mu), 0.1)
    return mu, C / np.outer(d, d) * np.outer(sd, sd)


def test_c3_delta_method_fidelity(report):
    rng = np.random.default_rng(33)
    n = 1_000_000
    cov_fail, jac_worst, z_worst = 0, 0.0, 0.0
    for _ in range(100):
        mu, S = _random_belief(rng, rng.uniform(0.0, 0.05))
        cb = project_to_plane(ProjectileBelief(mu, S), PLANE)
        o = crossing_map(rng.multivariate_normal(mu, S, size=n), PLANE)
        d = o - o.mean(axis=0)
        for i in range(3):
            for j in range(i, 3):
                prod = d[:, i] * d[:, j]
                z = abs(cb.cov[i, j] - prod.mean()) / (prod.std() / math.sqrt(n))
                z_worst = max(z_worst, z)
                cov_fail += z > 3.0
        J = crossing_jacobian(mu, PLANE)
        Jfd = central_jacobian(lambda s: crossing_map(s, PLANE), mu)
        jac_worst = max(jac_worst, float(np.max(np.abs(J - Jfd) / np.maximum(np.abs(Jfd), 1e-3))))
    jac_ok = report("C3 Jacobian vs central differences", jac_worst < 1e-5,
                    f"worst relative error {jac_worst:.2e} (tol 1e-5)")
    cov_ok = report("C3 delta-method covariance", cov_fail == 0,
                    f"{cov_fail} of 600 entries beyond 3 MC standard errors; worst {z_worst:.1f} SE")
    assert jac_ok and cov_ok


# -- 4. success-probability oracle ---------------------------------------------

def test_c4_success_probability(report):
    rng = np.random.default_rng(44)
    n = 1_000_000
    worst, fails = 0.0, 0
    for _ in range(100):
        A = rng.normal(size=(3, 3)) * np.array([0.25, 0.25, 0.06])[:, None]
        cb = CrossingBelief([rng.uniform(-0.6, 0.6), rng.uniform(0.5, 1.8), rng.uniform(0.3, 0.8)], A @ A.T)
        fp = Footprint(rng.uniform(-0.75, 0.75), rng.uniform(0.4, 1.9),
                       rng.uniform(0.1, 0.45), rng.uniform(0.1, 0.45))
        t_a = rng.uniform(0.2, 0.9)
        p = success_probability(cb, fp, t_a)
        phat = mc_success(cb.mean, cb.cov, fp.bounds, t_a, n, rng)
        se = math.sqrt(max(p * (1 - p), 1e-12) / n)
        z = abs(p - phat) / se
        worst = max(worst, z)
        fails += z > 3.0
    fp = Footprint(0.0, 1.0, 0.3, 0.3)
    point = [success_probability(CrossingBelief([0.1, 1.1, 0.5], np.zeros((3, 3))), fp, 0.4),
             success_probability(CrossingBelief([0.1, 1.1, 0.5], np.zeros((3, 3))), fp, 0.6),
             success_probability(CrossingBelief([0.5, 1.1, 0.5], np.zeros((3, 3))), fp, 0.4)]
    exact = point == [1.0, 0.0, 0.0]
    ok = report("C4 success probability", fails == 0 and exact,
                f"{fails} of 100 triples beyond 3 SE (worst {worst:.2f} SE); point-mass limits {point}")
    assert ok


# -- 5. filter correctness ------------------------------------------------------

def _parabola(rng, sigma, n=40):
    p0 = np.array([rng.uniform(-8, -6), rng.uniform(-1, 1), rng.uniform(0.5, 1.5)])
    v0 = np.array([rng.uniform(8, 14), rng.uniform(-1, 1), rng.uniform(2, 5)])
    t = np.arange(n) * DT
    pos = p0 + v0 * t[:, None]
    pos[:, 2] += 0.5 * G * t ** 2
    vel = np.tile(v0, (n, 1))
    vel[:, 2] += G * t
    return t, pos + rng.normal(size=pos.shape) * sigma, np.hstack([pos, vel])


def _fcfg(sigma, **kw):
    return FilterConfig(Q=white_accel_q(1e-3, DT), R0=np.eye(3) * sigma ** 2, **kw)


def test_c5a_revised_innovation_never_larger(report):
    rng = np.random.default_rng(51)
    checked, bad = 0, 0
    for _ in range(200):
        t, z, _ = _parabola(rng, 0.03)
        z[rng.random(len(z)) < 0.1] += 1.0
        states = []
        run_filter([Measurement(zi, ti) for zi, ti in zip(z, t)], _fcfg(0.03), states)
        for s in states:
            if s.innovation is not None:
                checked += 1
                bad += int(np.any(np.abs(s.revised) > np.abs(s.innovation)))
    ok = report("C5a |revised| <= |innovation|", bad == 0, f"{bad} violations over {checked} updates")
    assert ok


def test_c5b_nees_inside_band(report):
    rng = np.random.default_rng(52)
    means = []
    for _ in range(200):
        t, z, truth = _parabola(rng, 0.03)
        bs = run_filter([Measurement(zi, ti) for zi, ti in zip(z, t)], _fcfg(0.03))
        e = [(truth[i] - b.mean) @ np.linalg.solve(b.cov, truth[i] - b.mean)
             for i, b in enumerate(bs) if i >= 10]
        means.append(np.mean(e))
    m = float(np.mean(means))
    ok = report("C5b mean NEES", 1.237 <= m <= 14.449, f"{m:.3f} (95 % chi-square(6) band [1.237, 14.449])")
    assert ok


def test_c5c_outlier_robustness(report):
    rng = np.random.default_rng(53)
    se_r, se_p, wins = [], [], 0
    for _ in range(200):
        t, z, truth = _parabola(rng, 0.03)
        hit = rng.random(len(z)) < 0.05
        d = rng.normal(size=(int(hit.sum()), 3))
        z[hit] += d / np.linalg.norm(d, axis=1, keepdims=True)
        ms = [Measurement(zi, ti) for zi, ti in zip(z, t)]
        r = run_filter(ms, _fcfg(0.03))
        p = run_filter(ms, _fcfg(0.03, adaptive=False))
        er = np.mean([np.sum((truth[i, :3] - b.mean[:3]) ** 2) for i, b in enumerate(r)])
        ep = np.mean([np.sum((truth[i, :3] - b.mean[:3]) ** 2) for i, b in enumerate(p)])
        se_r.append(er)
        se_p.append(ep)
        wins += er <= ep
    rr, rp = math.sqrt(np.mean(se_r)), math.sqrt(np.mean(se_p))
    ok = report("C5c outlier robustness", rr <= rp,
                f"robust RMSE {rr:.4f} m vs plain KF {rp:.4f} m; robust no worse on {wins}/200 throws")
    assert ok


def test_c5d_trace_non_increasing(report):
    rng = np.random.default_rng(54)
    worst, bad = -math.inf, 0
    for _ in range(200):
        t, z, _ = _parabola(rng, 0.03)
        states = []
        run_filter([Measurement(zi, ti) for zi, ti in zip(z, t)], _fcfg(0.03), states)
        diff = np.diff([np.trace(s.P) for s in states[10:]])
        worst = max(worst, float(diff.max()))
        bad += int(np.any(diff > 1e-12))
    ok = report("C5d trace(P) non-increasing", bad == 0,
                f"{bad} of 200 clean throws with an increase after burn-in; largest step {worst:.2e}")
    assert ok


# -- 6. value backup ------------------------------------------------------------

def test_c6_backup_exact(report):
    rng = np.random.default_rng(66)
    mism, sizes = 0, []
    for _ in range(100):
        t = random_arena_tree(rng, max_nodes=int(rng.integers(10, 5001)), max_depth=6)
        t.value[t.terminals] = rng.random(len(t.terminals))
        t.backup()
        sizes.append(len(t.parent))
        mism += t.value[0] != path_max_terminal_value(t)
    ok = report("C6 backup exactness", mism == 0,
                f"{mism} mismatches over 100 trees ({min(sizes)}-{max(sizes)} nodes), exact equality")
    assert ok


# -- 7. planning latency ---------------------------------------------------------

def test_c7_planning_latency(report):
    cfg = ExperimentConfig()
    cfg = cfg.replace(tree=TreeParams(**{**cfg.tree.__dict__, "grid": (4, 3, 3)}))
    tree = build_action_tree(tree_config(cfg))
    assert len(tree) >= 10_000
    b = benchmark_planning(cfg, tree, 1000)
    passed = b["median_ms"] < 10.0 and b["p99_ms"] < 20.0
    ok = report("C7 planning latency", passed,
                f"{b['tree_nodes']} nodes, {b['cycles']} cycles: median {b['median_ms']:.2f} ms, "
                f"p99 {b['p99_ms']:.2f} ms (limits 10 / 20 ms)")
    if not os.environ.get("CI"):
        assert ok


# -- 8 and 9. end-to-end ordering and determinism ----------------------------------

@pytest.fixture(scope="module")
def default_tree():
    return build_action_tree(tree_config(ExperimentConfig()))


def test_c8_end_to_end_ordering(report, default_tree, tmp_path):
    cfg = ExperimentConfig(trials=500)
    res = run_batch(cfg, default_tree, tmp_path)
    s = res.summary
    q, nv, pr = s["policies"]["qmdp"], s["policies"]["naive"], s["paired"]
    table = noise_table(cfg, res.results, ("qmdp", "naive"))
    top = max(r["noise_hi"] for r in table)
    late = {r["policy"]: r["late_arrival"] for r in table if r["noise_hi"] == top}
    passed = q["success_rate"] >= nv["success_rate"] and pr["p_value"] < 0.05
    ok = report("C8 end-to-end ordering", passed,
                f"qmdp {q['blocked']}/500 = {q['success_rate']:.3f} vs naive {nv['blocked']}/500 = "
                f"{nv['success_rate']:.3f}, gap {pr['gap']:+.3f}, paired p = {pr['p_value']:.2e}; "
                f"late arrivals in the highest noise bin: qmdp {late.get('qmdp')}, naive {late.get('naive')}")
    assert ok


def test_c9_determinism(report, default_tree, tmp_path):
    cfg = ExperimentConfig(trials=60, seed=9)
    run_batch(cfg, default_tree, tmp_path / "a")
    run_batch(cfg, default_tree, tmp_path / "b")
    a = (tmp_path / "a" / "trials.jsonl").read_bytes()
    b = (tmp_path / "b" / "trials.jsonl").read_bytes()
    longer = run_batch(cfg.replace(trials=80), default_tree, tmp_path / "c")
    prefix = [json.dumps(r.record(), sort_keys=True) for r in longer.results if r.trial < 60]
    same_prefix = "\n".join(prefix) + "\n" == a.decode()
    ok = report("C9 determinism", a == b and same_prefix and len(a) > 0,
                f"rerun byte-identical: {a == b}; records unchanged by batch size: {same_prefix}")
    assert ok
