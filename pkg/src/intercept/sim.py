"""Monte-Carlo intercept experiments with a surrogate arm.

A throw is a ballistic trajectory observed at camera rate with
distance-dependent Gaussian noise.  Each trial runs the filter and one
policy in a sequential event loop, executes the chosen primitives exactly,
and adjudicates the block at the true crossing time.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import binomtest

from .belief import Footprint, PlaneSpec
from .config import ConfigError, ExperimentConfig
from .estimator import FilterConfig, Measurement, ProjectileFilter, white_accel_q, write_measurement_log
from .jerk import TOL_STATE, JointLimits, JointSpaceState
from .planner import Planner, PolicyConfig, goal_transfer_times
from .tree import FORMAT_VERSION, ActionTree, GoalSpec, KeepOutBox, RegionSpec, TreeConfig, build_action_tree

FAILURES = ("late-arrival", "wrong-goal", "degenerate-belief")


class InfeasibleSpec(ValueError):
    """Throw parameters that cannot produce a valid throw."""


# -- surrogate arm -----------------------------------------------------------

class SurrogateArm:
    """Three planned joints: base yaw, elevation of the shoulder-hand line, elbow bend.

    The hand is placed on the intercept plane; the plane point of a joint
    configuration is only known for the stored goal table.
    """

    def __init__(self, cfg: ExperimentConfig):
        a = cfg.arm
        self.cfg = a
        self.limits = tuple(
            JointLimits(a.q_min[i], a.q_max[i], -a.v_max[i], a.v_max[i], -a.a_max[i], a.a_max[i], a.j_max[i])
            for i in range(3))
        self.tick = cfg.sim.tick
        g = cfg.goals
        self.goals = tuple(GoalSpec(self.ik(y, z), (y, z), g.half_extents) for y in g.y for z in g.z)
        home = self.ik(*g.home)
        match = [i for i, gs in enumerate(self.goals) if np.allclose(gs.q_goal, home, atol=1e-12)]
        self.home_goal = match[0] if match else None
        self.home = JointSpaceState.at_rest(home)

    def ik(self, y: float, z: float) -> np.ndarray:
        a = self.cfg
        rho = math.hypot(a.base_offset, y)
        dz = z - a.shoulder_height
        d = math.hypot(rho, dz)
        if d > 2.0 * a.link_length:
            raise ConfigError(f"plane point ({y}, {z}) is out of reach")
        q = np.array([math.atan2(y, a.base_offset), math.atan2(dz, rho),
                      2.0 * math.acos(d / (2.0 * a.link_length))])
        if np.any(q < np.array(a.q_min)) or np.any(q > np.array(a.q_max)):
            raise ConfigError(f"plane point ({y}, {z}) needs joints {q.round(3).tolist()} outside limits")
        return q

    def goal_at(self, state: JointSpaceState, tol: float = TOL_STATE) -> int | None:
        """Goal whose rest state matches ``state`` within ``tol``, if any."""
        for i, g in enumerate(self.goals):
            if state.max_error(g.state) <= tol:
                return i
        return None

    def limit_violation(self, state: JointSpaceState) -> float:
        worst = 0.0
        for i, lim in enumerate(self.limits):
            p, v, a = state.p[i], state.v[i], state.a[i]
            worst = max(worst, lim.p_min - p, p - lim.p_max, lim.v_min - v, v - lim.v_max,
                        lim.a_min - a, a - lim.a_max)
        return worst


def tree_config(cfg: ExperimentConfig, arm: SurrogateArm | None = None) -> TreeConfig:
    arm = arm or SurrogateArm(cfg)
    t = cfg.tree
    boxes = tuple(KeepOutBox(b.lo, b.hi) for b in t.keep_out)
    return TreeConfig(arm.home, arm.goals, arm.limits, t.eps, t.d_max,
                      RegionSpec(tuple(t.grid), t.kappa_v), t.goal_connect_radius, boxes, cfg.sim.tick)


def load_or_build_tree(cfg: ExperimentConfig, cache_dir=None, log=None) -> ActionTree:
    """Load the tree from ``sim.tree_path`` or a cache keyed by the config, else build it."""
    if cfg.sim.tree_path:
        return ActionTree.load(cfg.sim.tree_path)
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"tree-v{FORMAT_VERSION}-{cfg.tree_key()}.json"
        if path.exists():
            return ActionTree.load(path)
    t0 = time.perf_counter()
    tree = build_action_tree(tree_config(cfg))
    if log:
        log(f"built action tree: {len(tree)} nodes in {time.perf_counter() - t0:.1f} s")
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tree.save(path)
    return tree


# -- throws ------------------------------------------------------------------

@dataclass(frozen=True)
class ThrowSpec:
    p0: tuple[float, float, float]
    v0: tuple[float, float, float]
    sigma_near: tuple[float, float, float]
    sigma_far: tuple[float, float, float]
    noise_scale: float
    seed: int
    near: float = 1.0
    far: float = 9.0
    camera_x: float = 0.8
    outlier_rate: float = 0.0
    outlier_magnitude: float = 1.0
    rate: float = 50.0
    plane_x: float = 0.0
    g: float = -9.81

    @property
    def flight_time(self) -> float:
        return (self.plane_x - self.p0[0]) / self.v0[0]

    def state_at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)[..., None]
        p0, v0 = np.array(self.p0), np.array(self.v0)
        acc = np.array([0.0, 0.0, self.g])
        return np.concatenate([p0 + v0 * t + 0.5 * acc * t * t, v0 + acc * t], axis=-1)

    @property
    def crossing(self) -> tuple[float, float]:
        s = self.state_at(self.flight_time)
        return float(s[1]), float(s[2])

    def sigma(self, x) -> np.ndarray:
        """Per-axis noise standard deviation at projectile x-coordinate(s)."""
        d = np.abs(np.asarray(x, dtype=float) - self.camera_x)[..., None]
        w = np.clip((d - self.near) / (self.far - self.near), 0.0, 1.0)
        return self.noise_scale * (np.array(self.sigma_near) + w * (np.array(self.sigma_far) - self.sigma_near))


def sample_throw_spec(cfg: ExperimentConfig, rng: np.random.Generator, seed: int) -> ThrowSpec:
    th, n, g = cfg.throws, cfg.noise, cfg.goals
    T = rng.uniform(*th.flight_time)
    dist = rng.uniform(*th.distance)
    y0, z0 = rng.uniform(*th.launch_y), rng.uniform(*th.launch_z)
    yc = rng.uniform(min(g.y), max(g.y))
    zc = rng.uniform(min(g.z), max(g.z))
    scale = rng.uniform(*n.scale)
    x0 = cfg.sim.plane_x - dist
    v0 = (dist / T, (yc - y0) / T, (zc - z0 - 0.5 * cfg.sim.g * T * T) / T)
    f = np.array(n.axis_factor)
    spec = ThrowSpec((x0, y0, z0), v0, tuple(n.sigma_near * f), tuple(n.sigma_far * f), scale, seed,
                     n.near, n.far, th.camera_x, n.outlier_rate, n.outlier_magnitude, th.rate,
                     cfg.sim.plane_x, cfg.sim.g)
    check_throw_spec(spec)
    return spec


def check_throw_spec(spec: ThrowSpec) -> None:
    if not spec.v0[0] > 0 or not spec.flight_time > 0:
        raise InfeasibleSpec("throw does not approach the plane")
    if not spec.rate > 0 or min(spec.sigma_near + spec.sigma_far) < 0 or spec.noise_scale < 0:
        raise InfeasibleSpec("invalid camera rate or noise")
    if not 0.0 <= spec.outlier_rate <= 1.0:
        raise InfeasibleSpec("outlier rate outside [0, 1]")


@dataclass(frozen=True)
class Throw:
    spec: ThrowSpec
    times: np.ndarray
    truth: np.ndarray  # (n, 6) true states at the measurement times
    measurements: tuple[Measurement, ...]
    outliers: tuple[int, ...]

    @property
    def tau(self) -> float:
        return self.spec.flight_time

    @property
    def crossing(self) -> tuple[float, float]:
        return self.spec.crossing


def generate_throw(spec: ThrowSpec) -> Throw:
    """True trajectory and camera measurements strictly before the crossing."""
    check_throw_spec(spec)
    rng = np.random.default_rng(spec.seed)
    dt = 1.0 / spec.rate
    n = int(math.ceil(spec.flight_time / dt))
    times = np.arange(n) * dt
    times = times[times < spec.flight_time]
    truth = spec.state_at(times)
    noise = rng.standard_normal((len(times), 3)) * spec.sigma(truth[:, 0])
    z = truth[:, :3] + noise
    hit = rng.random(len(times)) < spec.outlier_rate
    direction = rng.standard_normal((len(times), 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    z[hit] += spec.outlier_magnitude * direction[hit]
    ms = tuple(Measurement(zi, float(t)) for zi, t in zip(z, times))
    return Throw(spec, times, truth, ms, tuple(int(i) for i in np.flatnonzero(hit)))


def write_truth_log(path, throw: Throw) -> None:
    lines = ["# timestamp,x,y,z,vx,vy,vz"]
    lines += [",".join(repr(float(v)) for v in (t, *s)) for t, s in zip(throw.times, throw.truth)]
    Path(path).write_text("\n".join(lines) + "\n")


# -- trials ------------------------------------------------------------------

@dataclass
class TrialResult:
    trial: int
    seed: int
    policy: str
    blocked: bool
    miss_distance: float
    arrival_margin: float | None
    failure: str | None
    goal: int | None
    tau_true: float
    crossing: tuple[float, float]
    noise_scale: float
    decisions: int
    holds: int
    max_limit_violation: float
    latencies: list = field(default_factory=list, repr=False)

    def record(self) -> dict:
        """Deterministic fields only (wall-clock latencies excluded)."""
        d = asdict(self)
        d.pop("latencies")
        d["crossing"] = list(self.crossing)
        return d


def filter_config(cfg: ExperimentConfig) -> FilterConfig:
    f = cfg.filter
    dt = 1.0 / cfg.throws.rate
    return FilterConfig(Q=white_accel_q(f.q, dt), R0=np.eye(3) * f.sigma0 ** 2, alpha=f.alpha,
                        window=f.window, dt_nominal=dt, g=cfg.sim.g, n_min=f.n_min, adaptive=f.adaptive)


class TrialRunner:
    """Holds everything shared between trials: arm, tree, planners, filter settings."""

    def __init__(self, cfg: ExperimentConfig, tree: ActionTree):
        self.cfg = cfg
        self.arm = SurrogateArm(cfg)
        self.tree = tree
        if len(tree.goals) != len(self.arm.goals) or any(
                not np.allclose(a.q_goal, b.q_goal) for a, b in zip(tree.goals, self.arm.goals)):
            raise ConfigError("action tree was built for a different goal set")
        self.plane = PlaneSpec(cfg.sim.plane_x, cfg.sim.g)
        self.filter_cfg = filter_config(cfg)
        transfer = goal_transfer_times(self.arm.goals, self.arm.limits)
        self.planners = {name: Planner(tree, self.arm.limits, self.plane, PolicyConfig(name), transfer)
                         for name in ("qmdp", "naive")}

    def throw(self, trial: int) -> Throw:
        seed = trial_seed(self.cfg.seed, trial)
        rng = np.random.default_rng(seed)
        return generate_throw(sample_throw_spec(self.cfg, rng, seed + 1))

    def run(self, throw: Throw, policy: str, trial: int = 0) -> TrialResult:
        planner = self.planners[policy]
        planner.reset()
        return run_trial(throw, planner, self.arm, self.filter_cfg, self.cfg, trial)


def trial_seed(master: int, trial: int) -> int:
    """Independent 63-bit seed per trial, stable under any execution order."""
    ss = np.random.SeedSequence(entropy=master, spawn_key=(trial,))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)) & ~1


def run_trial(throw: Throw, planner: Planner, arm: SurrogateArm, filter_cfg: FilterConfig,
              cfg: ExperimentConfig, trial: int = 0) -> TrialResult:
    """Sequential event loop on the arm's tick grid; adjudicates at the true crossing time."""
    tick = cfg.sim.tick
    tau = throw.tau
    filt = ProjectileFilter(filter_cfg)
    latencies = []
    holds = 0
    worst = 0.0
    busy_until = -math.inf
    last_latency = 0.0
    qmdp = planner.cfg.decision_mode == "qmdp"

    def boundaries(now):
        if qmdp:
            while planner.on_boundary(now) is not None:
                pass

    k = 0
    n_ticks = int(math.floor(tau / tick + 1e-9))
    for i in range(n_ticks + 1):
        now = i * tick
        if now >= tau:
            break
        boundaries(now)
        while k < len(throw.measurements) and throw.measurements[k].timestamp <= now + 1e-9:
            m = throw.measurements[k]
            k += 1
            belief = filt.step(m)
            t_dec = m.timestamp
            if cfg.sim.latency_coupled:
                t_dec = max(t_dec + last_latency, busy_until)
                if t_dec >= tau:
                    continue
            d = planner.on_belief(belief, t_dec)
            latencies.append(d.latency)
            last_latency = d.latency
            busy_until = t_dec + d.latency
            holds += d.kind == "hold"
            boundaries(now)
        worst = max(worst, arm.limit_violation(planner.current_state(now)))
    final = planner.current_state(tau)
    worst = max(worst, arm.limit_violation(final))
    return adjudicate(throw, planner, arm, final, trial, latencies, holds, worst)


def adjudicate(throw: Throw, planner: Planner, arm: SurrogateArm, final: JointSpaceState,
               trial: int, latencies, holds: int, worst: float) -> TrialResult:
    tau = throw.tau
    y, z = throw.crossing
    at_goal = arm.goal_at(final)
    # the arm is ready when its last non-empty motion ends
    moves = [d for d in planner.log if d.primitive is not None and d.primitive.duration > 0]
    ready = moves[-1].timestamp + moves[-1].primitive.duration if moves else 0.0
    if at_goal is not None:
        target = at_goal
    else:
        ex = planner.exec  # projected end of the motion still in progress
        ready = ex.start_time + ex.primitive.duration if ex.primitive is not None else math.inf
        if planner.exec.goal is not None:
            target = planner.exec.goal
        else:
            q = np.array([g.q_goal for g in arm.goals])
            target = int(np.argmin(np.linalg.norm(q - final.p, axis=1)))
    fp: Footprint = arm.goals[target].footprint
    inside = fp.contains(y, z)
    blocked = bool(at_goal == target and inside and ready <= tau)
    if blocked:
        failure = None
    elif not planner.log or all(d.kind == "hold" for d in planner.log):
        failure = "degenerate-belief"
    elif not inside:
        failure = "wrong-goal"
    else:
        failure = "late-arrival"
    margin = ready - tau if math.isfinite(ready) else None
    return TrialResult(trial, throw.spec.seed, planner.cfg.decision_mode, blocked, fp.distance(y, z),
                       margin, failure, target, tau, (y, z), throw.spec.noise_scale,
                       len(planner.log), holds, worst, latencies)


# -- batches -----------------------------------------------------------------

def wilson_interval(k: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    if n == 0:
        return (math.nan, math.nan)
    ci = binomtest(k, n).proportion_ci(confidence, method="wilson")
    return (float(ci.low), float(ci.high))


def paired_test(a: Sequence[bool], b: Sequence[bool]) -> dict:
    """One-sided exact sign test on discordant pairs: is ``a`` better than ``b``?"""
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    only_a = int(np.sum(a & ~b))
    only_b = int(np.sum(~a & b))
    n = only_a + only_b
    p = float(binomtest(only_a, n, 0.5, alternative="greater").pvalue) if n else 1.0
    return {"pairs": int(len(a)), "only_first": only_a, "only_second": only_b,
            "gap": float(a.mean() - b.mean()) if len(a) else 0.0, "p_value": p}


@dataclass
class BatchResult:
    results: list  # TrialResult, ordered by (trial, policy)
    summary: dict
    latency: dict

    def by_policy(self, policy: str) -> list:
        return [r for r in self.results if r.policy == policy]


_WORKER: TrialRunner | None = None


def _init_worker(cfg, tree):
    global _WORKER
    _WORKER = TrialRunner(cfg, tree)


def _work(args):
    trial, policies = args
    throw = _WORKER.throw(trial)
    return [_WORKER.run(throw, p, trial) for p in policies]


def run_batch(cfg: ExperimentConfig, tree: ActionTree | None = None, out_dir=None,
              policies: Sequence[str] | None = None, log=None) -> BatchResult:
    policies = tuple(policies or cfg.policies)
    for p in policies:
        if p not in ("qmdp", "naive"):
            raise ConfigError(f"unknown policy '{p}'")
    if cfg.trials == 0:
        res = BatchResult([], summarize(cfg, [], policies), {})
        if out_dir is not None:
            write_outputs(out_dir, cfg, res, None)
        return res
    if tree is None:
        tree = load_or_build_tree(cfg, out_dir, log)
    jobs = [(i, policies) for i in range(cfg.trials)]
    if cfg.sim.workers > 1:
        with ProcessPoolExecutor(cfg.sim.workers, initializer=_init_worker, initargs=(cfg, tree)) as ex:
            chunks = list(ex.map(_work, jobs, chunksize=8))
        runner = None
    else:
        runner = TrialRunner(cfg, tree)
        chunks = []
        for i, pol in jobs:
            throw = runner.throw(i)
            chunks.append([runner.run(throw, p, i) for p in pol])
            if log and (i + 1) % 100 == 0:
                log(f"{i + 1}/{cfg.trials} trials")
    results = [r for c in chunks for r in c]
    res = BatchResult(results, summarize(cfg, results, policies), latency_summary(results, policies))
    if out_dir is not None:
        write_outputs(out_dir, cfg, res, runner)
    return res


def summarize(cfg: ExperimentConfig, results: list, policies: Sequence[str]) -> dict:
    out = {"trials": cfg.trials, "seed": cfg.seed, "policies": {}}
    for p in policies:
        rs = [r for r in results if r.policy == p]
        k = sum(r.blocked for r in rs)
        lo, hi = wilson_interval(k, len(rs))
        fails = {f: sum(r.failure == f for r in rs) for f in FAILURES}
        margins = [r.arrival_margin for r in rs if r.arrival_margin is not None]
        out["policies"][p] = {
            "n": len(rs), "blocked": k, "success_rate": k / len(rs) if rs else None,
            "wilson_95": [lo, hi] if rs else None, "failures": fails,
            "median_arrival_margin": float(np.median(margins)) if margins else None,
            "max_limit_violation": max((r.max_limit_violation for r in rs), default=0.0),
        }
    if len(policies) == 2 and results:
        a = [r.blocked for r in results if r.policy == policies[0]]
        b = [r.blocked for r in results if r.policy == policies[1]]
        out["paired"] = {"first": policies[0], "second": policies[1], **paired_test(a, b)}
    return out


def latency_summary(results: list, policies: Sequence[str]) -> dict:
    out = {}
    for p in policies:
        lat = np.array([x for r in results if r.policy == p for x in r.latencies]) * 1e3
        if len(lat) == 0:
            continue
        out[p] = {"cycles": int(len(lat)), "median_ms": float(np.median(lat)),
                  "p90_ms": float(np.percentile(lat, 90)), "p99_ms": float(np.percentile(lat, 99)),
                  "max_ms": float(lat.max())}
    return out


def noise_table(cfg: ExperimentConfig, results: list, policies: Sequence[str]) -> list[dict]:
    lo, hi = cfg.noise.scale
    edges = np.linspace(lo, hi, cfg.sim.noise_bins + 1)
    rows = []
    for p in policies:
        rs = [r for r in results if r.policy == p]
        for b in range(len(edges) - 1):
            last = b == len(edges) - 2
            sel = [r for r in rs if edges[b] <= r.noise_scale < edges[b + 1] or (last and r.noise_scale == hi)]
            k = sum(r.blocked for r in sel)
            ci = wilson_interval(k, len(sel))
            rows.append({"policy": p, "noise_lo": float(edges[b]), "noise_hi": float(edges[b + 1]),
                         "n": len(sel), "blocked": k, "success_rate": k / len(sel) if sel else "",
                         "ci_lo": ci[0] if sel else "", "ci_hi": ci[1] if sel else "",
                         "late_arrival": sum(r.failure == "late-arrival" for r in sel),
                         "wrong_goal": sum(r.failure == "wrong-goal" for r in sel)})
    return rows


def _write_csv(path, rows, fields):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def write_outputs(out_dir, cfg: ExperimentConfig, res: BatchResult, runner: TrialRunner | None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "trials.jsonl", "w") as fh:
        for r in res.results:
            fh.write(json.dumps(r.record(), sort_keys=True) + "\n")
    records = [r.record() for r in res.results]
    fields = list(records[0]) if records else list(TrialResult.__dataclass_fields__)[:-1]
    _write_csv(out / "trials.csv", records, fields)
    (out / "summary.json").write_text(json.dumps(res.summary, indent=2, sort_keys=True) + "\n")
    (out / "latency.json").write_text(json.dumps(res.latency, indent=2, sort_keys=True) + "\n")
    policies = tuple(res.summary["policies"])
    rows = noise_table(cfg, res.results, policies)
    _write_csv(out / "success_vs_noise.csv", rows,
               ["policy", "noise_lo", "noise_hi", "n", "blocked", "success_rate", "ci_lo", "ci_hi",
                "late_arrival", "wrong_goal"])
    edges = np.arange(0.0, 20.5, 0.5)
    hist_rows = []
    for p in policies:
        lat = np.array([x for r in res.by_policy(p) for x in r.latencies]) * 1e3
        counts, _ = np.histogram(np.clip(lat, 0, edges[-1]), edges)
        hist_rows += [{"policy": p, "lo_ms": float(a), "hi_ms": float(b), "count": int(c)}
                      for a, b, c in zip(edges[:-1], edges[1:], counts)]
    _write_csv(out / "latency_histogram.csv", hist_rows, ["policy", "lo_ms", "hi_ms", "count"])
    if cfg.sim.save_streams and res.results:
        streams = out / "streams"
        streams.mkdir(exist_ok=True)
        seen = set()
        for r in res.results:
            if r.trial in seen:
                continue
            seen.add(r.trial)
            rng = np.random.default_rng(trial_seed(cfg.seed, r.trial))
            throw = generate_throw(sample_throw_spec(cfg, rng, trial_seed(cfg.seed, r.trial) + 1))
            write_measurement_log(streams / f"trial_{r.trial:05d}.csv", throw.measurements)
            write_truth_log(streams / f"trial_{r.trial:05d}_truth.csv", throw)


def benchmark_planning(cfg: ExperimentConfig, tree: ActionTree, cycles: int = 1000) -> dict:
    """Latency of full planning cycles (projection, backup, selection at the root).

    Beliefs come from the filter on seeded throws; the planner is put back at
    the root before every cycle so each one performs the whole computation.
    """
    runner = TrialRunner(cfg, tree)
    planner = runner.planners["qmdp"]
    lat = []
    trial = 0
    while len(lat) < cycles:
        throw = runner.throw(trial)
        trial += 1
        filt = ProjectileFilter(runner.filter_cfg)
        for m in throw.measurements:
            belief = filt.step(m)
            planner.reset()
            d = planner.on_belief(belief, m.timestamp)
            if d.kind != "hold":
                lat.append(d.latency)
            if len(lat) >= cycles:
                break
    ms = np.array(lat) * 1e3
    return {"cycles": int(len(ms)), "tree_nodes": len(tree), "median_ms": float(np.median(ms)),
            "p90_ms": float(np.percentile(ms, 90)), "p99_ms": float(np.percentile(ms, 99)),
            "max_ms": float(ms.max())}
