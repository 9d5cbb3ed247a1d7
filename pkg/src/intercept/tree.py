"""Offline state-time action tree of jerk-limited motion primitives.

The tree is grown breadth-first from the home state.  Every node below the
depth cap is expanded towards a fixed grid of sub-goal states with
primitives truncated at a horizon; nodes at the cap are connected with full
primitives to nearby goal states at rest.  Nodes live in flat arrays, and
because expansion is FIFO the children of each node occupy a contiguous
index range, which the planner exploits for its backup.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .belief import Footprint
from .jerk import (
    JerkProfile1D,
    JointLimits,
    JointSpaceState,
    JointState1D,
    MotionPrimitive,
    SteeringError,
    TOL_STATE,
    steer,
)

FORMAT_VERSION = 2


class EmptyTree(RuntimeError):
    """No feasible expansion from the root."""


@dataclass(frozen=True, eq=False)
class GoalSpec:
    q_goal: np.ndarray
    plane_yz: tuple[float, float]
    shield_half_extents: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "q_goal", np.asarray(self.q_goal, dtype=float).reshape(-1))
        object.__setattr__(self, "plane_yz", tuple(float(x) for x in self.plane_yz))
        hy, hz = (float(x) for x in self.shield_half_extents)
        if not (hy > 0 and hz > 0):
            raise ValueError("shield half extents must be positive")
        object.__setattr__(self, "shield_half_extents", (hy, hz))

    @property
    def state(self) -> JointSpaceState:
        return JointSpaceState.at_rest(self.q_goal)

    @property
    def footprint(self) -> Footprint:
        return Footprint(self.plane_yz[0], self.plane_yz[1], *self.shield_half_extents)


@dataclass(frozen=True)
class RegionSpec:
    """Sub-goal grid: ``grid[i]`` points per joint over the goal bounding box."""

    grid: tuple[int, ...] = (3, 3, 3)
    kappa_v: float = 0.6

    def __post_init__(self):
        if any(int(n) < 1 for n in self.grid):
            raise ValueError("grid counts must be positive")
        if not 0.0 <= self.kappa_v <= 1.0:
            raise ValueError("kappa_v must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class KeepOutBox:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != hi.shape or np.any(hi < lo):
            raise ValueError("keep-out box needs lo <= hi of equal shape")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)


@dataclass(frozen=True, eq=False)
class TreeConfig:
    start: JointSpaceState
    goals: tuple[GoalSpec, ...]
    limits: tuple[JointLimits, ...]
    eps: float
    d_max: int
    regions: RegionSpec = field(default_factory=RegionSpec)
    goal_connect_radius: float | None = None
    keep_out: tuple[KeepOutBox, ...] = ()
    dt_col: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "goals", tuple(self.goals))
        object.__setattr__(self, "limits", tuple(self.limits))
        object.__setattr__(self, "keep_out", tuple(self.keep_out))
        if self.d_max < 1:
            raise ValueError("d_max must be at least 1")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not self.goals:
            raise ValueError("at least one goal is required")
        dof = self.start.dof
        if len(self.limits) != dof or any(g.q_goal.size != dof for g in self.goals):
            raise ValueError("start, goals and limits disagree on the number of joints")
        if len(self.regions.grid) != dof:
            raise ValueError("region grid needs one count per joint")
        for i, lim in enumerate(self.limits):
            if not lim.contains(self.start.joint(i)):
                raise ValueError(f"start state violates joint {i} limits")

    @property
    def connect_radius(self) -> float:
        if self.goal_connect_radius is not None:
            return float(self.goal_connect_radius)
        return default_connect_radius(self.goals)


def default_connect_radius(goals: Sequence[GoalSpec]) -> float:
    """75th percentile of pairwise joint-space goal distances."""
    q = np.array([g.q_goal for g in goals])
    if len(q) < 2:
        return math.inf
    d = [np.linalg.norm(a - b) for a, b in itertools.combinations(q, 2)]
    return float(np.percentile(d, 75))


def sub_goals(s: JointSpaceState, cfg: TreeConfig) -> list[JointSpaceState]:
    """Grid of intermediate states over the joint-space box spanned by the goals.

    Each sub-goal moves through its grid point with a velocity of
    ``kappa_v`` times the joint speed limit, pointing away from ``s``; the
    magnitude ramps linearly to zero within one grid pitch of ``s``.
    """
    q = np.array([g.q_goal for g in cfg.goals])
    lo, hi = q.min(axis=0), q.max(axis=0)
    axes, pitch = [], []
    for i, n in enumerate(cfg.regions.grid):
        n = int(n)
        if n == 1 or hi[i] == lo[i]:
            axes.append(np.array([0.5 * (lo[i] + hi[i])]) if n == 1 else np.full(1, lo[i]))
            lim = cfg.limits[i]
            pitch.append(0.5 * (lim.p_max - lim.p_min))
        else:
            axes.append(np.linspace(lo[i], hi[i], n))
            pitch.append((hi[i] - lo[i]) / (n - 1))
    pitch = np.array(pitch)
    out = []
    for point in itertools.product(*axes):
        point = np.array(point)
        frac = np.clip((point - s.p) / pitch, -1.0, 1.0)
        vel = np.array([
            cfg.regions.kappa_v * (lim.v_max if f > 0 else -lim.v_min) * f
            for f, lim in zip(frac, cfg.limits)])
        out.append(JointSpaceState(point, vel, np.zeros_like(point)))
    return out


def is_colliding(primitive: MotionPrimitive, keep_out: Sequence[KeepOutBox],
                 dt_col: float = 0.01) -> bool:
    if not keep_out:
        return False
    n = max(1, int(math.ceil(primitive.duration / dt_col)))
    ts = np.minimum(np.arange(n + 1) * dt_col, primitive.duration)
    p, _, _ = primitive.sample(ts)
    for box in keep_out:
        if np.any(np.all((p >= box.lo) & (p <= box.hi), axis=1)):
            return True
    return False


@dataclass
class BuildStats:
    nodes: int = 0
    terminals: int = 0
    expanded: int = 0
    truncated: int = 0
    discarded_collision: int = 0
    discarded_infeasible: int = 0
    waits: int = 0
    goal_skipped_radius: int = 0
    goal_skipped_infeasible: int = 0
    goal_skipped_collision: int = 0
    depth_histogram: dict = field(default_factory=dict)
    terminals_per_goal: dict = field(default_factory=dict)
    build_seconds: float = 0.0

    def as_dict(self, timing: bool = True) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["depth_histogram"] = {str(k): v for k, v in sorted(self.depth_histogram.items())}
        d["terminals_per_goal"] = {str(k): v for k, v in sorted(self.terminals_per_goal.items())}
        if not timing:
            d.pop("build_seconds")
        return d


@dataclass(frozen=True, eq=False)
class TreeNode:
    """Read-only view of one node of an :class:`ActionTree`."""

    index: int
    state: JointSpaceState
    time_to_come: float
    depth: int
    incoming: MotionPrimitive | None
    children: tuple[int, ...]
    goal_id: int | None
    value: float


class ActionTree:
    def __init__(self, states_p, states_v, states_a, parent, depth, time_to_come, goal_id,
                 first_child, n_children, primitives, goals, stats=None):
        self.p = np.asarray(states_p, dtype=float)
        self.v = np.asarray(states_v, dtype=float)
        self.a = np.asarray(states_a, dtype=float)
        self.parent = np.asarray(parent, dtype=np.int64)
        self.depth = np.asarray(depth, dtype=np.int64)
        self.time_to_come = np.asarray(time_to_come, dtype=float)
        self.goal_id = np.asarray(goal_id, dtype=np.int64)
        self.first_child = np.asarray(first_child, dtype=np.int64)
        self.n_children = np.asarray(n_children, dtype=np.int64)
        self.primitives = list(primitives)
        self.goals = tuple(goals)
        self.stats = stats or BuildStats()
        self.value = np.zeros(len(self.parent))
        self.terminals = np.flatnonzero(self.goal_id >= 0)
        self._levels = self._level_slices()

    root = 0

    def __len__(self) -> int:
        return len(self.parent)

    def children(self, i: int) -> range:
        f = int(self.first_child[i])
        return range(f, f + int(self.n_children[i]))

    def state(self, i: int) -> JointSpaceState:
        return JointSpaceState(self.p[i], self.v[i], self.a[i])

    def node(self, i: int) -> TreeNode:
        g = int(self.goal_id[i])
        return TreeNode(i, self.state(i), float(self.time_to_come[i]), int(self.depth[i]),
                        self.primitives[i], tuple(self.children(i)), g if g >= 0 else None,
                        float(self.value[i]))

    def terminals_by_goal(self) -> dict[int, np.ndarray]:
        return {g: self.terminals[self.goal_id[self.terminals] == g]
                for g in range(len(self.goals))}

    def _level_slices(self):
        """Per depth (deepest first): parents with children and their child span."""
        levels = []
        has = self.n_children > 0
        for d in range(int(self.depth.max()), -1, -1):
            idx = np.flatnonzero(has & (self.depth == d))
            if len(idx) == 0:
                continue
            lo = int(self.first_child[idx[0]])
            hi = int(self.first_child[idx[-1]] + self.n_children[idx[-1]])
            levels.append((idx, self.first_child[idx] - lo, lo, hi))
        return levels

    def backup(self) -> None:
        """Internal values become the max over children, deepest level first."""
        val = self.value
        internal = self.n_children > 0
        val[internal] = 0.0
        for idx, starts, lo, hi in self._levels:
            val[idx] = np.maximum.reduceat(val[lo:hi], starts)

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        prims = []
        for pr in self.primitives:
            if pr is None:
                prims.append(None)
                continue
            prims.append({
                "duration": pr.duration,
                "truncated": pr.truncated,
                "joints": [{"start": list(j.start.as_tuple()), "jerks": list(j.jerks),
                            "durations": list(j.durations)} for j in pr.profiles],
            })
        return {
            "format": "intercept-action-tree",
            "version": FORMAT_VERSION,
            "goals": [{"q_goal": g.q_goal.tolist(), "plane_yz": list(g.plane_yz),
                       "shield_half_extents": list(g.shield_half_extents)} for g in self.goals],
            "p": self.p.tolist(), "v": self.v.tolist(), "a": self.a.tolist(),
            "parent": self.parent.tolist(), "depth": self.depth.tolist(),
            "time_to_come": self.time_to_come.tolist(), "goal_id": self.goal_id.tolist(),
            "first_child": self.first_child.tolist(), "n_children": self.n_children.tolist(),
            "primitives": prims,
            "stats": self.stats.as_dict(timing=False),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ActionTree":
        if d.get("format") != "intercept-action-tree":
            raise ValueError("not an action tree file")
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported tree format version {d.get('version')}")
        goals = [GoalSpec(g["q_goal"], g["plane_yz"], g["shield_half_extents"]) for g in d["goals"]]
        prims = []
        for pr in d["primitives"]:
            if pr is None:
                prims.append(None)
                continue
            profs = tuple(JerkProfile1D(JointState1D(*j["start"]), tuple(j["jerks"]),
                                        tuple(j["durations"])) for j in pr["joints"])
            prims.append(MotionPrimitive(profs, pr["duration"], pr["truncated"]))
        stats = BuildStats(**{k: v for k, v in d.get("stats", {}).items()
                              if k in BuildStats.__dataclass_fields__})
        return cls(d["p"], d["v"], d["a"], d["parent"], d["depth"], d["time_to_come"],
                   d["goal_id"], d["first_child"], d["n_children"], prims, goals, stats)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "ActionTree":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def connect_to_close_goals(state: JointSpaceState, cfg: TreeConfig, stats: BuildStats):
    """Full primitives from ``state`` to every goal within the connection radius."""
    radius = cfg.connect_radius
    out = []
    for gid, goal in enumerate(cfg.goals):
        if np.linalg.norm(goal.q_goal - state.p) > radius:
            stats.goal_skipped_radius += 1
            continue
        try:
            prim = steer(state, goal.state, cfg.limits)
        except SteeringError:
            stats.goal_skipped_infeasible += 1
            continue
        if is_colliding(prim, cfg.keep_out, cfg.dt_col):
            stats.goal_skipped_collision += 1
            continue
        out.append((gid, prim))
    return out


def hold_primitive(state: JointSpaceState, duration: float) -> MotionPrimitive:
    """Stay at rest in ``state`` for ``duration`` seconds."""
    profiles = tuple(JerkProfile1D(state.joint(i), (0.0,), (float(duration),)) for i in range(state.dof))
    return MotionPrimitive(profiles, float(duration), False)


def build_action_tree(cfg: TreeConfig) -> ActionTree:
    t0 = time.perf_counter()
    stats = BuildStats()
    dof = cfg.start.dof
    P, V, A = [cfg.start.p], [cfg.start.v], [cfg.start.a]
    parent, depth, ttc, goal_id = [-1], [0], [0.0], [-1]
    first_child, n_children = [0], [0]
    prims: list = [None]

    def add(state, par, prim, gid):
        P.append(state.p)
        V.append(state.v)
        A.append(state.a)
        parent.append(par)
        depth.append(depth[par] + 1)
        ttc.append(ttc[par] + prim.duration)
        goal_id.append(gid)
        first_child.append(0)
        n_children.append(0)
        prims.append(prim)
        return len(parent) - 1

    queue = deque([0])
    while queue:
        i = queue.popleft()
        s = JointSpaceState(P[i], V[i], A[i])
        first_child[i] = len(parent)
        if depth[i] == cfg.d_max:
            for gid, prim in connect_to_close_goals(s, cfg, stats):
                add(cfg.goals[gid].state, i, prim, gid)
                stats.terminals_per_goal[gid] = stats.terminals_per_goal.get(gid, 0) + 1
        else:
            stats.expanded += 1
            for g in sub_goals(s, cfg):
                try:
                    prim = steer(s, g, cfg.limits, cfg.eps)
                except SteeringError:
                    stats.discarded_infeasible += 1
                    continue
                if is_colliding(prim, cfg.keep_out, cfg.dt_col):
                    stats.discarded_collision += 1
                    continue
                if prim.duration == 0.0:  # sub-goal is the resting state itself: wait in place
                    prim = hold_primitive(s, cfg.eps)
                    stats.waits += 1
                reached = prim.end if prim.truncated else g
                stats.truncated += prim.truncated
                queue.append(add(reached, i, prim, -1))
        n_children[i] = len(parent) - first_child[i]
        if i == 0 and n_children[0] == 0:
            raise EmptyTree("no feasible primitive leaves the start state")

    tree = ActionTree(np.array(P).reshape(-1, dof), np.array(V).reshape(-1, dof),
                      np.array(A).reshape(-1, dof), parent, depth, ttc, goal_id,
                      first_child, n_children, prims, cfg.goals, stats)
    stats.nodes = len(tree)
    stats.terminals = len(tree.terminals)
    hist = np.bincount(tree.depth)
    stats.depth_histogram = {int(d): int(c) for d, c in enumerate(hist) if c}
    stats.build_seconds = time.perf_counter() - t0
    return tree


def check_tree(tree: ActionTree, tol: float = TOL_STATE) -> None:
    """Structural invariants; raises AssertionError on violation."""
    n = len(tree)
    assert tree.parent[0] == -1 and tree.depth[0] == 0 and tree.time_to_come[0] == 0.0
    for i in range(1, n):
        par = tree.parent[i]
        assert 0 <= par < i
        assert i in tree.children(par)
        assert tree.depth[i] == tree.depth[par] + 1
        assert tree.time_to_come[i] == tree.time_to_come[par] + tree.primitives[i].duration
    for i in tree.terminals:
        g = tree.goals[tree.goal_id[i]]
        assert np.max(np.abs(tree.p[i] - g.q_goal)) <= tol
        assert np.max(np.abs(tree.v[i])) <= tol and np.max(np.abs(tree.a[i])) <= tol
        assert tree.n_children[i] == 0
