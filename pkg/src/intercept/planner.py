"""Online QMDP action selection over a prebuilt action tree.

Every belief update assigns each terminal node the probability that the arm
reaches its goal before the projectile crosses the plane inside the goal's
shield footprint.  Values are propagated to the root as a max over children,
and at every node boundary the arm takes the child with the largest value.
A naive baseline that simply chases the most likely goal is included for
comparison.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .belief import (
    CrossingBelief,
    DegenerateCrossing,
    FootprintTailTable,
    PlaneSpec,
    ProjectileBelief,
    project_to_plane,
    success_probability,
)
from .jerk import JointLimits, JointSpaceState, MotionPrimitive, SteeringError, sample_profile, steer
from .tree import ActionTree, GoalSpec

POLICIES = ("qmdp", "naive")


class NoChildren(RuntimeError):
    """Non-terminal leaf without goal connections."""


@dataclass(frozen=True)
class PolicyConfig:
    decision_mode: str = "qmdp"
    hold_on_degenerate: bool = True
    # how the most probable goal is ranked: "density" of the (Y, Z) marginal at
    # the goal centre, or "footprint" probability mass over the shield
    naive_goal_rank: str = "density"
    terminal_goal_rank: str = "footprint"

    def __post_init__(self):
        if self.decision_mode not in POLICIES:
            raise ValueError(f"decision_mode must be one of {POLICIES}")
        for r in (self.naive_goal_rank, self.terminal_goal_rank):
            if r not in ("density", "footprint"):
                raise ValueError("goal ranking must be 'density' or 'footprint'")


# -- values ------------------------------------------------------------------

def terminal_value(tree: ActionTree, node: int, cb: CrossingBelief, t_offset: float = 0.0) -> float:
    """Success probability of the terminal ``node``.

    ``t_offset`` converts tree time to the belief clock: the arm reaches the
    node ``t_offset + time_to_come`` seconds after the belief timestamp.
    """
    gid = int(tree.goal_id[node])
    if gid < 0:
        raise ValueError(f"node {node} is not terminal")
    fp = tree.goals[gid].footprint
    return success_probability(cb, fp, t_offset + float(tree.time_to_come[node]))


def terminal_table(tree: ActionTree, cb: CrossingBelief) -> FootprintTailTable:
    return FootprintTailTable(cb, [g.footprint for g in tree.goals])


def backup_values(tree: ActionTree, cb: CrossingBelief, t_offset: float = 0.0,
                  table: FootprintTailTable | None = None) -> float:
    """Write terminal values and max-propagate them to the root.

    Returns the wall-clock runtime in seconds.
    """
    t0 = time.perf_counter()
    if table is None:
        table = terminal_table(tree, cb)
    term = tree.terminals
    tree.value[term] = table.query(tree.goal_id[term], tree.time_to_come[term] + t_offset)
    tree.backup()
    return time.perf_counter() - t0


def best_child(tree: ActionTree, node: int) -> int:
    """Child with the largest value; ties go to the earlier arrival, then the lower index."""
    kids = tree.children(node)
    if len(kids) == 0:
        raise NoChildren(f"node {node} has no children")
    lo, hi = kids.start, kids.stop
    vals = tree.value[lo:hi]
    cand = np.flatnonzero(vals == vals.max())
    if len(cand) > 1:
        ttc = tree.time_to_come[lo:hi][cand]
        cand = cand[ttc == ttc.min()]
    return lo + int(cand[0])


def goal_scores(cb: CrossingBelief, goals: Sequence[GoalSpec], rank: str = "density",
                t_a: float = -math.inf) -> np.ndarray:
    """Score per goal for picking the most probable one.

    ``density`` evaluates the log density of the (Y, Z) marginal at each goal
    centre; ``footprint`` integrates over the shield rectangle.
    """
    if rank == "footprint":
        return np.array([success_probability(cb, g.footprint, t_a) for g in goals])
    m = cb.mean[:2]
    S = cb.cov[:2, :2]
    jitter = 1e-12 * max(1.0, float(np.trace(S)))
    S = S + np.eye(2) * jitter
    d = np.array([g.plane_yz for g in goals]) - m
    return -0.5 * np.einsum("gi,ij,gj->g", d, np.linalg.inv(S), d)


def most_probable_goal(cb: CrossingBelief, goals: Sequence[GoalSpec], rank: str = "density",
                       t_a: float = -math.inf) -> int:
    return int(np.argmax(goal_scores(cb, goals, rank, t_a)))  # first index wins ties


def naive_policy(state: JointSpaceState, cb: CrossingBelief, goals: Sequence[GoalSpec],
                 limits: Sequence[JointLimits], rank: str = "density") -> tuple[int, MotionPrimitive]:
    """Min-time move from the current state to the most likely goal."""
    gid = most_probable_goal(cb, goals, rank)
    return gid, steer(state, goals[gid].state, limits)


# -- execution ---------------------------------------------------------------

@dataclass
class ExecutionState:
    """Where the arm is in the tree and what it is currently executing.

    ``node`` is the last tree node reached.  ``t_root`` is the global time the
    arm left the root (None until the first decision).  Once the arm commits
    to a goal outside the tree (terminal fallback, dead end or the naive
    policy) ``off_tree`` is set and ``node`` is no longer meaningful.
    """

    node: int = 0
    t_root: float | None = None
    primitive: MotionPrimitive | None = None
    start_time: float = 0.0
    child: int | None = None
    goal: int | None = None
    off_tree: bool = False

    def in_flight(self, now: float) -> bool:
        return self.primitive is not None and now < self.start_time + self.primitive.duration

    def state_at(self, now: float, fallback: JointSpaceState) -> JointSpaceState:
        if self.primitive is None:
            return fallback
        t = min(max(now - self.start_time, 0.0), self.primitive.duration)
        return sample_profile(self.primitive, t)


@dataclass(frozen=True)
class Decision:
    timestamp: float
    kind: str  # "child", "commit", "continue", "hold"
    latency: float = 0.0
    child: int | None = None
    goal: int | None = None
    root_value: float | None = None
    map_goal: int | None = None
    primitive: MotionPrimitive | None = field(default=None, repr=False)
    reason: str = ""

    def log_record(self) -> dict:
        return {"timestamp": self.timestamp, "kind": self.kind, "latency": self.latency,
                "selected_child": self.child, "goal": self.goal, "root_value": self.root_value,
                "map_goal": self.map_goal, "reason": self.reason}


class Planner:
    """Single-threaded planning loop for one throw.

    In QMDP mode the arm follows tree primitives, choosing a child at every
    node boundary.  After a terminal node (or a dead end) every belief update
    re-targets the goal with the largest timed success probability, preempting
    the current move only when another goal scores strictly higher.
    """

    def __init__(self, tree: ActionTree, limits: Sequence[JointLimits], plane: PlaneSpec = PlaneSpec(),
                 cfg: PolicyConfig = PolicyConfig(), transfer_times: np.ndarray | None = None):
        self.tree = tree
        self.goals = tree.goals
        self.limits = tuple(limits)
        self.plane = plane
        self.cfg = cfg
        self._transfer = transfer_times
        self.reset()

    def reset(self) -> None:
        self.tree.value[:] = 0.0
        self.exec = ExecutionState()
        self.cb: CrossingBelief | None = None
        self.log: list[Decision] = []
        self.dead_ends = 0
        self.degenerate = 0

    @property
    def transfer_times(self) -> np.ndarray:
        """Min-time durations between goal rest states, ``[from, to]``."""
        if self._transfer is None:
            self._transfer = goal_transfer_times(self.goals, self.limits)
        return self._transfer

    def current_state(self, now: float) -> JointSpaceState:
        ex = self.exec
        if ex.primitive is None:
            return self.tree.state(ex.node)
        return ex.state_at(now, self.tree.state(0))

    def _record(self, d: Decision) -> Decision:
        self.log.append(d)
        return d

    def _map_goal(self) -> int:
        return most_probable_goal(self.cb, self.goals, "density")

    def _fallback_scores(self, now: float, state: JointSpaceState):
        """Per-goal score and, when steering was needed, the primitive to each goal.

        Timed scores use the success probability with the arrival time known
        cheaply: the goal-to-goal table when at rest at a goal, or finishing
        the current move first when travelling to one.
        """
        ex = self.exec
        if self.cfg.terminal_goal_rank == "density":
            return goal_scores(self.cb, self.goals, "density"), None
        at = None
        if ex.goal is not None:
            rem = ex.start_time + ex.primitive.duration - now if ex.primitive is not None else 0.0
            at = max(rem, 0.0) + self.transfer_times[ex.goal]
            prims = None
        else:  # moving node off the goal set: steer to every goal
            prims = []
            for g in self.goals:
                try:
                    prims.append(steer(state, g.state, self.limits))
                except SteeringError:
                    prims.append(None)
            at = np.array([p.duration if p is not None else math.inf for p in prims])
        scores = np.array([success_probability(self.cb, g.footprint, float(t)) if math.isfinite(t) else -1.0
                           for g, t in zip(self.goals, at)])
        return scores, prims

    def _fallback(self, now: float, t0: float, reason: str, root_value=None) -> Decision:
        """Move towards the most probable goal, keeping the current target on ties."""
        ex = self.exec
        state = self.current_state(now)
        scores, prims = self._fallback_scores(now, state)
        best = int(np.argmax(scores))
        if ex.goal is not None and scores[ex.goal] >= scores[best]:
            return Decision(now, "continue", time.perf_counter() - t0, goal=ex.goal, root_value=root_value,
                            map_goal=self._map_goal(), reason=reason)
        if scores[best] < 0:
            return Decision(now, "continue", time.perf_counter() - t0, goal=ex.goal,
                            map_goal=self._map_goal(), reason=f"{reason}: no goal reachable")
        try:
            pr = prims[best] if prims is not None else steer(state, self.goals[best].state, self.limits)
        except SteeringError as exc:
            return Decision(now, "continue", time.perf_counter() - t0, goal=ex.goal,
                            map_goal=self._map_goal(), reason=f"{reason}: steer failed: {exc}")
        ex.primitive, ex.start_time, ex.child, ex.goal, ex.off_tree = pr, now, None, best, True
        if ex.t_root is None:
            ex.t_root = now
        return Decision(now, "commit", time.perf_counter() - t0, goal=best, root_value=root_value,
                        map_goal=self._map_goal(), primitive=pr, reason=reason)

    def _advance(self, now: float) -> float:
        """Move the tree pointer past a finished tree primitive.

        Returns the time at which the arm reached its current node.
        """
        ex = self.exec
        if ex.child is not None and not ex.in_flight(now):
            t_end = ex.start_time + ex.primitive.duration
            ex.node, ex.child = ex.child, None
            ex.primitive = None
            ex.start_time = t_end
            return t_end
        return now

    def _decide_at_boundary(self, now: float, t0: float) -> Decision:
        """Pick the next primitive for an arm standing at node ``ex.node`` since ``now``."""
        ex = self.exec
        tree = self.tree
        root_value = float(tree.value[0])
        gid = int(tree.goal_id[ex.node])
        if gid >= 0:
            ex.goal, ex.off_tree = gid, True
            return self._fallback(now, t0, "terminal", root_value)
        try:
            c = best_child(tree, ex.node)
        except NoChildren:
            self.dead_ends += 1
            ex.goal, ex.off_tree = None, True
            return self._fallback(now, t0, "dead-end", root_value)
        if ex.t_root is None:
            ex.t_root = now
        ex.primitive, ex.start_time, ex.child = tree.primitives[c], now, c
        ex.goal = None
        return Decision(now, "child", time.perf_counter() - t0, child=c, root_value=root_value,
                        map_goal=self._map_goal(), primitive=tree.primitives[c])

    def on_belief(self, belief: ProjectileBelief, now: float) -> Decision:
        """One planning cycle triggered by a new belief at global time ``now``."""
        t0 = time.perf_counter()
        try:
            cb = project_to_plane(belief, self.plane)
        except DegenerateCrossing as exc:
            self.degenerate += 1
            return self._record(Decision(now, "hold", time.perf_counter() - t0, reason=str(exc)))
        # crossing time measured from ``now``
        self.cb = cb.shifted(belief.timestamp - now) if belief.timestamp != now else cb
        ex = self.exec
        if self.cfg.decision_mode == "naive":
            try:
                gid, pr = naive_policy(self.current_state(now), self.cb, self.goals, self.limits,
                                       self.cfg.naive_goal_rank)
            except SteeringError as exc:  # keep the current motion
                return self._record(Decision(now, "continue", time.perf_counter() - t0, goal=ex.goal,
                                             map_goal=self._map_goal(), reason=f"steer failed: {exc}"))
            ex.primitive, ex.start_time, ex.goal, ex.off_tree = pr, now, gid, True
            if ex.t_root is None:
                ex.t_root = now
            return self._record(Decision(now, "commit", time.perf_counter() - t0, goal=gid,
                                         map_goal=gid, primitive=pr, reason="naive"))
        if ex.off_tree:
            return self._record(self._fallback(now, t0, "retarget" if ex.in_flight(now) else "at-goal"))
        t_node = self._advance(now)
        t_root = ex.t_root if ex.t_root is not None else now
        backup_values(self.tree, self.cb, t_root - now)
        if ex.in_flight(now):
            return self._record(Decision(now, "continue", time.perf_counter() - t0, child=ex.child,
                                         root_value=float(self.tree.value[0]),
                                         map_goal=self._map_goal()))
        return self._record(self._decide_at_boundary(t_node, t0))

    def on_boundary(self, now: float) -> Decision | None:
        """Called when a tree primitive finishes between belief updates."""
        ex = self.exec
        if self.cfg.decision_mode != "qmdp" or ex.off_tree or self.cb is None:
            return None
        if ex.child is None or ex.in_flight(now):
            return None
        t0 = time.perf_counter()
        return self._record(self._decide_at_boundary(self._advance(now), t0))

    def write_log(self, path) -> None:
        with open(path, "w") as fh:
            for d in self.log:
                fh.write(json.dumps(d.log_record()) + "\n")


def goal_transfer_times(goals: Sequence[GoalSpec], limits: Sequence[JointLimits]) -> np.ndarray:
    n = len(goals)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                out[i, j] = steer(goals[i].state, goals[j].state, limits).duration
    return out


def planning_cycle(planner: Planner, belief: ProjectileBelief, now: float) -> Decision:
    return planner.on_belief(belief, now)

