"""Minimum-time jerk-limited steering for triple-integrator joints.

Each joint obeys ``p' = v, v' = a, a' = u`` with ``|u| <= u_max`` and box
bounds on position, velocity and acceleration.  Time-optimal profiles are
bang-off-bang in jerk; they are found by enumerating the admissible
switching structures and solving each one for its free parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

TOL_STATE = 1e-6
TOL_TIME = 1e-5

_N_SAMPLES = 49
_EPS = 1e-12


class SteeringError(Exception):
    pass


class Infeasible(SteeringError):
    pass


class NumericFailure(SteeringError):
    pass


class OutOfRange(SteeringError, ValueError):
    pass


@dataclass(frozen=True)
class JointLimits:
    p_min: float
    p_max: float
    v_min: float
    v_max: float
    a_min: float
    a_max: float
    u_max: float

    def __post_init__(self):
        if not self.p_min < self.p_max:
            raise ValueError("p_min must be < p_max")
        if not self.v_min < 0.0 < self.v_max:
            raise ValueError("need v_min < 0 < v_max")
        if not self.a_min < 0.0 < self.a_max:
            raise ValueError("need a_min < 0 < a_max")
        if not self.u_max > 0.0:
            raise ValueError("u_max must be positive")

    @classmethod
    def symmetric(cls, p: float, v: float, a: float, u: float) -> "JointLimits":
        return cls(-p, p, -v, v, -a, a, u)

    def mirrored(self) -> "JointLimits":
        return JointLimits(-self.p_max, -self.p_min, -self.v_max, -self.v_min,
                           -self.a_max, -self.a_min, self.u_max)

    def scaled(self, s: float) -> "JointLimits":
        """Limits with jerk and acceleration magnitudes multiplied by ``s``."""
        return JointLimits(self.p_min, self.p_max, self.v_min, self.v_max,
                           s * self.a_min, s * self.a_max, s * self.u_max)

    def contains(self, st: "JointState1D", tol: float = TOL_STATE) -> bool:
        return (self.p_min - tol <= st.p <= self.p_max + tol
                and self.v_min - tol <= st.v <= self.v_max + tol
                and self.a_min - tol <= st.a <= self.a_max + tol)


@dataclass(frozen=True)
class JointState1D:
    p: float
    v: float = 0.0
    a: float = 0.0

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.p, self.v, self.a)

    def mirrored(self) -> "JointState1D":
        return JointState1D(-self.p, -self.v, -self.a)


def integrate(p, v, a, segments):
    """Integrate constant-jerk ``segments`` ((jerk, duration) pairs).

    Works elementwise on numpy arrays as well as on floats.
    """
    for u, t in segments:
        t2 = t * t
        p = p + v * t + 0.5 * a * t2 + u * t2 * t / 6.0
        v = v + a * t + 0.5 * u * t2
        a = a + u * t
    return p, v, a


@dataclass(frozen=True)
class JerkProfile1D:
    start: JointState1D
    jerks: tuple[float, ...]
    durations: tuple[float, ...]
    _knots: np.ndarray = field(init=False, repr=False, compare=False)
    _states: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.jerks) != len(self.durations):
            raise ValueError("jerks and durations differ in length")
        if any(not d >= 0.0 for d in self.durations):
            raise ValueError("segment durations must be non-negative")
        knots = np.zeros(len(self.durations) + 1)
        states = np.zeros((len(self.durations) + 1, 3))
        p, v, a = self.start.as_tuple()
        states[0] = (p, v, a)
        t = 0.0
        for i, (u, d) in enumerate(zip(self.jerks, self.durations)):
            p, v, a = integrate(p, v, a, ((u, d),))
            t += d
            knots[i + 1] = t
            states[i + 1] = (p, v, a)
        object.__setattr__(self, "_knots", knots)
        object.__setattr__(self, "_states", states)

    @property
    def total_duration(self) -> float:
        return float(self._knots[-1])

    @property
    def segments(self) -> list[tuple[float, float]]:
        return list(zip(self.jerks, self.durations))

    @property
    def end(self) -> JointState1D:
        return JointState1D(*map(float, self._states[-1]))

    def state_at(self, t: float) -> JointState1D:
        p, v, a = self.sample(np.array([t]))
        return JointState1D(float(p[0]), float(v[0]), float(a[0]))

    def sample(self, ts) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Positions, velocities and accelerations at times ``ts``.

        Times beyond the end extrapolate with zero jerk.
        """
        ts = np.asarray(ts, dtype=float)
        if not self.jerks:
            p0, v0, a0 = self.start.as_tuple()
            return integrate(np.full_like(ts, p0), np.full_like(ts, v0),
                             np.full_like(ts, a0), ((0.0, ts),))
        idx = np.clip(np.searchsorted(self._knots, ts, side="right") - 1,
                      0, len(self.jerks))
        u = np.append(np.asarray(self.jerks, dtype=float), 0.0)[idx]
        dt = ts - self._knots[idx]
        st = self._states[idx]
        return integrate(st[:, 0], st[:, 1], st[:, 2], ((u, dt),))

    def truncated(self, t_end: float) -> "JerkProfile1D":
        """The same motion cut off at ``t_end``."""
        jerks, durs = [], []
        acc = 0.0
        for u, d in zip(self.jerks, self.durations):
            if acc >= t_end:
                break
            d = min(d, t_end - acc)
            jerks.append(u)
            durs.append(d)
            acc += d
        if acc < t_end:
            jerks.append(0.0)
            durs.append(t_end - acc)
        return JerkProfile1D(self.start, tuple(jerks), tuple(durs))

    def extremes(self) -> dict[str, tuple[float, float]]:
        """Min/max of p, v, a over the whole profile (analytic)."""
        ps, vs, as_ = [list(self._states[:, k]) for k in range(3)]
        for i, (u, d) in enumerate(zip(self.jerks, self.durations)):
            p0, v0, a0 = self._states[i]
            if u != 0.0:
                tv = -a0 / u
                if 0.0 < tv < d:
                    vs.append(v0 - 0.5 * a0 * a0 / u)
            # position extrema where v(t) = v0 + a0 t + u t^2 / 2 = 0
            for tp in _quad_roots(0.5 * u, a0, v0):
                if 0.0 < tp < d:
                    ps.append(integrate(p0, v0, a0, ((u, tp),))[0])
        return {"p": (min(ps), max(ps)), "v": (min(vs), max(vs)),
                "a": (min(as_), max(as_))}

    def within(self, lim: JointLimits, tol: float = TOL_STATE) -> bool:
        ex = self.extremes()
        return (ex["p"][0] >= lim.p_min - tol and ex["p"][1] <= lim.p_max + tol
                and ex["v"][0] >= lim.v_min - tol and ex["v"][1] <= lim.v_max + tol
                and ex["a"][0] >= lim.a_min - tol and ex["a"][1] <= lim.a_max + tol)


def _quad_roots(c2, c1, c0) -> list[float]:
    if abs(c2) < 1e-300:
        return [] if abs(c1) < 1e-300 else [-c0 / c1]
    disc = c1 * c1 - 4.0 * c2 * c0
    if disc < 0.0:
        return []
    s = math.sqrt(disc)
    q = -0.5 * (c1 + math.copysign(s, c1))
    roots = [q / c2]
    if q != 0.0:
        roots.append(c0 / q)
    return roots


# ---------------------------------------------------------------------------
# profile building blocks
# ---------------------------------------------------------------------------

def velocity_change(v0: float, a0: float, v1: float, a1: float, j: float,
                    a_min: float, a_max: float):
    """Time-optimal (v, a) transfer of a jerk-bounded double integrator.

    Returns ``(duration, segments)``; position is not constrained.
    """
    dv = v1 - v0
    best = None
    # jerk up, then down
    sq = j * dv + 0.5 * (a0 * a0 + a1 * a1)
    lo = max(a0, a1)
    if sq >= -_EPS:
        r = math.sqrt(max(sq, 0.0))
        peak = -r if -r >= lo - 1e-9 else (r if r >= lo - 1e-9 else None)
        if peak is not None:
            peak = max(peak, lo)
            if peak > a_max:
                tp = (dv - (2 * a_max * a_max - a0 * a0 - a1 * a1) / (2 * j)) / a_max
                segs = [(j, (a_max - a0) / j), (0.0, max(tp, 0.0)), (-j, (a_max - a1) / j)]
            else:
                segs = [(j, (peak - a0) / j), (-j, (peak - a1) / j)]
            best = segs
    # jerk down, then up
    sq = -j * dv + 0.5 * (a0 * a0 + a1 * a1)
    hi = min(a0, a1)
    if sq >= -_EPS:
        r = math.sqrt(max(sq, 0.0))
        trough = r if r <= hi + 1e-9 else (-r if -r <= hi + 1e-9 else None)
        if trough is not None:
            trough = min(trough, hi)
            if trough < a_min:
                tp = (dv - (a0 * a0 + a1 * a1 - 2 * a_min * a_min) / (2 * j)) / a_min
                segs = [(-j, (a0 - a_min) / j), (0.0, max(tp, 0.0)), (j, (a1 - a_min) / j)]
            else:
                segs = [(-j, (a0 - trough) / j), (j, (a1 - trough) / j)]
            if best is None or sum(d for _, d in segs) < sum(d for _, d in best):
                best = segs
    if best is None:
        return None
    return sum(d for _, d in best), best


def _velocity_change_arrays(v0, a0, v1, a1, j: float, a_min: float, a_max: float):
    """Vectorized :func:`velocity_change` as three (jerk, duration) array pairs.

    Returns ``(duration, segments)`` with nan durations where no transfer exists.
    """
    v0, a0, v1, a1 = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (v0, a0, v1, a1)))
    dv = v1 - v0
    half = 0.5 * (a0 * a0 + a1 * a1)
    with np.errstate(invalid="ignore"):
        # jerk up, then down
        sq = j * dv + half
        r = np.sqrt(np.maximum(sq, 0.0))
        lo = np.maximum(a0, a1)
        peak = np.where(-r >= lo - 1e-9, -r, np.where(r >= lo - 1e-9, r, np.nan))
        peak = np.where(sq >= -_EPS, np.maximum(peak, lo), np.nan)
        flat = peak > a_max
        tp = np.where(flat, np.maximum((dv - (2 * a_max * a_max - a0 * a0 - a1 * a1) / (2 * j)) / a_max, 0.0), 0.0)
        top = np.where(flat, a_max, peak)
        up = ((a0 * 0 + j, (top - a0) / j), (a0 * 0, tp), (a0 * 0 - j, (top - a1) / j))
        t_up = (top - a0) / j + tp + (top - a1) / j
        # jerk down, then up
        sq = -j * dv + half
        r = np.sqrt(np.maximum(sq, 0.0))
        hi = np.minimum(a0, a1)
        trough = np.where(r <= hi + 1e-9, r, np.where(-r <= hi + 1e-9, -r, np.nan))
        trough = np.where(sq >= -_EPS, np.minimum(trough, hi), np.nan)
        flat = trough < a_min
        tp = np.where(flat, np.maximum((dv - (a0 * a0 + a1 * a1 - 2 * a_min * a_min) / (2 * j)) / a_min, 0.0), 0.0)
        bot = np.where(flat, a_min, trough)
        down = ((a0 * 0 - j, (a0 - bot) / j), (a0 * 0, tp), (a0 * 0 + j, (a1 - bot) / j))
        t_down = (a0 - bot) / j + tp + (a1 - bot) / j
        use_down = np.isnan(t_up) | (t_down < t_up)
    segs = tuple((np.where(use_down, du, uu), np.where(use_down, dd, ud))
                 for (uu, ud), (du, dd) in zip(up, down))
    return np.where(use_down, t_down, t_up), segs


def _roots_1d(fun, lo: float, hi: float, n: int = _N_SAMPLES) -> list[float]:
    """All sign changes of ``fun`` over [lo, hi]; ``fun`` may return nan."""
    if not hi >= lo:
        return []
    if hi - lo < 1e-14:
        xs = np.array([lo])
    else:
        xs = np.linspace(lo, hi, n)
    with np.errstate(all="ignore"):
        fs = np.asarray(fun(xs), dtype=float)
        ok = np.isfinite(fs)
        edges = np.nonzero(ok[:-1] != ok[1:])[0]
        if len(edges):
            # insert the exact edge of the valid region between mixed samples
            extra_x = []
            for i in edges:
                good, bad = (xs[i], xs[i + 1]) if ok[i] else (xs[i + 1], xs[i])
                for _ in range(60):
                    mid = 0.5 * (good + bad)
                    if np.isfinite(fun(mid)):
                        good = mid
                    else:
                        bad = mid
                extra_x.append(good)
            xs = np.sort(np.concatenate([xs, extra_x]))
            fs = np.asarray(fun(xs), dtype=float)
    scale = 1.0 + np.nanmax(np.abs(fs)) if np.any(np.isfinite(fs)) else 1.0
    roots = []
    for i in range(len(xs)):
        if np.isfinite(fs[i]) and abs(fs[i]) <= 1e-13 * scale:
            roots.append(float(xs[i]))
    for i in range(len(xs) - 1):
        f0, f1 = fs[i], fs[i + 1]
        if not (np.isfinite(f0) and np.isfinite(f1)):
            continue
        if f0 * f1 < 0.0:
            try:
                roots.append(brentq(lambda x: float(fun(x)), xs[i], xs[i + 1],
                                    xtol=1e-15, rtol=1e-15, maxiter=200))
            except (ValueError, RuntimeError):
                continue
    return roots


def _structure_candidates(start: JointState1D, goal: JointState1D, lim: JointLimits):
    """Segment lists of every up-first profile (jerk pattern +,0,-,0,-,0,+)."""
    p0, v0, a0 = start.as_tuple()
    pf, vf, af = goal.as_tuple()
    j = lim.u_max
    amax, amin, vmax = lim.a_max, lim.a_min, lim.v_max
    dv = vf - v0
    out = []

    # cruise at v_max between two velocity transfers
    first = velocity_change(v0, a0, vmax, 0.0, j, amin, amax)
    second = velocity_change(vmax, 0.0, vf, af, j, amin, amax)
    if first is not None and second is not None:
        pa = integrate(p0, v0, a0, first[1])[0]
        pb = integrate(0.0, vmax, 0.0, second[1])[0]
        t4 = (pf - pa - pb) / vmax
        if t4 >= -1e-12:
            out.append(first[1] + [(0.0, max(t4, 0.0))] + second[1])

    def segs(A1, A2, t2, t6):
        return [(j, (A1 - a0) / j), (0.0, t2), (-j, (A1 - A2) / j),
                (0.0, t6), (j, (af - A2) / j)]

    def resid(A1, A2, t2, t6):
        return integrate(p0, v0, a0, segs(A1, A2, t2, t6))[0] - pf

    def valid(A1, A2, t2, t6):
        return ((A1 >= a0 - 1e-12) & (A1 <= amax + 1e-12) & (A2 >= amin - 1e-12)
                & (A2 <= af + 1e-12) & (A1 >= A2 - 1e-12) & (t2 >= -1e-12) & (t6 >= -1e-12))

    # no plateau: A1^2 - A2^2 = K
    K = j * dv + 0.5 * (a0 * a0 - af * af)
    if K >= 0.0:
        def pair(A2):
            A2 = np.asarray(A2, dtype=float) if np.ndim(A2) else A2
            return np.sqrt(A2 * A2 + K), A2
        lo, hi = amin, min(af, amax)
    else:
        def pair(A1):
            A1 = np.asarray(A1, dtype=float) if np.ndim(A1) else A1
            return A1, -np.sqrt(A1 * A1 - K)
        lo, hi = a0, amax

    def f_none(x):
        A1, A2 = pair(x)
        r = resid(A1, A2, 0.0, 0.0)
        return np.where(valid(A1, A2, 0.0, 0.0), r, np.nan)

    for x in _roots_1d(f_none, lo, hi):
        A1, A2 = pair(x)
        out.append(segs(float(A1), float(A2), 0.0, 0.0))

    # plateau at a_max only
    def t2_of(A2):
        return (dv - (2 * amax * amax - a0 * a0 - 2 * A2 * A2 + af * af) / (2 * j)) / amax

    def f_acc0(A2):
        t2 = t2_of(A2)
        return np.where(valid(amax, A2, t2, 0.0), resid(amax, A2, t2, 0.0), np.nan)

    for A2 in _roots_1d(f_acc0, amin, min(af, amax)):
        out.append(segs(amax, A2, max(float(t2_of(A2)), 0.0), 0.0))

    # plateau at a_min only
    def t6_of(A1):
        return (dv - (2 * A1 * A1 - a0 * a0 - 2 * amin * amin + af * af) / (2 * j)) / amin

    def f_acc1(A1):
        t6 = t6_of(A1)
        return np.where(valid(A1, amin, 0.0, t6), resid(A1, amin, 0.0, t6), np.nan)

    for A1 in _roots_1d(f_acc1, max(a0, amin), amax):
        out.append(segs(A1, amin, 0.0, max(float(t6_of(A1)), 0.0)))

    # both plateaus: amax*t2 + amin*t6 = C, residual quadratic in t2
    C = dv - (2 * amax * amax - a0 * a0 - 2 * amin * amin + af * af) / (2 * j)
    t2_lo = max(0.0, C / amax)
    probe = np.array([t2_lo, t2_lo + 1.0, t2_lo + 2.0])
    vals = resid(amax, amin, probe, (C - amax * probe) / amin)
    c2 = 0.5 * (vals[2] - 2 * vals[1] + vals[0])
    c1 = vals[1] - vals[0] - c2
    for s in _quad_roots(c2, c1, vals[0]):
        if s >= -1e-9:
            t2 = t2_lo + max(s, 0.0)
            t6 = (C - amax * t2) / amin
            if t6 >= -1e-12:
                out.append(segs(amax, amin, t2, max(t6, 0.0)))
    return out


def _clean(segments) -> tuple[tuple[float, ...], tuple[float, ...]]:
    jerks, durs = [], []
    for u, d in segments:
        d = float(d)
        if d <= 0.0:
            continue
        u = float(u)
        if jerks and jerks[-1] == u:
            durs[-1] += d
        else:
            jerks.append(u)
            durs.append(d)
    return tuple(jerks), tuple(durs)


def _check_endpoint(state: JointState1D, lim: JointLimits, what: str, at_start: bool):
    if not lim.contains(state):
        raise Infeasible(f"{what} state {state} outside limits")
    # velocity reached when acceleration is driven to zero as fast as possible
    j = lim.u_max
    a = state.a
    if at_start:
        v_rest = state.v + a * abs(a) / (2 * j)
    else:
        v_rest = state.v - a * abs(a) / (2 * j)
    if not lim.v_min - TOL_STATE <= v_rest <= lim.v_max + TOL_STATE:
        raise Infeasible(f"{what} state {state} cannot avoid a velocity limit")


def _clip_state(s: JointState1D, lim: JointLimits) -> JointState1D:
    return JointState1D(min(max(s.p, lim.p_min), lim.p_max),
                        min(max(s.v, lim.v_min), lim.v_max),
                        min(max(s.a, lim.a_min), lim.a_max))


def _terminal_error(prof: JerkProfile1D, goal: JointState1D) -> float:
    e = prof.end
    return max(abs(e.p - goal.p), abs(e.v - goal.v), abs(e.a - goal.a))


def _min_time_candidates(start, goal, lim):
    """(duration, jerks, durations) of every valid candidate, both directions."""
    found = []
    for sign in (1.0, -1.0):
        if sign > 0:
            s, g, l = start, goal, lim
        else:
            s, g, l = start.mirrored(), goal.mirrored(), lim.mirrored()
        for segs in _structure_candidates(s, g, l):
            if any(not math.isfinite(d) or d < -1e-9 for _, d in segs):
                continue
            jerks, durs = _clean((sign * u, max(d, 0.0)) for u, d in segs)
            prof = JerkProfile1D(start, jerks, durs)
            if _terminal_error(prof, goal) > 1e-8:
                continue
            ex = prof.extremes()
            if (ex["v"][0] < lim.v_min - 1e-9 or ex["v"][1] > lim.v_max + 1e-9
                    or ex["a"][0] < lim.a_min - 1e-9 or ex["a"][1] > lim.a_max + 1e-9):
                continue
            found.append((prof.total_duration, prof))
    found.sort(key=lambda x: x[0])
    return found


def solve_min_time_1d(start: JointState1D, goal: JointState1D,
                      limits: JointLimits) -> JerkProfile1D:
    """Minimum-time jerk-limited profile from ``start`` to ``goal``.

    Raises :class:`Infeasible` when the goal cannot be reached inside the
    limits (including when the optimal motion would leave the position
    range) and :class:`NumericFailure` if no switching structure solves.
    """
    _check_endpoint(start, limits, "start", True)
    _check_endpoint(goal, limits, "goal", False)
    start = _clip_state(start, limits)
    goal = _clip_state(goal, limits)
    if start == goal:
        return JerkProfile1D(start, (), ())
    found = _min_time_candidates(start, goal, limits)
    if not found:
        raise NumericFailure(f"no switching structure solves {start} -> {goal}")
    prof = found[0][1]
    lo, hi = prof.extremes()["p"]
    if lo < limits.p_min - TOL_STATE or hi > limits.p_max + TOL_STATE:
        raise Infeasible("time-optimal motion leaves the position range")
    return prof


def _cruise_family(start, goal, lim, T):
    """Velocity transfer, cruise at ``vc``, velocity transfer; total time T."""
    p0, v0, a0 = start.as_tuple()
    pf, vf, af = goal.as_tuple()
    j = lim.u_max

    def build(vc):
        first = velocity_change(v0, a0, vc, 0.0, j, lim.a_min, lim.a_max)
        second = velocity_change(vc, 0.0, vf, af, j, lim.a_min, lim.a_max)
        if first is None or second is None:
            return None
        tc = T - first[0] - second[0]
        if tc < -1e-12:
            return None
        return first[1] + [(0.0, max(tc, 0.0))] + second[1]

    def resid(vc):
        if np.ndim(vc) == 0:
            segs = build(float(vc))
            return np.nan if segs is None else integrate(p0, v0, a0, segs)[0] - pf
        vc = np.asarray(vc, dtype=float)
        t1, s1 = _velocity_change_arrays(v0, a0, vc, 0.0, j, lim.a_min, lim.a_max)
        t2, s2 = _velocity_change_arrays(vc, 0.0, vf, af, j, lim.a_min, lim.a_max)
        tc = T - t1 - t2
        segs = list(s1) + [(0.0, np.maximum(tc, 0.0))] + list(s2)
        with np.errstate(invalid="ignore"):
            out = integrate(p0, v0, a0, segs)[0] - pf
        out = np.where(tc >= -1e-12, out, np.nan)
        return out if out.size > 1 else out[0]

    roots = _roots_1d(resid, lim.v_min, lim.v_max, n=65)
    roots.sort(key=abs)
    for vc in roots:
        segs = build(vc)
        if segs is None:
            continue
        prof = JerkProfile1D(start, *_clean(segs))
        if (_terminal_error(prof, goal) <= 1e-8 and prof.within(lim, 1e-9)
                and abs(prof.total_duration - T) <= 1e-9):
            return prof
    return None


def _scaled_family(start, goal, lim, T):
    """Bisection on a uniform jerk/acceleration scale until duration is T."""
    s_lo = max(abs(start.a) / (lim.a_max if start.a > 0 else -lim.a_min) if start.a else 0.0,
               abs(goal.a) / (lim.a_max if goal.a > 0 else -lim.a_min) if goal.a else 0.0,
               1e-6)

    def duration(s):
        try:
            prof = solve_min_time_1d(start, goal, lim.scaled(s))
        except SteeringError:
            return math.inf, None
        return prof.total_duration, prof

    d_lo, _ = duration(s_lo)
    if not d_lo >= T:
        return None
    lo, hi = s_lo, 1.0
    prof = None
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        d, p = duration(mid)
        if d > T:
            lo = mid
        else:
            hi, prof = mid, p
        if prof is not None and abs(prof.total_duration - T) <= 0.1 * TOL_TIME:
            break
    if prof is None or abs(prof.total_duration - T) > TOL_TIME:
        return None
    return prof


def solve_fixed_time_1d(start: JointState1D, goal: JointState1D,
                        limits: JointLimits, T_target: float,
                        fastest: JerkProfile1D | None = None) -> JerkProfile1D:
    """Jerk-limited profile reaching ``goal`` at exactly ``T_target``.

    ``fastest`` may pass in an already computed minimum-time profile.
    """
    if fastest is None:
        fastest = solve_min_time_1d(start, goal, limits)
    t_min = fastest.total_duration
    if T_target < t_min - TOL_TIME:
        raise Infeasible(f"T_target {T_target:.6f} below minimum time {t_min:.6f}")
    if T_target <= t_min + 1e-12:
        return fastest
    start = _clip_state(start, limits)
    goal = _clip_state(goal, limits)
    if start.v == 0.0 and start.a == 0.0 and start == goal:
        return JerkProfile1D(start, (0.0,), (T_target,))
    prof = _cruise_family(start, goal, limits, T_target)
    if prof is None:
        prof = _scaled_family(start, goal, limits, T_target)
    if prof is None:
        if T_target <= t_min + TOL_TIME:
            return fastest
        raise Infeasible(f"no profile of duration {T_target:.6f} reaches the goal")
    lo, hi = prof.extremes()["p"]
    if lo < limits.p_min - TOL_STATE or hi > limits.p_max + TOL_STATE:
        raise Infeasible("synchronized motion leaves the position range")
    return prof


# ---------------------------------------------------------------------------
# multi-joint primitives
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class JointSpaceState:
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        for name in ("p", "v", "a"):
            arr = np.array(getattr(self, name), dtype=float).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def at_rest(cls, q) -> "JointSpaceState":
        q = np.asarray(q, dtype=float)
        return cls(q, np.zeros_like(q), np.zeros_like(q))

    @property
    def dof(self) -> int:
        return len(self.p)

    def joint(self, i: int) -> JointState1D:
        return JointState1D(float(self.p[i]), float(self.v[i]), float(self.a[i]))

    @classmethod
    def from_joints(cls, joints: Sequence[JointState1D]) -> "JointSpaceState":
        return cls([s.p for s in joints], [s.v for s in joints], [s.a for s in joints])

    def __eq__(self, other):
        if not isinstance(other, JointSpaceState):
            return NotImplemented
        return (np.array_equal(self.p, other.p) and np.array_equal(self.v, other.v)
                and np.array_equal(self.a, other.a))

    def max_error(self, other: "JointSpaceState") -> float:
        return float(max(np.max(np.abs(self.p - other.p)), np.max(np.abs(self.v - other.v)),
                         np.max(np.abs(self.a - other.a))))


@dataclass(frozen=True, eq=False)
class MotionPrimitive:
    profiles: tuple[JerkProfile1D, ...]
    duration: float
    truncated: bool = False

    @property
    def start(self) -> JointSpaceState:
        return JointSpaceState.from_joints([pr.start for pr in self.profiles])

    @property
    def end(self) -> JointSpaceState:
        return sample_profile(self, self.duration)

    def sample(self, ts) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Arrays of shape (len(ts), dof) for p, v, a."""
        cols = [pr.sample(ts) for pr in self.profiles]
        return tuple(np.stack([c[k] for c in cols], axis=-1) for k in range(3))


def steer(start: JointSpaceState, goal: JointSpaceState,
          limits: Sequence[JointLimits], eps: float = math.inf) -> MotionPrimitive:
    """Time-synchronized primitive from ``start`` towards ``goal``.

    All joints arrive together at the slowest joint's minimum time.  If that
    exceeds ``eps`` the motion is cut at ``eps`` and flagged as truncated.
    """
    n = start.dof
    if goal.dof != n or len(limits) != n:
        raise ValueError("dimension mismatch between states and limits")
    fastest = [solve_min_time_1d(start.joint(i), goal.joint(i), limits[i]) for i in range(n)]
    times = [pr.total_duration for pr in fastest]
    t_sync = max(times)
    profiles = _synchronize(start, goal, limits, fastest, t_sync)
    if profiles is None:
        # some joint cannot arrive at t_sync (its feasible durations have a gap):
        # march forward to a common feasible duration, then bisect back
        lo, step = t_sync, max(t_sync, 0.05) * 0.05
        while profiles is None:
            hi = lo + step
            if hi > t_sync + 60.0:
                raise Infeasible("no common duration synchronizes the joints")
            profiles = _synchronize(start, goal, limits, fastest, hi)
            if profiles is None:
                lo, step = hi, step * 2.0
        while hi - lo > 0.1 * TOL_TIME:
            mid = 0.5 * (lo + hi)
            trial = _synchronize(start, goal, limits, fastest, mid)
            if trial is None:
                lo = mid
            else:
                hi, profiles = mid, trial
        t_sync = hi
    if t_sync > eps:
        return MotionPrimitive(tuple(pr.truncated(eps) for pr in profiles), float(eps), True)
    return MotionPrimitive(tuple(profiles), float(t_sync), False)


def _synchronize(start, goal, limits, fastest, T):
    """Per-joint profiles all lasting ``T``, or None if some joint cannot."""
    out = []
    for i, pr in enumerate(fastest):
        if pr.total_duration == T:
            out.append(pr)
            continue
        try:
            out.append(solve_fixed_time_1d(start.joint(i), goal.joint(i), limits[i], T, pr))
        except Infeasible:
            return None
    return out


def sample_profile(primitive: MotionPrimitive, t: float) -> JointSpaceState:
    if t < -1e-12 or t > primitive.duration + 1e-12:
        raise OutOfRange(f"t={t} outside [0, {primitive.duration}]")
    t = min(max(t, 0.0), primitive.duration)
    p, v, a = primitive.sample(np.array([t]))
    return JointSpaceState(p[0], v[0], a[0])
