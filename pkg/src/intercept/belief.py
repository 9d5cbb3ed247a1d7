"""Gaussian projectile beliefs and their projection onto the intercept plane.

The plane is ``x = x_star`` in the plane frame; gravity acts along Z.  A
Gaussian over (X, Y, Z, Vx, Vy, Vz) is mapped to a Gaussian over
(Y_plane, Z_plane, tau) by first-order linearization of the crossing map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial import legendre
from scipy.special import ndtr

V_X_MIN_VALID = 0.5
SIGMA_SPAN = 6.0
_VAR_FLOOR = 1e-18


class DegenerateCrossing(ValueError):
    """The belief does not describe an approaching projectile."""


def _check_cov(cov: np.ndarray, n: int, what: str) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (n, n):
        raise ValueError(f"{what} must be {n}x{n}")
    if not np.allclose(cov, cov.T, atol=1e-9, rtol=0.0):
        raise ValueError(f"{what} is not symmetric")
    cov = 0.5 * (cov + cov.T)
    w = np.linalg.eigvalsh(cov)
    if w.min() < -1e-9 * max(1.0, w.max()):
        raise ValueError(f"{what} is not positive semidefinite (min eig {w.min():.3g})")
    return cov


def psd_clamp(cov: np.ndarray) -> np.ndarray:
    """Symmetrize and clamp negative eigenvalues to zero."""
    cov = 0.5 * (cov + cov.T)
    w, V = np.linalg.eigh(cov)
    if w.min() >= 0.0:
        return cov
    w = np.clip(w, 0.0, None)
    return (V * w) @ V.T


@dataclass(frozen=True, eq=False)
class ProjectileBelief:
    mean: np.ndarray
    cov: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(6)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", _check_cov(self.cov, 6, "projectile covariance"))


@dataclass(frozen=True)
class PlaneSpec:
    x_star: float = 0.0
    g: float = -9.81

    def __post_init__(self):
        if not (math.isfinite(self.x_star) and math.isfinite(self.g)):
            raise ValueError("plane parameters must be finite")


@dataclass(frozen=True, eq=False)
class CrossingBelief:
    """Gaussian over (Y_plane, Z_plane, tau)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float).reshape(3))
        object.__setattr__(self, "cov", psd_clamp(_check_cov(self.cov, 3, "crossing covariance")))

    def shifted(self, dt: float) -> "CrossingBelief":
        """Same belief with the crossing time measured from ``dt`` earlier."""
        m = self.mean.copy()
        m[2] += dt
        return CrossingBelief(m, self.cov)


def _validate(mu: np.ndarray, plane: PlaneSpec) -> float:
    vx = mu[3]
    if abs(vx) < V_X_MIN_VALID:
        raise DegenerateCrossing(f"|Vx| = {abs(vx):.3g} below {V_X_MIN_VALID}")
    tau = (plane.x_star - mu[0]) / vx
    if not tau > 0.0:
        raise DegenerateCrossing("projectile is not approaching the plane")
    return tau


def crossing_map(s: np.ndarray, plane: PlaneSpec) -> np.ndarray:
    """(Y_plane, Z_plane, tau) for states ``s`` of shape (..., 6)."""
    s = np.asarray(s, dtype=float)
    X, Y, Z, Vx, Vy, Vz = np.moveaxis(s, -1, 0)
    tau = (plane.x_star - X) / Vx
    return np.stack([Y + Vy * tau, Z + Vz * tau + 0.5 * plane.g * tau * tau, tau], axis=-1)


def crossing_jacobian(mu: np.ndarray, plane: PlaneSpec) -> np.ndarray:
    """3x6 Jacobian of :func:`crossing_map` at ``mu``."""
    X, _, _, Vx, Vy, Vz = mu
    g = plane.g
    tau = (plane.x_star - X) / Vx
    return np.array([
        [-Vy / Vx, 1.0, 0.0, -Vy * tau / Vx, tau, 0.0],
        [-Vz / Vx - g * tau / Vx, 0.0, 1.0, -Vz * tau / Vx - g * tau * tau / Vx, 0.0, tau],
        [-1.0 / Vx, 0.0, 0.0, -(plane.x_star - X) / Vx ** 2, 0.0, 0.0],
    ])


def crossing_time_stats(b: ProjectileBelief, plane: PlaneSpec) -> tuple[float, float]:
    mu = b.mean
    tau = _validate(mu, plane)
    g_tau = np.array([-1.0 / mu[3], 0.0, 0.0, -(plane.x_star - mu[0]) / mu[3] ** 2, 0.0, 0.0])
    return float(tau), float(max(g_tau @ b.cov @ g_tau, 0.0))


def project_to_plane(b: ProjectileBelief, plane: PlaneSpec) -> CrossingBelief:
    _validate(b.mean, plane)
    J = crossing_jacobian(b.mean, plane)
    return CrossingBelief(crossing_map(b.mean, plane), psd_clamp(J @ b.cov @ J.T))


# ---------------------------------------------------------------------------
# bivariate normal probabilities
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _gl(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = legendre.leggauss(n)
    return x, w


def bvn_upper(h, k, r: float) -> np.ndarray:
    """P(X > h, Y > k) for a standard bivariate normal with correlation r.

    Genz's refinement of the Drezner-Wesolowsky method (Stat. Comput. 2004),
    vectorized over ``h`` and ``k`` for a single correlation.
    """
    h = np.asarray(h, dtype=float)
    k = np.asarray(k, dtype=float)
    h, k = np.broadcast_arrays(h, k)
    h = np.clip(h, -40.0, 40.0)
    k = np.clip(k, -40.0, 40.0)
    r = float(min(max(r, -1.0), 1.0))
    if r == 0.0:
        return ndtr(-h) * ndtr(-k)
    ar = abs(r)
    n = 6 if ar < 0.3 else (12 if ar < 0.75 else 20)
    x, w = _gl(n)
    x = 1.0 + x  # nodes on [0, 2]
    hk = h * k
    if ar < 0.925:
        hs = 0.5 * (h * h + k * k)
        asr = 0.5 * math.asin(r)
        sn = np.sin(asr * x)
        integrand = np.exp((sn * hk[..., None] - hs[..., None]) / (1.0 - sn * sn))
        bvn = integrand @ w * asr / (2.0 * math.pi) + ndtr(-h) * ndtr(-k)
        return np.clip(bvn, 0.0, 1.0)
    if r < 0.0:
        k = -k
        hk = -hk
    bvn = np.zeros_like(h)
    if ar < 1.0:
        as_ = (1.0 - r) * (1.0 + r)
        a = math.sqrt(as_)
        bs = (h - k) ** 2
        c = (4.0 - hk) / 8.0
        d = (12.0 - hk) / 16.0
        with np.errstate(over="ignore", under="ignore", invalid="ignore"):
            bvn = a * np.exp(-(bs / as_ + hk) / 2.0) * (
                1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as_ * as_ / 5.0)
            b = np.sqrt(bs)
            tail = (np.exp(-hk / 2.0) * math.sqrt(2.0 * math.pi) * ndtr(-b / a) * b
                    * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0))
            bvn = np.where(hk > -160.0, bvn - tail, bvn)
            a2 = a / 2.0
            xs = (a2 * x) ** 2
            rs = np.sqrt(1.0 - xs)
            asr = -(bs[..., None] / xs + hk[..., None]) / 2.0
            ep = np.exp(-hk[..., None] * xs / (2.0 * (1.0 + rs) ** 2)) / rs
            sp = 1.0 + c[..., None] * xs * (1.0 + d[..., None] * xs)
            terms = np.where(asr > -100.0, np.exp(asr) * (ep - sp), 0.0)
            bvn = -(bvn + a2 * (terms @ w)) / (2.0 * math.pi)
    if r > 0.0:
        bvn = bvn + ndtr(-np.maximum(h, k))
    else:
        bvn = -bvn
        L = np.where(h < 0.0, ndtr(k) - ndtr(h), ndtr(-h) - ndtr(-k))
        bvn = np.where(k > h, bvn + L, bvn)
    return np.clip(bvn, 0.0, 1.0)


def bvn_cdf(x, y, r: float) -> np.ndarray:
    return bvn_upper(-np.asarray(x, dtype=float), -np.asarray(y, dtype=float), r)


def rect_probability(my, mz, cov2: np.ndarray, y_lo: float, y_hi: float,
                     z_lo: float, z_hi: float) -> np.ndarray:
    """P(y_lo < Y < y_hi, z_lo < Z < z_hi) for N((my, mz), cov2).

    ``my`` and ``mz`` may be arrays sharing ``cov2``.  Zero-variance axes are
    treated as point masses.
    """
    my = np.asarray(my, dtype=float)
    mz = np.asarray(mz, dtype=float)
    vy, vz, cyz = float(cov2[0, 0]), float(cov2[1, 1]), float(cov2[0, 1])
    dy = vy <= _VAR_FLOOR
    dz = vz <= _VAR_FLOOR
    if dy and dz:
        return ((my > y_lo) & (my < y_hi) & (mz > z_lo) & (mz < z_hi)).astype(float)
    if dy:
        sz = math.sqrt(vz)
        inside = ((my > y_lo) & (my < y_hi)).astype(float)
        return inside * (ndtr((z_hi - mz) / sz) - ndtr((z_lo - mz) / sz))
    if dz:
        sy = math.sqrt(vy)
        inside = ((mz > z_lo) & (mz < z_hi)).astype(float)
        return inside * (ndtr((y_hi - my) / sy) - ndtr((y_lo - my) / sy))
    sy, sz = math.sqrt(vy), math.sqrt(vz)
    r = cyz / (sy * sz)
    a1, b1 = (y_lo - my) / sy, (y_hi - my) / sy
    a2, b2 = (z_lo - mz) / sz, (z_hi - mz) / sz
    if abs(r) >= 1.0 - 1e-12:
        # perfectly correlated: Z is an affine function of Y
        lo = np.maximum(a1, a2 if r > 0 else -b2)
        hi = np.minimum(b1, b2 if r > 0 else -a2)
        return np.clip(ndtr(hi) - ndtr(lo), 0.0, 1.0)
    if r == 0.0:
        return np.clip((ndtr(b1) - ndtr(a1)) * (ndtr(b2) - ndtr(a2)), 0.0, 1.0)
    p = (bvn_cdf(b1, b2, r) - bvn_cdf(a1, b2, r) - bvn_cdf(b1, a2, r) + bvn_cdf(a1, a2, r))
    return np.clip(p, 0.0, 1.0)


@dataclass(frozen=True)
class Footprint:
    """Axis-aligned rectangle in plane (Y, Z) coordinates."""

    y: float
    z: float
    half_y: float
    half_z: float

    def __post_init__(self):
        if not (self.half_y > 0.0 and self.half_z > 0.0):
            raise ValueError("footprint half extents must be positive")

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return (self.y - self.half_y, self.y + self.half_y,
                self.z - self.half_z, self.z + self.half_z)

    def contains(self, y: float, z: float) -> bool:
        y_lo, y_hi, z_lo, z_hi = self.bounds
        return y_lo < y < y_hi and z_lo < z < z_hi

    def distance(self, y: float, z: float) -> float:
        y_lo, y_hi, z_lo, z_hi = self.bounds
        dy = max(y_lo - y, 0.0, y - y_hi)
        dz = max(z_lo - z, 0.0, z - z_hi)
        return math.hypot(dy, dz)


class _TauIntegrand:
    """density(tau) * P((Y, Z) in rectangle | tau) for one crossing belief."""

    def __init__(self, cb: CrossingBelief):
        m = cb.mean
        S = cb.cov
        self.tau_mean = m[2]
        self.sd = math.sqrt(S[2, 2])
        self.slope = S[:2, 2] / S[2, 2]
        self.cond = psd_clamp(S[:2, :2] - np.outer(S[:2, 2], S[:2, 2]) / S[2, 2])
        self.m = m[:2]

    def window(self) -> tuple[float, float]:
        return (self.tau_mean - SIGMA_SPAN * self.sd, self.tau_mean + SIGMA_SPAN * self.sd)

    def breaks(self, bounds) -> np.ndarray:
        """tau values where the integrand is not smooth or changes fastest.

        These are the crossings of a rectangle edge by the conditional mean
        (jumps when the conditional variance vanishes) and, for strongly
        correlated conditionals, the crossings of standardized Y and Z limits
        (kinks in the perfectly correlated limit).  Narrow edge transitions
        are also bracketed four transition widths either side.  Quadrature
        panels are split at these points.
        """
        out = []
        edges = (bounds[:2], bounds[2:])
        narrow = 2.0 * SIGMA_SPAN * self.sd / 32.0
        for d in (0, 1):
            if abs(self.slope[d]) > 1e-12:
                width = 4.0 * math.sqrt(self.cond[d, d]) / abs(self.slope[d])
                for e in edges[d]:
                    c = self.tau_mean + (e - self.m[d]) / self.slope[d]
                    out.append(c)
                    if 0.0 < width < narrow:
                        out += [c - width, c + width]
        vy, vz, cyz = self.cond[0, 0], self.cond[1, 1], self.cond[0, 1]
        if vy > _VAR_FLOOR and vz > _VAR_FLOOR:
            sy, sz = math.sqrt(vy), math.sqrt(vz)
            if abs(cyz / (sy * sz)) >= 0.9:
                sgn = math.copysign(1.0, cyz)
                # (ey - my(t)) / sy = sgn * (ez - mz(t)) / sz, linear in t
                k = -self.slope[0] / sy + sgn * self.slope[1] / sz
                if abs(k) > 1e-12:
                    for ey in edges[0]:
                        for ez in edges[1]:
                            c = (ey - self.m[0]) / sy - sgn * (ez - self.m[1]) / sz
                            out.append(self.tau_mean - c / k)
        return np.array(out)

    def __call__(self, tau: np.ndarray, bounds) -> np.ndarray:
        dt = tau - self.tau_mean
        my = self.m[0] + self.slope[0] * dt
        mz = self.m[1] + self.slope[1] * dt
        dens = np.exp(-0.5 * (dt / self.sd) ** 2) / (self.sd * math.sqrt(2.0 * math.pi))
        return dens * rect_probability(my, mz, self.cond, *bounds)


def _panel_edges(lo: float, hi: float, breaks: np.ndarray, panels: int) -> np.ndarray:
    inner = breaks[(breaks > lo) & (breaks < hi)]
    edges = np.concatenate([np.linspace(lo, hi, panels + 1), inner])
    edges.sort()
    return edges


def success_probability(cb: CrossingBelief, footprint: Footprint, t_a: float,
                        n_nodes: int = 64) -> float:
    """P[(Y, Z) inside ``footprint`` and tau > t_a] under ``cb``.

    tau is integrated out with Gauss-Legendre quadrature over
    ``[max(t_a, mean - 6 sd), mean + 6 sd]`` of the conditional rectangle
    probability, with panels split where the conditional mean crosses an edge.
    """
    m = cb.mean
    bounds = footprint.bounds
    if cb.cov[2, 2] <= _VAR_FLOOR:
        if not m[2] > t_a:
            return 0.0
        return float(rect_probability(m[0], m[1], cb.cov[:2, :2], *bounds))
    f = _TauIntegrand(cb)
    w_lo, hi = f.window()
    lo = max(t_a, w_lo)
    if not hi > lo:
        return 0.0
    x, w = _gl(max(int(n_nodes), 32))
    edges = _panel_edges(lo, hi, f.breaks(bounds), 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    tau = (half[:, None] * x[None, :] + mid[:, None]).ravel()
    vals = f(tau, bounds).reshape(len(half), len(x))
    total = float(np.sum(half * (vals @ w)))
    return min(max(total, 0.0), 1.0)


class FootprintTailTable:
    """Success probabilities for many (footprint, arrival time) queries.

    For each footprint the integrand ``density(tau) * P(inside | tau)`` is
    sampled once on a composite Gauss-Legendre grid over the +-6 sd window.
    Each panel's Legendre interpolant is integrated in closed form, so a
    query for any arrival time costs one polynomial evaluation.
    """

    def __init__(self, cb: CrossingBelief, footprints, panels: int = 4, nodes: int = 32):
        self.cb = cb
        self.n_goals = len(footprints)
        m = cb.mean
        self.point_mass = cb.cov[2, 2] <= _VAR_FLOOR
        if self.point_mass:
            self.mass = np.array([
                float(rect_probability(m[0], m[1], cb.cov[:2, :2], *fp.bounds))
                for fp in footprints])
            return
        f = _TauIntegrand(cb)
        lo, hi = f.window()
        x, w = _gl(nodes)
        per_goal = [_panel_edges(lo, hi, f.breaks(fp.bounds), panels) for fp in footprints]
        n_edges = max(len(e) for e in per_goal)  # shorter rows padded with empty panels
        self.edges = np.array([np.concatenate([e, np.full(n_edges - len(e), hi)]) for e in per_goal])
        self.half = 0.5 * np.diff(self.edges, axis=1)
        self.mid = 0.5 * (self.edges[:, :-1] + self.edges[:, 1:])
        tau = self.half[..., None] * x + self.mid[..., None]
        shape = tau.shape
        bounds = np.array([fp.bounds for fp in footprints])[:, None, None, :]
        bounds = np.broadcast_to(bounds, shape + (4,)).reshape(-1, 4)
        vals = f(tau.ravel(), bounds.T).reshape(shape)
        # discrete Legendre transform on the Gauss nodes
        V = legendre.legvander(x, nodes - 1)
        coef = np.einsum("gpi,i,ik->gpk", vals, w, V) * (2 * np.arange(nodes) + 1) / 2.0
        anti = legendre.legint(coef, axis=-1, lbnd=-1.0)  # zero at the panel start
        self.anti = anti * self.half[..., None]
        full = self.anti.sum(axis=-1)  # P_k(1) = 1
        after = np.cumsum(full[:, ::-1], axis=1)[:, ::-1]
        self.panel_mass = full
        self.after = np.concatenate([after[:, 1:], np.zeros((self.n_goals, 1))], axis=1)
        self.total = after[:, 0]
        self.nodes = nodes

    def query(self, goal_ids, t_a) -> np.ndarray:
        goal_ids = np.asarray(goal_ids, dtype=int)
        t_a = np.asarray(t_a, dtype=float)
        goal_ids, t_a = np.broadcast_arrays(goal_ids, t_a)
        if self.point_mass:
            return np.where(self.cb.mean[2] > t_a, self.mass[goal_ids], 0.0)
        out = np.empty(t_a.shape, dtype=float)
        below = t_a <= self.edges[goal_ids, 0]
        above = t_a >= self.edges[goal_ids, -1]
        out[below] = self.total[goal_ids[below]]
        out[above] = 0.0
        inside = ~(below | above)
        if np.any(inside):
            t = t_a[inside]
            g = goal_ids[inside]
            e = self.edges[g]
            p = np.clip(np.sum(e <= t[:, None], axis=1) - 1, 0, e.shape[1] - 2)
            half = self.half[g, p]
            x = np.where(half > 0.0, (t - self.mid[g, p]) / np.where(half > 0.0, half, 1.0), 1.0)
            V = legendre.legvander(x, self.nodes)
            partial = self.panel_mass[g, p] - np.einsum("qk,qk->q", V, self.anti[g, p])
            out[inside] = partial + self.after[g, p]
        return np.clip(out, 0.0, 1.0)
