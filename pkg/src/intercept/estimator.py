"""Adaptive Kalman filter for a ballistic point projectile.

State is ``[x, y, z, vx, vy, vz]`` in the plane frame with constant gravity on
z.  The measurement noise covariance is re-estimated from a sliding window of
innovations; innovations whose per-axis chi-square statistic exceeds the
confidence quantile are shrunk exponentially before they are used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.stats import chi2

from .belief import ProjectileBelief

H = np.hstack([np.eye(3), np.zeros((3, 3))])


def white_accel_q(q: float, dt: float) -> np.ndarray:
    """Process noise of a white acceleration of spectral density ``q``."""
    blk = np.array([[dt ** 3 / 3, dt ** 2 / 2], [dt ** 2 / 2, dt]]) * q
    return np.kron(blk, np.eye(3))


@dataclass(frozen=True, eq=False)
class FilterConfig:
    Q: np.ndarray
    R0: np.ndarray
    alpha: float = 0.95
    window: int = 20
    dt_nominal: float = 0.02
    g: float = -9.81
    n_min: int = 20
    adaptive: bool = True
    use_revised: bool = True
    init_vel_var: float = 100.0

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        R0 = np.asarray(self.R0, dtype=float)
        for name, M, n in (("Q", Q, 6), ("R0", R0, 3)):
            if M.shape != (n, n) or not np.allclose(M, M.T, atol=1e-12):
                raise ValueError(f"{name} must be a symmetric {n}x{n} matrix")
            if np.linalg.eigvalsh(M).min() < -1e-12:
                raise ValueError(f"{name} must be positive semidefinite")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.window < 2:
            raise ValueError("window must be at least 2")
        if not 1 <= self.n_min <= self.window:
            raise ValueError("n_min must lie in [1, window]")
        if not self.dt_nominal > 0.0:
            raise ValueError("dt_nominal must be positive")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R0", R0)

    @property
    def gate(self) -> float:
        return float(chi2.ppf(self.alpha, 1))

    @classmethod
    def default(cls, sigma: float = 0.03, q: float = 0.5, **kw) -> "FilterConfig":
        dt = kw.get("dt_nominal", 0.02)
        return cls(Q=white_accel_q(q, dt), R0=np.eye(3) * sigma ** 2, **kw)


@dataclass(frozen=True, eq=False)
class Measurement:
    z: np.ndarray
    timestamp: float

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float).reshape(3)
        if not np.all(np.isfinite(z)) or not math.isfinite(self.timestamp):
            raise ValueError("measurement must be finite")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "timestamp", float(self.timestamp))


@dataclass(frozen=True, eq=False)
class FilterState:
    x: np.ndarray
    P: np.ndarray
    R: np.ndarray
    window: tuple = ()
    k: int = 0
    t: float = 0.0
    innovation: np.ndarray | None = None
    revised: np.ndarray | None = None
    kappa: np.ndarray | None = None

    def belief(self) -> ProjectileBelief:
        return ProjectileBelief(self.x, self.P, self.t)


def _psd(P: np.ndarray, floor: float = 0.0) -> np.ndarray:
    P = 0.5 * (P + P.T)
    w, V = np.linalg.eigh(P)
    if w.min() >= floor:
        return P
    w = np.maximum(w, floor)
    return (V * w) @ V.T


def transition(dt: float) -> np.ndarray:
    F = np.eye(6)
    F[:3, 3:] = np.eye(3) * dt
    return F


def predict(fs: FilterState, dt: float, Q: np.ndarray, g: float = -9.81) -> FilterState:
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    F = transition(dt)
    x = F @ fs.x
    x[2] += 0.5 * g * dt * dt
    x[5] += g * dt
    P = _psd(F @ fs.P @ F.T + Q)
    return replace(fs, x=x, P=P, t=fs.t + dt)


def revise(nu: np.ndarray, cv_diag: np.ndarray, gate: float) -> tuple[np.ndarray, np.ndarray]:
    """Shrink innovation components whose chi-square statistic exceeds ``gate``."""
    kappa = nu * nu / cv_diag
    scale = np.where(kappa < gate, 1.0, np.exp(-(kappa - gate) / gate))
    return nu * scale, kappa


def update(fs: FilterState, meas: Measurement, cfg: FilterConfig) -> FilterState:
    """Measurement update; ``fs`` must already be predicted to ``meas.timestamp``."""
    nu = meas.z - H @ fs.x
    HPH = H @ fs.P @ H.T
    window = fs.window
    kappa = None
    if cfg.adaptive and len(window) >= cfg.n_min:
        cv_prev = np.mean([np.outer(v, v) for v in window], axis=0)
        nu_hat, kappa = revise(nu, np.maximum(np.diag(cv_prev), 1e-300), cfg.gate)
    else:
        nu_hat = nu.copy()
    R = cfg.R0
    if cfg.adaptive:
        window = (window + (nu_hat,))[-cfg.window:]
        if len(window) >= cfg.n_min:
            cv = np.mean([np.outer(v, v) for v in window], axis=0)
            floor = 1e-8 * np.trace(cv) / 3.0
            R = _psd(cv - HPH, floor=max(floor, 1e-300))
    S = HPH + R
    K = np.linalg.solve(S, H @ fs.P).T
    used = nu_hat if cfg.use_revised else nu
    x = fs.x + K @ used
    IKH = np.eye(6) - K @ H
    P = _psd(IKH @ fs.P @ IKH.T + K @ R @ K.T)
    return replace(fs, x=x, P=P, R=R, window=window, k=fs.k + 1, t=meas.timestamp,
                   innovation=nu, revised=nu_hat, kappa=kappa)


class ProjectileFilter:
    """Streaming driver: feed measurements, read beliefs."""

    def __init__(self, cfg: FilterConfig):
        self.cfg = cfg
        self.state: FilterState | None = None
        self._first: Measurement | None = None
        self._last_t = -math.inf
        self.count = 0

    def step(self, meas: Measurement) -> ProjectileBelief:
        cfg = self.cfg
        if meas.timestamp <= self._last_t:
            raise ValueError("measurement timestamps must be strictly increasing")
        self.count += 1
        if self.count == 1:
            self._first = meas
            P = np.zeros((6, 6))
            P[:3, :3] = cfg.R0
            P[3:, 3:] = np.eye(3) * cfg.init_vel_var
            self.state = FilterState(np.concatenate([meas.z, np.zeros(3)]), P, cfg.R0,
                                     k=1, t=meas.timestamp)
        elif self.count == 2:
            dt = meas.timestamp - self._first.timestamp
            v = (meas.z - self._first.z) / dt
            v[2] += 0.5 * cfg.g * dt  # difference quotient is the midpoint velocity
            R0 = cfg.R0
            P = np.block([[R0, R0 / dt], [R0 / dt, 2.0 * R0 / dt ** 2]])
            self.state = FilterState(np.concatenate([meas.z, v]), _psd(P), R0,
                                     k=2, t=meas.timestamp)
        else:
            fs = predict(self.state, meas.timestamp - self.state.t, cfg.Q, cfg.g)
            self.state = update(fs, meas, cfg)
        self._last_t = meas.timestamp
        return self.state.belief()


def run_filter(measurements, cfg: FilterConfig, states: list | None = None) -> list[ProjectileBelief]:
    if not measurements:
        raise ValueError("at least one measurement is required")
    f = ProjectileFilter(cfg)
    out = []
    for m in measurements:
        out.append(f.step(m))
        if states is not None:
            states.append(f.state)
    return out


def read_measurement_log(path) -> list[Measurement]:
    """Read ``timestamp, x, y, z`` records, one per line; ``#`` starts a comment."""
    out: list[Measurement] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                t, x, y, z = map(float, parts)
                m = Measurement(np.array([x, y, z]), t)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if out and not m.timestamp > out[-1].timestamp:
                raise ValueError(f"{path}:{lineno}: timestamps must be strictly increasing")
            out.append(m)
    return out


def write_measurement_log(path, measurements) -> None:
    lines = ["# timestamp,x,y,z"]
    lines += [",".join(repr(float(v)) for v in (m.timestamp, *m.z)) for m in measurements]
    Path(path).write_text("\n".join(lines) + "\n")
