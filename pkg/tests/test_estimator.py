import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from intercept.estimator import (
    FilterConfig,
    FilterState,
    Measurement,
    predict,
    read_measurement_log,
    revise,
    run_filter,
    update,
    white_accel_q,
    write_measurement_log,
)

G = -9.81
DT = 0.02


def parabola(rng, n=40, sigma=0.0, dt=DT):
    p0 = np.array([rng.uniform(-8, -6), rng.uniform(-1, 1), rng.uniform(0.5, 1.5)])
    v0 = np.array([rng.uniform(8, 14), rng.uniform(-1, 1), rng.uniform(2, 5)])
    t = np.arange(n) * dt
    pos = p0 + v0 * t[:, None]
    pos[:, 2] += 0.5 * G * t ** 2
    vel = np.tile(v0, (n, 1))
    vel[:, 2] += G * t
    z = pos + rng.normal(size=pos.shape) * sigma
    return t, z, np.hstack([pos, vel])


def measurements(t, z):
    return [Measurement(zi, ti) for zi, ti in zip(z, t)]


def cfg(sigma=0.03, q=1e-3, **kw):
    return FilterConfig(Q=white_accel_q(q, DT), R0=np.eye(3) * sigma ** 2, **kw)


def test_predict_ballistic_example():
    fs = FilterState(np.array([0, 0, 0, 1, 0, 0.0]), np.zeros((6, 6)), np.eye(3))
    out = predict(fs, 0.02, np.zeros((6, 6)), G)
    np.testing.assert_allclose(out.x, [0.02, 0, -0.0019620, 1, 0, -0.19620], atol=1e-15)
    assert np.all(out.P == 0.0)


def test_predict_identity_covariance():
    dt = 0.05
    Q = white_accel_q(0.3, dt)
    fs = FilterState(np.zeros(6), np.eye(6), np.eye(3))
    P = predict(fs, dt, Q, G).P
    # F F^T per axis is [[1 + dt^2, dt], [dt, 1]]
    for i in range(3):
        block = P[np.ix_([i, i + 3], [i, i + 3])]
        q = Q[np.ix_([i, i + 3], [i, i + 3])]
        np.testing.assert_allclose(block, np.array([[1 + dt * dt, dt], [dt, 1.0]]) + q, atol=1e-15)


def test_zero_innovation_keeps_state_and_shrinks_covariance():
    P = np.eye(6) * 0.5
    x = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    fs = FilterState(x, P, np.eye(3) * 0.01)
    out = update(fs, Measurement(x[:3], 1.0), cfg(0.1))
    np.testing.assert_allclose(out.x, x, atol=1e-15)
    assert np.trace(out.P) < np.trace(P)
    assert np.all(np.linalg.eigvalsh(P - out.P) > -1e-12)


def test_gate_is_chi_square_quantile():
    assert cfg().gate == pytest.approx(3.841458820694124, abs=1e-12)


def test_revision_threshold_and_decay():
    gate = cfg().gate
    cv = np.ones(3)
    below = math.sqrt(gate * (1 - 1e-9))
    nu = np.array([below, 2 * math.sqrt(gate) / math.sqrt(2) * 1.0, 0.1])
    nu[1] = math.sqrt(2 * gate)  # kappa = 2 * gate
    nu_hat, kappa = revise(nu, cv, gate)
    assert nu_hat[0] == nu[0]
    assert nu_hat[1] == pytest.approx(nu[1] * math.exp(-1.0), rel=1e-12)
    assert nu_hat[1] / nu[1] == pytest.approx(0.3679, abs=1e-4)
    assert nu_hat[2] == nu[2]
    np.testing.assert_allclose(kappa, nu * nu)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=3, max_size=3),
       st.lists(st.floats(1e-6, 1e3), min_size=3, max_size=3))
def test_revised_never_larger(nu, cv):
    nu = np.array(nu)
    nu_hat, _ = revise(nu, np.array(cv), 3.841458820694124)
    assert np.all(np.abs(nu_hat) <= np.abs(nu))
    assert np.all(np.sign(nu_hat) * np.sign(nu) >= 0)


def test_noiseless_parabola_converges():
    rng = np.random.default_rng(1)
    t, z, truth = parabola(rng, n=30)
    beliefs = run_filter(measurements(t, z), cfg(0.01, q=1e-6))
    for i, b in enumerate(beliefs[10:], start=10):
        assert np.max(np.abs(b.mean[:3] - truth[i, :3])) < 1e-6
        assert np.max(np.abs(b.mean[3:] - truth[i, 3:])) < 1e-3


def test_filter_invariants_on_noisy_data():
    rng = np.random.default_rng(2)
    t, z, _ = parabola(rng, n=60, sigma=0.03)
    states = []
    run_filter(measurements(t, z), cfg(0.03), states)
    for s in states[2:]:
        assert np.allclose(s.P, s.P.T)
        assert np.linalg.eigvalsh(s.P).min() >= -1e-12
        if s.innovation is not None:
            assert np.all(np.abs(s.revised) <= np.abs(s.innovation))
        assert len(s.window) <= 20


def test_trace_non_increasing_after_burn_in():
    rng = np.random.default_rng(3)
    for _ in range(20):
        t, z, _ = parabola(rng, n=40, sigma=0.03)
        states = []
        run_filter(measurements(t, z), cfg(0.03), states)
        tr = np.array([np.trace(s.P) for s in states[10:]])
        assert np.all(np.diff(tr) <= 1e-12)


def test_single_outlier_after_warm_up():
    rng = np.random.default_rng(4)
    t, z, truth = parabola(rng, n=50, sigma=0.02)
    k = 35
    z[k] += np.array([0.0, 0.6, 0.8])  # 1 m spike
    ms = measurements(t, z)
    robust = run_filter(ms, cfg(0.02))
    plain = run_filter(ms, cfg(0.02, adaptive=False))
    err_r = [np.linalg.norm(b.mean[:3] - truth[i, :3]) for i, b in enumerate(robust)][k:]
    err_p = [np.linalg.norm(b.mean[:3] - truth[i, :3]) for i, b in enumerate(plain)][k:]
    assert math.sqrt(np.mean(np.square(err_r))) <= math.sqrt(np.mean(np.square(err_p)))


@pytest.mark.parametrize("scale", [0.01, 0.05])
def test_measurement_noise_tracks_injected_scale(scale):
    rng = np.random.default_rng(5)
    t, z, _ = parabola(rng, n=150, sigma=scale)
    states = []
    run_filter(measurements(t, z), cfg(0.03), states)
    sd = np.array([np.sqrt(np.diag(s.R)) for s in states[40:]])
    ratio = np.median(sd, axis=0) / scale
    assert np.all((ratio > 0.5) & (ratio < 2.0))


def test_nees_consistency_small():
    rng = np.random.default_rng(6)
    means = []
    for _ in range(40):
        t, z, truth = parabola(rng, n=40, sigma=0.03)
        bs = run_filter(measurements(t, z), cfg(0.03))
        e = [(truth[i] - b.mean) @ np.linalg.solve(b.cov, truth[i] - b.mean)
             for i, b in enumerate(bs) if i >= 10]
        means.append(np.mean(e))
    assert 1.237 <= np.mean(means) <= 14.449


def test_plain_mode_uses_prior_noise():
    rng = np.random.default_rng(7)
    t, z, _ = parabola(rng, n=30, sigma=0.05)
    states = []
    run_filter(measurements(t, z), cfg(0.03, adaptive=False), states)
    assert all(np.array_equal(s.R, np.eye(3) * 0.03 ** 2) for s in states)
    assert all(s.kappa is None for s in states)


def test_config_validation():
    with pytest.raises(ValueError):
        cfg(alpha=1.0)
    with pytest.raises(ValueError):
        cfg(window=1)
    with pytest.raises(ValueError):
        FilterConfig(Q=np.eye(6), R0=-np.eye(3))


def test_timestamps_must_increase():
    ms = [Measurement([0, 0, 0], 0.0), Measurement([0, 0, 0], 0.0)]
    with pytest.raises(ValueError):
        run_filter(ms, cfg())


def test_log_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    t, z, _ = parabola(rng, n=12, sigma=0.03)
    ms = measurements(t + 0.123456789, z)
    path = tmp_path / "m.csv"
    write_measurement_log(path, ms)
    back = read_measurement_log(path)
    assert [m.timestamp for m in back] == [m.timestamp for m in ms]
    assert all(np.array_equal(a.z, b.z) for a, b in zip(back, ms))


def test_log_errors_report_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("# header\n0.0,1,2,3\n0.02,1,2\n")
    with pytest.raises(ValueError, match=":3:"):
        read_measurement_log(path)
    path.write_text("0.0,1,2,3\n0.0,1,2,3\n")
    with pytest.raises(ValueError, match=":2:"):
        read_measurement_log(path)
