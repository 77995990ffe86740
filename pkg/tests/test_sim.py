import json

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bfekf import sim
from bfekf.ssmodel import VehicleParams


def _mu_oracle(s, B=11.7, C=1.69, D=1.2, E=0.377):
    mpmath.mp.dps = 50
    s = mpmath.mpf(s)
    Bs = B * s
    return float(D * mpmath.sin(C * mpmath.atan(Bs - E * (Bs - mpmath.atan(Bs)))))


def test_pacejka_at_zero():
    assert sim.pacejka_mu(0.0) == 0.0


def test_pacejka_matches_high_precision():
    for s in (0.1, -0.05, 0.2, 0.5):
        assert sim.pacejka_mu(s) == pytest.approx(_mu_oracle(s), rel=1e-14, abs=1e-15)
    # leading digits 1.17639...
    assert np.floor(float(sim.pacejka_mu(0.1)) * 1e5) / 1e5 == 1.17639


def test_pacejka_odd():
    s = np.random.default_rng(3).uniform(-1, 1, 100)
    np.testing.assert_array_equal(sim.pacejka_mu(-s), -sim.pacejka_mu(s))


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 50, allow_nan=False))
def test_pacejka_bounded_by_peak(s):
    assert abs(sim.pacejka_mu(s)) <= sim.PacejkaParams().D


def test_pacejka_rejects_nonpositive_peak():
    with pytest.raises(ValueError):
        sim.PacejkaParams(D=0.0)


def test_scenario1_noise_free_positions():
    tr = sim.simulate_scenario1(steps=10, q=0.0, r=0.0, seed=1)
    np.testing.assert_array_equal(tr.states[:, 0], np.arange(10.0))
    np.testing.assert_array_equal(tr.observations[:, 0], np.arange(10.0))
    assert len(tr) == 10 and tr.Ts == 1.0


def test_scenario2_acceleration():
    assert sim.scenario2_acceleration(0.0) == pytest.approx(0.01, abs=1e-15)
    assert sim.scenario2_acceleration(12.5) == pytest.approx(0.51, abs=1e-15)


def test_scenario2_noise_free_follows_acceleration():
    tr = sim.simulate_scenario2(steps=30, q=0.0, r=0.0, seed=0)
    np.testing.assert_allclose(tr.truth[:, 0], sim.scenario2_acceleration(tr.states[:, 0]), atol=1e-15)
    # bounded excursion over the default horizon
    tr = sim.simulate_scenario2(seed=4)
    assert np.all(np.isfinite(tr.states)) and np.all(np.abs(tr.states[:, 0]) < 1000)


def test_determinism():
    a, b = sim.simulate_scenario2(seed=7), sim.simulate_scenario2(seed=7)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.observations, b.observations)
    ta, tb = sim.simulate_tire_runs(2, seed=3), sim.simulate_tire_runs(2, seed=3)
    for x, y in zip(ta, tb):
        np.testing.assert_array_equal(x.observations, y.observations)
        np.testing.assert_array_equal(x.inputs, y.inputs)
    ia, ib = sim.simulate_intersection(5, seed=2), sim.simulate_intersection(5, seed=2)
    for x, y in zip(ia, ib):
        np.testing.assert_array_equal(x.observations, y.observations)
    assert not np.array_equal(sim.simulate_scenario1(seed=1).observations,
                              sim.simulate_scenario1(seed=2).observations)


def _variance_band(samples, var):
    # 3 sigma band for the sample variance of Gaussian draws
    n = samples.size
    return abs(np.var(samples) - var) <= 3 * var * np.sqrt(2.0 / n)


def test_noise_calibration_1d():
    runs = [sim.simulate_scenario1(seed=s) for s in range(50)]
    meas = np.concatenate([t.observations[:, 0] - t.states[:, 0] for t in runs])
    proc = np.concatenate([t.truth[:, 0] for t in runs])
    assert _variance_band(meas, 0.01)
    assert _variance_band(proc, 0.01)


def test_innovation_variance_of_random_walk():
    # first difference of the measured positions of the noise-free-velocity
    # truth minus the nominal velocity: v0 + accumulated noise plus two
    # measurement errors
    runs = [sim.simulate_scenario1(steps=2, seed=s) for s in range(2000)]
    d = np.array([t.observations[1, 0] - t.observations[0, 0] - 1.0 for t in runs])
    # position after one step: x0 + v0 + a/2, so var = q/4 + 2 r
    assert _variance_band(d, 0.01 / 4 + 2 * 0.01)


def test_tire_terminal_speed_and_noise():
    runs = sim.simulate_tire_runs(5, seed=11)
    veh = VehicleParams()
    for tr in runs:
        assert 15.0 <= tr.states[-1, 0] <= 25.0
        assert tr.Ts == 0.04
        s = tr.meta["slip"]
        np.testing.assert_allclose(tr.truth[:, 0], veh.gain * sim.pacejka_mu(s), rtol=0, atol=1e-15)
    resid = np.concatenate([t.observations[:, 0] - t.truth[:, 0] for t in runs])
    assert _variance_band(resid, 0.1**2)
    resid = np.concatenate([t.observations[:, 1] - t.states[:, 0] for t in runs])
    assert _variance_band(resid, 0.01**2)


def test_tire_free_rolling():
    tr = sim.simulate_tire_run(seed=2, drive=False, accel_std=0.0, speed_std=0.0, omega_std=0.0)
    np.testing.assert_array_equal(tr.meta["slip"], 0.0)
    np.testing.assert_array_equal(tr.truth, 0.0)
    omega = tr.inputs[:, 0]
    v = tr.states[:, 0]
    np.testing.assert_allclose(omega * VehicleParams().wheel_radius, v, rtol=1e-14)


def test_intersection_branching():
    runs = sim.simulate_intersection(1000, seed=5)
    left = np.mean([t.meta["label"] == "left" for t in runs])
    assert 0.46 <= left <= 0.54


def test_intersection_geometry():
    geo = sim.IntersectionGeometry()
    for turn in (1, -1):
        X, Y, A = sim.simulate_vehicle(geo, turn, 10.0, 0.2, 0.0, np.random.default_rng(0))
        s = 10.0 * 0.2 * np.arange(len(X))
        arc_end = geo.approach + 0.5 * np.pi * geo.radius
        straight = (s <= geo.approach) | (s > arc_end)
        np.testing.assert_array_equal(A[straight], 0.0)
        on_arc = ~straight
        np.testing.assert_allclose(np.linalg.norm(A[on_arc], axis=1), 10.0**2 / geo.radius, rtol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(X[:, 2:], axis=1), 10.0, rtol=1e-12)
        # left turns exit towards negative x
        assert np.sign(X[-1, 0]) == -turn
        np.testing.assert_array_equal(X[:, :2], Y)


def test_intersection_speed_spread():
    runs = sim.simulate_intersection(400, seed=1)
    speeds = np.array([t.meta["speed"] for t in runs])
    assert abs(speeds.mean() - 10.0) < 3 * 0.5 / np.sqrt(400)
    assert _variance_band(speeds, 0.5**2)


def test_trajectory_csv(tmp_path):
    tr = sim.simulate_tire_run(seed=1)
    path = tr.to_csv(tmp_path / "run.csv")
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    header = path.read_text().splitlines()[0].split(",")
    assert header[:3] == ["time", "v", "accel_meas"]
    assert data.shape == (len(tr), 1 + 1 + 2 + 1 + 1)
    np.testing.assert_array_equal(data[:, 1], tr.states[:, 0])
    meta = json.loads(path.with_suffix(".json").read_text())
    assert meta["seed"] == 1 and meta["steps"] == len(tr)


def test_trajectory_length_mismatch():
    with pytest.raises(ValueError):
        sim.Trajectory(1.0, np.zeros((3, 1)), np.zeros((2, 1)), np.zeros((3, 1)))
