"""Ground-truth generators for the example experiments.

All generators are pure functions of their arguments and a seed; the same
seed gives bitwise-identical output.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ssmodel import VehicleParams, cv_matrices


@dataclass(frozen=True)
class PacejkaParams:
    """Magic-formula coefficients (dry asphalt defaults)."""

    B: float = 11.7
    C: float = 1.69
    D: float = 1.2
    E: float = 0.377

    def __post_init__(self):
        if not self.D > 0:
            raise ValueError("peak factor D must be positive")


def pacejka_mu(s, params: PacejkaParams = PacejkaParams()):
    """Friction coefficient at slip ``s``."""
    s = np.asarray(s, dtype=float)
    Bs = params.B * s
    return params.D * np.sin(params.C * np.arctan(Bs - params.E * (Bs - np.arctan(Bs))))


@dataclass
class Trajectory:
    """One simulated run.

    ``states`` and ``observations`` have one row per step. ``inputs`` holds
    known inputs (or is empty), ``truth`` the quantity the learned function
    should reproduce at each step (acceleration, friction force).
    """

    Ts: float
    states: np.ndarray
    observations: np.ndarray
    truth: np.ndarray
    inputs: np.ndarray = None
    meta: dict = field(default_factory=dict)
    state_names: tuple = ()
    obs_names: tuple = ()
    truth_names: tuple = ()

    def __post_init__(self):
        n = len(self.states)
        if self.inputs is None:
            self.inputs = np.zeros((n, 0))
        for name in ("observations", "truth", "inputs"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, states has {n}")

    def __len__(self):
        return len(self.states)

    @property
    def time(self) -> np.ndarray:
        return self.Ts * np.arange(len(self))

    def _names(self, given, prefix, width):
        return list(given) if len(given) == width else [f"{prefix}{i}" for i in range(width)]

    def to_csv(self, path) -> Path:
        """Write one row per step plus a JSON sidecar with seeds and
        parameters; returns the CSV path."""
        path = Path(path)
        blocks = [self.states, self.observations, self.truth, self.inputs]
        cols = (["time"]
                + self._names(self.state_names, "x", self.states.shape[1])
                + self._names(self.obs_names, "y", self.observations.shape[1])
                + self._names(self.truth_names, "truth", self.truth.shape[1])
                + [f"u{i}" for i in range(self.inputs.shape[1])])
        data = np.column_stack([self.time] + [np.asarray(b, dtype=float).reshape(len(self), -1) for b in blocks])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            w.writerows([[repr(float(v)) for v in row] for row in data])
        with open(path.with_suffix(".json"), "w") as fh:
            json.dump({"Ts": self.Ts, "steps": len(self), **self.meta}, fh, indent=2, default=_jsonable)
        return path


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


# ---------------------------------------------------------------------------
# one-dimensional constant-velocity examples
# ---------------------------------------------------------------------------


def scenario2_acceleration(p):
    """Position-dependent acceleration of the second 1-D scenario."""
    return 0.5 * np.sin(np.pi * np.asarray(p, dtype=float) / 25.0) + 0.01


def _simulate_1d(steps, q, r, seed, x0, accel, label):
    rng = np.random.default_rng(seed)
    F, G = cv_matrices(1.0, 1)
    G = G[:, 0]
    x = np.array(x0, dtype=float)
    X, Y, A = np.empty((steps, 2)), np.empty((steps, 1)), np.empty((steps, 1))
    for k in range(steps):
        X[k] = x
        Y[k, 0] = x[0] + np.sqrt(r) * rng.standard_normal()
        a = accel(x[0]) + np.sqrt(q) * rng.standard_normal()
        A[k, 0] = a
        x = F @ x + G * a
    meta = {"label": label, "seed": seed, "q": q, "r": r, "x0": list(map(float, x0))}
    return Trajectory(1.0, X, Y, A, meta=meta, state_names=("p", "v"), obs_names=("p_meas",),
                      truth_names=("accel",))


def simulate_scenario1(steps=100, q=0.01, r=0.01, seed=0, x0=(0.0, 1.0)) -> Trajectory:
    """Constant-velocity truth with white acceleration noise of variance
    ``q`` and position measurements of variance ``r``."""
    return _simulate_1d(steps, q, r, seed, x0, lambda p: 0.0, "scenario1")


def simulate_scenario2(steps=100, q=0.01, r=0.01, seed=0, x0=(0.0, 1.0)) -> Trajectory:
    """As scenario 1 with the position-dependent acceleration
    ``0.5 sin(pi p / 25) + 0.01`` added to the noise channel."""
    return _simulate_1d(steps, q, r, seed, x0, scenario2_acceleration, "scenario2")


# ---------------------------------------------------------------------------
# longitudinal vehicle with Pacejka tire
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DriveProfile:
    """Commanded front-wheel slip during one acceleration from standstill.

    Slip rises linearly to a peak drawn from ``peak_slip`` over ``ramp``
    seconds, holds, and fades to ``cruise_slip`` as the speed approaches
    the target; past the target the wheel rolls freely for ``coast``
    seconds.
    """

    peak_slip: tuple = (0.08, 0.3)
    ramp: float = 1.0
    cruise_slip: float = 0.03
    fade_from: float = 0.6  # fraction of the target speed
    target_speed: tuple = (18.0, 22.0)
    coast: float = 0.4
    max_time: float = 30.0

    def slip(self, t, v, peak, target):
        s = peak * min(t / self.ramp, 1.0)
        v0 = self.fade_from * target
        if v > v0:
            w = min((v - v0) / (target - v0), 1.0)
            s = (1 - w) * s + w * self.cruise_slip
        return s


def simulate_tire_run(vehicle: VehicleParams = VehicleParams(), pacejka: PacejkaParams = PacejkaParams(),
                      profile: DriveProfile = DriveProfile(), Ts=0.04, slip_floor=0.5,
                      accel_std=0.1, speed_std=0.01, omega_std=0.01, seed=0,
                      drive=True) -> Trajectory:
    """One acceleration from standstill.

    The wheel speed is commanded so that the slip, computed with the speed
    clamped below by ``slip_floor``, follows ``profile``; the speed is then
    integrated by forward Euler. Observations are the measured longitudinal
    acceleration and speed, inputs the measured wheel angular velocity.
    With ``drive=False`` the wheel rolls freely from ``target`` speed.
    """
    rng = np.random.default_rng(seed)
    peak = rng.uniform(*profile.peak_slip)
    target = rng.uniform(*profile.target_speed)
    G, rw = vehicle.gain, vehicle.wheel_radius
    v = 0.0 if drive else target
    t, t_reached = 0.0, None
    X, Y, U, T, S = [], [], [], [], []
    while t < profile.max_time:
        if drive and t_reached is None and v >= target:
            t_reached = t
        if drive and t_reached is not None and t - t_reached >= profile.coast:
            break
        if not drive and t >= profile.coast + profile.ramp:
            break
        s = 0.0 if (not drive or t_reached is not None) else profile.slip(t, v, peak, target)
        vc = max(v, slip_floor)
        omega = (1.0 + s) * vc / rw
        a = G * float(pacejka_mu(s, pacejka))
        X.append([v])
        U.append([omega + omega_std * rng.standard_normal()])
        Y.append([a + accel_std * rng.standard_normal(), v + speed_std * rng.standard_normal()])
        T.append([a])
        S.append(s)
        v = v + Ts * a
        t += Ts
    meta = {"label": "tire", "seed": seed, "peak_slip": peak, "target_speed": target,
            "accel_std": accel_std, "speed_std": speed_std, "omega_std": omega_std,
            "slip": np.asarray(S), "slip_range": [float(min(S)), float(max(S))],
            "pacejka": pacejka.__dict__, "vehicle": vehicle.__dict__}
    return Trajectory(Ts, np.asarray(X), np.asarray(Y), np.asarray(T), np.asarray(U), meta,
                      ("v",), ("accel_meas", "v_meas"), ("friction_accel",))


def simulate_tire_runs(n_accels=5, seed=0, **kw) -> list[Trajectory]:
    """``n_accels`` independent accelerations from standstill."""
    seeds = np.random.SeedSequence(seed).spawn(n_accels)
    return [simulate_tire_run(seed=int(s.generate_state(1)[0]), **kw) for s in seeds]


# ---------------------------------------------------------------------------
# three-way intersection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IntersectionGeometry:
    """A straight approach along ``x = 0`` from ``y = 0``, a quarter arc of
    radius ``radius`` turning left or right, and a straight exit along
    ``y = approach + radius`` that ends at ``|x| = exit_x``."""

    approach: float = 8.0
    radius: float = 10.0
    exit_x: float = 24.0

    def length(self) -> float:
        return self.approach + 0.5 * np.pi * self.radius + (self.exit_x - self.radius)

    def sample(self, s, turn: int, speed: float):
        """Position, velocity and acceleration at arc length ``s``;
        ``turn`` is +1 for left, -1 for right, speed is constant."""
        L0, R = self.approach, self.radius
        L1 = L0 + 0.5 * np.pi * R
        if s <= L0:
            return np.array([0.0, s]), np.array([0.0, speed]), np.zeros(2)
        if s <= L1:
            phi = (s - L0) / R
            cx = -turn * R
            # angle measured from the center towards the vehicle
            pos = np.array([cx + turn * R * np.cos(phi), L0 + R * np.sin(phi)])
            tangent = np.array([-turn * np.sin(phi), np.cos(phi)])
            normal = np.array([cx, L0]) - pos
            return pos, speed * tangent, (speed**2 / R) * normal / R
        d = s - L1
        return np.array([-turn * (R + d), L0 + R]), np.array([-turn * speed, 0.0]), np.zeros(2)


def simulate_vehicle(geometry: IntersectionGeometry, turn: int, speed: float, Ts=0.2, r=0.2, rng=None):
    rng = np.random.default_rng() if rng is None else rng
    n = int(np.floor(geometry.length() / (speed * Ts))) + 1
    X, Y, A = np.empty((n, 4)), np.empty((n, 2)), np.empty((n, 2))
    for k in range(n):
        p, v, a = geometry.sample(k * Ts * speed, turn, speed)
        X[k, :2], X[k, 2:], A[k] = p, v, a
        Y[k] = p + np.sqrt(r) * rng.standard_normal(2)
    return X, Y, A


def simulate_intersection(n_vehicles=150, seed=0, geometry: IntersectionGeometry = IntersectionGeometry(),
                          speed=10.0, speed_dev=0.05, Ts=0.2, r=0.2) -> list[Trajectory]:
    """Vehicles entering one after another, each turning left or right with
    equal probability at a constant speed drawn around ``speed`` with
    relative deviation ``speed_dev``."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_vehicles):
        turn = 1 if rng.random() < 0.5 else -1
        v = speed * (1.0 + speed_dev * rng.standard_normal())
        X, Y, A = simulate_vehicle(geometry, turn, v, Ts, r, rng)
        meta = {"label": "left" if turn > 0 else "right", "vehicle": i, "seed": seed, "speed": v}
        out.append(Trajectory(Ts, X, Y, A, meta=meta, state_names=("px", "py", "vx", "vy"),
                              obs_names=("px_meas", "py_meas"), truth_names=("ax", "ay")))
    return out
