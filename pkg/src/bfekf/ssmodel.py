"""Gray-box state-space models augmented with a basis-function expansion.

The unknown function ``u_f(x) = Phi(phi(x)) theta`` feeds a known model

    x[k+1] = f(x[k], u[k], u_f) + process noise
    y[k]   = h(x[k], u[k], u_f) + measurement noise
    theta[k+1] = theta[k] + weight noise

All ``J`` outputs of ``u_f`` share one set of basis functions. The weights
are laid out either *stacked* (all weights of output 0, then output 1, ...)
or *staggered* (the ``J`` weights of each center kept together).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import basis
from .basis import ActiveSet, BasisConfig, CartesianGrid
from .errors import DomainError, ShapeError

STACKED = "stacked"
STAGGERED = "staggered"
ORDERINGS = (STACKED, STAGGERED)

_PSD_TOL = -1e-10


def _check_cov(name, m, definite=False):
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.shape[0] != m.shape[1]:
        raise ShapeError(f"{name} must be square, got {m.shape}")
    if not np.allclose(m, m.T, rtol=1e-12, atol=1e-14):
        raise DomainError(f"{name} must be symmetric")
    ev = np.linalg.eigvalsh(m) if m.size else np.zeros(0)
    if ev.size and (ev.min() <= 0 if definite else ev.min() < _PSD_TOL * max(1.0, ev.max())):
        kind = "positive definite" if definite else "positive semi-definite"
        raise DomainError(f"{name} must be {kind} (min eigenvalue {ev.min():.3g})")
    return m


# ---------------------------------------------------------------------------
# weight layout
# ---------------------------------------------------------------------------


def weight_indices(active: ActiveSet, n_centers: int, output_dim: int, ordering: str) -> np.ndarray:
    """Positions in ``theta`` of the weights attached to the active centers.

    The result is strictly increasing for both orderings.
    """
    a = active.indices
    j = np.arange(output_dim, dtype=np.int64)
    if ordering == STACKED:
        return (j[:, None] * n_centers + a[None, :]).ravel()
    if ordering == STAGGERED:
        return (a[:, None] * output_dim + j[None, :]).ravel()
    raise ValueError(f"unknown weight ordering {ordering!r}")


def expansion_matrix(beta: np.ndarray, output_dim: int, ordering: str) -> np.ndarray:
    """``Phi`` restricted to active weights: ``I (x) beta^T`` or ``beta^T (x) I``."""
    eye = np.eye(output_dim)
    if ordering == STACKED:
        return np.kron(eye, beta[None, :])
    if ordering == STAGGERED:
        return np.kron(beta[None, :], eye)
    raise ValueError(f"unknown weight ordering {ordering!r}")


def _weights_matrix(theta_active, output_dim, ordering):
    # (n_active, J) view of the active weights
    if ordering == STACKED:
        return theta_active.reshape(output_dim, -1).T
    return theta_active.reshape(-1, output_dim)


def combine(beta: np.ndarray, theta_active: np.ndarray, output_dim: int, ordering: str) -> np.ndarray:
    """``u_f = Phi theta`` from active basis values and active weights."""
    if theta_active.size != beta.size * output_dim:
        raise ShapeError(
            f"{theta_active.size} active weights do not match {beta.size} basis values x {output_dim} outputs")
    if beta.size == 0:
        return np.zeros(output_dim)
    return beta @ _weights_matrix(theta_active, output_dim, ordering)


def reorder(theta: np.ndarray, n_centers: int, output_dim: int, source: str, target: str) -> np.ndarray:
    """Permute a full weight vector from one ordering to the other."""
    if theta.size != n_centers * output_dim:
        raise ShapeError("weight vector length does not match grid size x outputs")
    if source == target:
        return theta.copy()
    if source == STACKED:
        return theta.reshape(output_dim, n_centers).T.ravel()
    return theta.reshape(n_centers, output_dim).T.ravel()


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


class AugmentedModel:
    """Base class: known dynamics and sensor plus an RBF expansion.

    Subclasses provide the known parts (``transition``, ``observe``, the
    basis-input ``transform`` and their Jacobians). Process noise ``Q`` is
    the covariance of the additive noise on the state after any input gain
    has been applied. Weight noise is isotropic with variance
    ``weight_noise``.
    """

    name = "model"
    # the sensor reads u_f directly (adds an H_theta block)
    observation_uses_weights = False

    def __init__(self, state_dim, obs_dim, output_dim, grid, config, Q, R,
                 weight_noise=0.0, Ts=1.0, ordering=STAGGERED):
        self.state_dim = int(state_dim)
        self.obs_dim = int(obs_dim)
        self.output_dim = int(output_dim)
        if self.output_dim and (grid is None or config is None):
            raise ValueError("an expansion needs a grid and a basis configuration")
        if ordering not in ORDERINGS:
            raise ValueError(f"unknown weight ordering {ordering!r}")
        self.grid: CartesianGrid | None = grid if self.output_dim else None
        self.config: BasisConfig | None = config if self.output_dim else None
        self.Q = _check_cov("Q", Q)
        self.R = _check_cov("R", R, definite=True)
        if self.Q.shape != (self.state_dim, self.state_dim):
            raise ShapeError(f"Q has shape {self.Q.shape}, expected {(self.state_dim,) * 2}")
        if self.R.shape != (self.obs_dim, self.obs_dim):
            raise ShapeError(f"R has shape {self.R.shape}, expected {(self.obs_dim,) * 2}")
        if weight_noise < 0:
            raise DomainError("weight noise variance must be non-negative")
        self.weight_noise = float(weight_noise)
        self.Ts = float(Ts)
        self.ordering = ordering

    @property
    def n_centers(self) -> int:
        return self.grid.size if self.output_dim else 0

    @property
    def n_weights(self) -> int:
        return self.n_centers * self.output_dim

    @property
    def has_expansion(self) -> bool:
        return self.output_dim > 0

    # -- known parts, overridden by subclasses -------------------------------
    def transition(self, x, u, uf):
        raise NotImplementedError

    def transition_jacobians(self, x, u, uf):
        """``(df/dx, df/du_f)``."""
        raise NotImplementedError

    def observe(self, x, u, uf):
        raise NotImplementedError

    def observation_jacobians(self, x, u, uf):
        """``(dh/dx, dh/du_f)``; the second entry is ``None`` when the sensor
        does not see ``u_f``."""
        raise NotImplementedError

    def transform(self, x, u):
        """Basis input ``phi(x, u)``."""
        raise NotImplementedError

    def transform_jacobian(self, x, u):
        raise NotImplementedError

    def learning_enabled(self, x, u) -> bool:
        return True

    def with_ordering(self, ordering: str) -> "AugmentedModel":
        import copy

        clone = copy.copy(self)
        if ordering not in ORDERINGS:
            raise ValueError(f"unknown weight ordering {ordering!r}")
        clone.ordering = ordering
        return clone


class LinearExpansionModel(AugmentedModel):
    """``x+ = F x + G u_f``, ``y = H x`` with basis input ``D x``."""

    def __init__(self, F, G, H, D, Q, R, grid=None, config=None, output_dim=None,
                 weight_noise=0.0, Ts=1.0, ordering=STAGGERED, name="linear"):
        self.F = np.atleast_2d(np.asarray(F, dtype=float))
        self.H = np.atleast_2d(np.asarray(H, dtype=float))
        n_x = self.F.shape[0]
        if output_dim is None:
            output_dim = 0 if G is None else np.atleast_2d(G).shape[1]
        self.G = np.zeros((n_x, 0)) if G is None else np.asarray(G, dtype=float).reshape(n_x, -1)
        self.D = None if D is None else np.atleast_2d(np.asarray(D, dtype=float))
        super().__init__(n_x, self.H.shape[0], output_dim, grid, config, Q, R, weight_noise, Ts, ordering)
        if self.has_expansion:
            if self.G.shape != (n_x, self.output_dim):
                raise ShapeError(f"G has shape {self.G.shape}, expected {(n_x, self.output_dim)}")
            if self.D is None or self.D.shape != (grid.dims, n_x):
                raise ShapeError("basis-input map D must be (grid dims) x (state dim)")
        if self.H.shape[1] != n_x:
            raise ShapeError("H column count must equal the state dimension")
        self.name = name

    def transition(self, x, u, uf):
        out = self.F @ x
        if self.has_expansion:
            out = out + self.G @ uf
        return out

    def transition_jacobians(self, x, u, uf):
        return self.F, self.G

    def observe(self, x, u, uf):
        return self.H @ x

    def observation_jacobians(self, x, u, uf):
        return self.H, None

    def transform(self, x, u):
        return self.D @ x

    def transform_jacobian(self, x, u):
        return self.D


@dataclass(frozen=True)
class VehicleParams:
    """Static vehicle constants for the longitudinal friction model."""

    l_r: float = 1.6
    l_f: float = 1.4
    mass: float = 1000.0
    g0: float = 9.81
    wheel_radius: float = 0.3

    @property
    def gain(self) -> float:
        """``G = g0 l_f / (l_r + l_f)``: friction coefficient to acceleration."""
        return self.g0 * self.l_f / (self.l_r + self.l_f)


def wheel_slip(v, omega, wheel_radius, floor):
    """``(r_w omega - v) / v`` with ``v`` clamped below by ``floor``."""
    vc = max(float(v), floor)
    return (wheel_radius * np.asarray(omega, dtype=float).item() - vc) / vc


class TireFrictionModel(AugmentedModel):
    """Longitudinal velocity with learned friction curve over wheel slip.

    State ``[v]``, known input ``u = omega_f`` (front wheel speed), basis
    input the scalar slip. The sensor returns ``[G u_f, v]``, so the
    observation depends on the weights. Below ``slip_floor`` the slip is
    computed at the floor velocity and weight learning is paused.
    """

    name = "tire"
    observation_uses_weights = True

    def __init__(self, vehicle: VehicleParams, grid, config, q, R, weight_noise=0.0, Ts=0.04,
                 slip_floor=0.5, exact_weight_observation=True):
        if grid.dims != 1:
            raise ShapeError("the friction curve is a function of slip only (1-D grid)")
        super().__init__(1, 2, 1, grid, config, np.atleast_2d(q), R, weight_noise, Ts, STAGGERED)
        self.vehicle = vehicle
        self.slip_floor = float(slip_floor)
        self.exact_weight_observation = bool(exact_weight_observation)
        self.observation_uses_weights = self.exact_weight_observation

    def transition(self, x, u, uf):
        return x + self.Ts * self.vehicle.gain * uf

    def transition_jacobians(self, x, u, uf):
        return np.eye(1), np.array([[self.Ts * self.vehicle.gain]])

    def observe(self, x, u, uf):
        return np.array([self.vehicle.gain * uf[0], x[0]])

    def observation_jacobians(self, x, u, uf):
        Hx = np.array([[0.0], [1.0]])
        if not self.exact_weight_observation:
            return Hx, None
        return Hx, np.array([[self.vehicle.gain], [0.0]])

    def transform(self, x, u):
        return np.array([wheel_slip(x[0], u, self.vehicle.wheel_radius, self.slip_floor)])

    def transform_jacobian(self, x, u):
        v = float(x[0])
        if v <= self.slip_floor:
            return np.zeros((1, 1))
        return np.array([[-self.vehicle.wheel_radius * np.asarray(u, dtype=float).item() / v**2]])

    def learning_enabled(self, x, u) -> bool:
        return float(x[0]) > self.slip_floor


# ---------------------------------------------------------------------------
# evaluation and linearization
# ---------------------------------------------------------------------------


def select(model: AugmentedModel, x, u=None, method="fast") -> ActiveSet:
    """Active centers at the basis input of state ``x``."""
    if not model.has_expansion:
        return ActiveSet.empty()
    if method != "dense" and not model.config.compact:
        method = "dense"
    return basis.select_active(model.transform(x, u), model.grid, model.config, method)


def eval_unknown(model: AugmentedModel, x, theta, active: ActiveSet, u=None,
                 counter: Counter | None = None) -> np.ndarray:
    """``u_f`` at state ``x`` using only the active centers."""
    if not model.has_expansion:
        return np.zeros(0)
    theta = np.asarray(theta, dtype=float)
    if theta.size != model.n_weights:
        raise ShapeError(f"weight vector has length {theta.size}, model expects {model.n_weights}")
    z = model.transform(x, u)
    beta = basis.eval_active(z, model.grid, model.config, active, counter)
    wa = weight_indices(active, model.n_centers, model.output_dim, model.ordering)
    return combine(beta, theta[wa], model.output_dim, model.ordering)


@dataclass
class Linearization:
    """Everything one filter update needs about the expansion at a point."""

    active: ActiveSet
    weights: np.ndarray  # positions in theta of the active weights
    beta: np.ndarray
    uf: np.ndarray
    duf_dx: np.ndarray  # J x n_x
    Phi: np.ndarray  # J x (J * n_active)


def linearize_expansion(model: AugmentedModel, x, theta, active: ActiveSet, u=None,
                        counter: Counter | None = None) -> Linearization:
    J = model.output_dim
    if not model.has_expansion:
        return Linearization(active, np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0),
                             np.zeros((0, model.state_dim)), np.zeros((0, 0)))
    z = model.transform(x, u)
    beta = basis.eval_active(z, model.grid, model.config, active, counter)
    wa = weight_indices(active, model.n_centers, J, model.ordering)
    theta_a = theta[wa]
    uf = combine(beta, theta_a, J, model.ordering)
    if active.count:
        grad = basis.eval_active_gradient(z, model.grid, model.config, active)  # n_a x P
        duf_dz = _weights_matrix(theta_a, J, model.ordering).T @ grad  # J x P
        duf_dx = duf_dz @ model.transform_jacobian(x, u)
    else:
        duf_dx = np.zeros((J, model.state_dim))
    Phi = expansion_matrix(beta, J, model.ordering)
    return Linearization(active, wa, beta, uf, duf_dx, Phi)


def jacobians(model: AugmentedModel, x, theta, active: ActiveSet, u=None):
    """``(F_x, F_theta)`` of the state transition, ``F_theta`` restricted to
    the active weight columns. The chain term through the basis input is
    included in ``F_x``."""
    lin = linearize_expansion(model, np.asarray(x, dtype=float), np.asarray(theta, dtype=float), active, u)
    A, B = model.transition_jacobians(x, u, lin.uf)
    if not model.has_expansion:
        return A, np.zeros((model.state_dim, 0))
    return A + B @ lin.duf_dx, B @ lin.Phi


def observation_jacobians(model: AugmentedModel, x, theta, active: ActiveSet, u=None):
    """``(y_pred, H_x, H_theta)``; ``H_theta`` is ``None`` when the sensor is
    independent of the weights."""
    lin = linearize_expansion(model, np.asarray(x, dtype=float), np.asarray(theta, dtype=float), active, u)
    return _observation(model, x, u, lin)


def _observation(model, x, u, lin: Linearization):
    y = model.observe(x, u, lin.uf)
    Hx, Hu = model.observation_jacobians(x, u, lin.uf)
    if Hu is None or not model.has_expansion:
        return y, Hx, None
    return y, Hx + Hu @ lin.duf_dx, Hu @ lin.Phi


# ---------------------------------------------------------------------------
# built-in models
# ---------------------------------------------------------------------------


def cv_matrices(Ts: float, dims: int):
    """Constant-velocity ``F`` and acceleration gain ``G`` for a state ordered
    ``[positions, velocities]``."""
    eye = np.eye(dims)
    F = np.kron(np.array([[1.0, Ts], [0.0, 1.0]]), eye)
    G = np.kron(np.array([[Ts**2 / 2.0], [Ts]]), eye)
    return F, G


def build_cv_model(Ts, Q, R, grid, config, weight_noise=0.0, ordering=STAGGERED,
                   with_expansion=True) -> LinearExpansionModel:
    """2-D constant-velocity model with learned acceleration field over position.

    ``Q`` is the covariance of the 2-D acceleration noise, which enters
    through the same gain as the learned acceleration.
    """
    F, G = cv_matrices(Ts, 2)
    R = _as_cov(R, 2)
    H = np.hstack([np.eye(2), np.zeros((2, 2))])
    return LinearExpansionModel(
        F, G if with_expansion else None, H, H if with_expansion else None,
        G @ _as_cov(Q, 2) @ G.T, R,
        grid if with_expansion else None, config if with_expansion else None,
        weight_noise=weight_noise, Ts=Ts, ordering=ordering,
        name="cv+rbf" if with_expansion else "cv")


def _as_cov(Q, n):
    Q = np.asarray(Q, dtype=float)
    if Q.ndim == 0:
        return Q * np.eye(n)
    return Q


def build_1d_models(grid_b: CartesianGrid, grid_c: CartesianGrid, config: BasisConfig,
                    q=0.01, r=0.01, Ts=1.0, ordering=STAGGERED):
    """The three example models sharing a position sensor.

    (a) constant velocity; (b) constant velocity with a learned acceleration
    over position, entering with the process noise; (c) the learned map
    ``x+ = u_f(x)`` over the full 2-D state.
    """
    F, G = cv_matrices(Ts, 1)
    H = np.array([[1.0, 0.0]])
    R = np.array([[r]])
    Qcv = q * G @ G.T
    a = LinearExpansionModel(F, None, H, None, Qcv, R, Ts=Ts, name="a")
    b = LinearExpansionModel(F, G, H, np.array([[1.0, 0.0]]), Qcv, R, grid_b, config,
                             output_dim=1, Ts=Ts, ordering=ordering, name="b")
    c = LinearExpansionModel(np.zeros((2, 2)), np.eye(2), H, np.eye(2), q * np.eye(2), R, grid_c, config,
                             output_dim=2, Ts=Ts, ordering=ordering, name="c")
    return a, b, c


def build_tire_model(vehicle: VehicleParams, grid, config, q=1.0, R=((0.1, 0.0), (0.0, 0.01)),
                     weight_noise=1e-8, Ts=0.04, slip_floor=0.5, exact_weight_observation=True):
    return TireFrictionModel(vehicle, grid, config, q, np.asarray(R, dtype=float), weight_noise, Ts,
                             slip_floor, exact_weight_observation)
