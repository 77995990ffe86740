"""Partitioned extended Kalman filter for state and expansion weights.

The covariance is kept in three blocks, ``Pxx``, ``Pxt`` (state-weight
cross covariance, stored dense) and ``Ptt``. Both updates take a
``method``:

``dense``
    every weight takes part; the exact EKF for the augmented model.
``exact`` / ``fast``
    only weights of centers active at the current mean take part (selected
    by distance or by the per-dimension box). The time update stays exact
    because inactive columns of ``F_theta`` are zero; the measurement update
    uses a gain that is zero outside the active rows and is applied in
    Joseph form, which keeps the covariance PSD for any gain.

Updates modify the state in place and return it; ``Ptt`` is never copied,
so the per-step cost of the sparse variants does not carry an
``O(n_w^2)`` term.
"""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from . import basis
from .errors import NumericalError, ShapeError
from .ssmodel import (AugmentedModel, Linearization, _observation, combine, expansion_matrix,
                      linearize_expansion, select, weight_indices)

METHODS = ("dense", "exact", "fast")
MAX_CONDITION = 1e12
_EAGER_BYTES = 2**31  # allocate the full weight covariance up front below this

_MAGIC = b"BFEKFST1"
_HEADER = struct.Struct("<8sQQQ")


class FilterState:
    """Mean and partitioned covariance of ``(x, theta)``.

    Weight covariance is held over a *support*: the weights that have ever
    taken part in an update. Outside it, ``Ptt`` is diagonal (the prior
    variance plus accumulated weight noise) and ``Pxt`` is zero, which is
    exactly what the filter equations leave there. A state built from dense
    matrices has every weight in its support.

    Sparse updates write whole rows of the stored weight covariance and
    never its columns, which would be strided. Each stored row carries a
    stamp of its last write; entry ``(i, j)`` is read from the row written
    more recently, so the stored matrix need not be symmetric while the
    covariance it represents is.

    ``Pxt`` and ``Ptt`` return the stored arrays when every weight is in the
    support and the storage is symmetric, and a materialized copy
    otherwise. ``Ptx`` is never stored; it is ``Pxt.T``.
    """

    def __init__(self, x, theta, Pxx, Pxt, Ptt, output_dim: int = 1):
        self.x = np.array(x, dtype=float).ravel()
        self.theta = np.array(theta, dtype=float).ravel()
        self.Pxx = np.array(Pxx, dtype=float).reshape(self.n_x, self.n_x)
        self.output_dim = int(output_dim)
        self.info: dict = {}
        self._set_dense(np.array(Pxt, dtype=float).reshape(self.n_x, self.n_w),
                        np.array(Ptt, dtype=float).reshape(self.n_w, self.n_w))

    @classmethod
    def prior(cls, x, Pxx, theta, variance, output_dim: int = 1) -> "FilterState":
        """State with uncorrelated weights of the given variance (scalar or
        per weight) and an empty support."""
        self = cls.__new__(cls)
        self.x = np.array(x, dtype=float).ravel()
        self.theta = np.array(theta, dtype=float).ravel()
        self.Pxx = np.array(Pxx, dtype=float).reshape(self.n_x, self.n_x)
        self.output_dim = int(output_dim)
        self.info = {}
        n = self.n_w
        self._d0 = np.broadcast_to(np.asarray(variance, dtype=float), (n,)).copy()
        self._offset = 0.0
        self._support = np.zeros(n, dtype=np.int64)
        self._pos = np.full(n, -1, dtype=np.int64)
        self._m = 0
        self._natural = n == 0
        self._B = np.zeros((0, 0))
        self._PxtS = np.zeros((self.n_x, 0))
        self._stamp = np.zeros(0, dtype=np.int64)
        self._clock = 0
        self._uniform = True
        return self

    def _set_dense(self, Pxt, Ptt):
        n = self.n_w
        self._d0 = np.zeros(n)
        self._offset = 0.0
        self._support = np.arange(n, dtype=np.int64)
        self._pos = np.arange(n, dtype=np.int64)
        self._m = n
        self._natural = True
        self._B = Ptt
        self._PxtS = Pxt
        self._stamp = np.zeros(n, dtype=np.int64)
        self._clock = 0
        self._uniform = True

    @property
    def n_x(self) -> int:
        return self.x.size

    @property
    def n_w(self) -> int:
        return self.theta.size

    @property
    def support(self) -> np.ndarray:
        """Weights with stored covariance, in storage order."""
        return self._support[:self._m]

    @property
    def _dense_ready(self) -> bool:
        return self._natural and self._uniform

    def _views(self):
        m = self._m
        return self._PxtS[:, :m], self._B[:m, :m]

    def _stored_ptt(self) -> np.ndarray:
        """Weight covariance over the support, in storage order."""
        B = self._views()[1]
        if self._uniform:
            return B.copy()
        s = self._stamp[:self._m]
        return np.where(s[:, None] >= s[None, :], B, B.T)

    @property
    def Pxt(self) -> np.ndarray:
        if self._natural:
            return self._views()[0]
        out = np.zeros((self.n_x, self.n_w))
        out[:, self.support] = self._views()[0]
        return out

    @Pxt.setter
    def Pxt(self, value):
        Ptt = self.Ptt
        self._set_dense(np.array(value, dtype=float).reshape(self.n_x, self.n_w), Ptt)

    @property
    def Ptt(self) -> np.ndarray:
        if self._dense_ready:
            return self._views()[1]
        if self._natural:
            return self._stored_ptt()
        out = np.zeros((self.n_w, self.n_w))
        out[np.diag_indices(self.n_w)] = self._d0 + self._offset
        s = self.support
        out[np.ix_(s, s)] = self._stored_ptt()
        return out

    @Ptt.setter
    def Ptt(self, value):
        Pxt = self.Pxt
        self._set_dense(Pxt, np.array(value, dtype=float).reshape(self.n_w, self.n_w))

    def weight_covariance(self, idx) -> np.ndarray:
        """``Ptt[idx][:, idx]`` without materializing ``Ptt``."""
        idx = np.asarray(idx, dtype=np.int64)
        out = np.diag(self._d0[idx] + self._offset)
        loc = self._pos[idx]
        inside = np.flatnonzero(loc >= 0)
        out[np.ix_(inside, inside)] = self._true_block(loc[inside])
        return out

    # -- support storage -----------------------------------------------------
    def _ensure(self, idx: np.ndarray) -> np.ndarray:
        """Add weights ``idx`` to the support; return their storage positions."""
        loc = self._pos[idx]
        new = idx[loc < 0]
        if new.size:
            m, k = self._m, new.size
            need = m + k
            cap = self._B.shape[0]
            if need > cap:
                if 8 * self.n_w**2 <= _EAGER_BYTES:
                    # zeroed pages are only materialized when touched
                    cap = self.n_w
                else:
                    cap = min(self.n_w, max(need, 2 * cap, 16))
                B = np.zeros((cap, cap))
                B[:m, :m] = self._B[:m, :m]
                Pxt = np.zeros((self.n_x, cap))
                Pxt[:, :m] = self._PxtS[:, :m]
                stamp = np.zeros(cap, dtype=np.int64)
                stamp[:m] = self._stamp[:m]
                self._B, self._PxtS, self._stamp = B, Pxt, stamp
            new_loc = np.arange(m, need)
            self._support[m:need] = new
            self._pos[new] = new_loc
            self._B[new_loc, new_loc] = self._d0[new] + self._offset
            # fresh rows are all zero off the diagonal, so any stamp reads right
            self._stamp[new_loc] = self._clock
            self._m = need
            if need == self.n_w:
                self._natural = bool(np.all(self._support == np.arange(self.n_w)))
            loc = self._pos[idx]
        return loc

    def _true_rows(self, loc: np.ndarray) -> np.ndarray:
        """Rows ``loc`` of the weight covariance over the support (a copy)."""
        B = self._views()[1]
        R = B[loc]
        if self._uniform or not loc.size:
            return R
        s = self._stamp[:self._m]
        sr = s[loc]
        # rows sharing a stamp need the same set of newer rows
        for t in np.unique(sr):
            newer = np.flatnonzero(s > t)
            if not newer.size:
                continue
            rows = np.flatnonzero(sr == t)
            R[np.ix_(rows, newer)] = B[np.ix_(newer, loc[rows])].T
        return R

    def _true_block(self, loc: np.ndarray) -> np.ndarray:
        sub = self._views()[1][np.ix_(loc, loc)]
        if self._uniform:
            return sub
        s = self._stamp[loc]
        return np.where(s[:, None] >= s[None, :], sub, sub.T)

    def _write_rows(self, loc: np.ndarray, R: np.ndarray) -> None:
        self._clock += 1
        self._B[loc, :self._m] = R
        self._stamp[loc] = self._clock
        self._uniform = loc.size == self._m

    def densify(self) -> None:
        """Bring every weight into the support, in natural order, with
        symmetric storage."""
        if not self._dense_ready:
            self._set_dense(self.Pxt.copy(), self.Ptt.copy())

    def inflate(self, variance: float) -> None:
        """``Ptt += variance * I``."""
        m = self._m
        self._B[np.arange(m), np.arange(m)] += variance
        self._offset += variance

    def copy(self) -> "FilterState":
        out = FilterState.__new__(FilterState)
        out.x, out.theta, out.Pxx = self.x.copy(), self.theta.copy(), self.Pxx.copy()
        out.output_dim = self.output_dim
        out.info = dict(self.info)
        out._d0, out._offset = self._d0.copy(), self._offset
        out._support, out._pos = self._support.copy(), self._pos.copy()
        out._m, out._natural = self._m, self._natural
        out._B, out._PxtS = self._B.copy(), self._PxtS.copy()
        out._stamp, out._clock, out._uniform = self._stamp.copy(), self._clock, self._uniform
        return out

    def full_covariance(self) -> np.ndarray:
        return np.block([[self.Pxx, self.Pxt], [self.Pxt.T, self.Ptt]])

    def reset_state(self, x0, Px0) -> None:
        """Start a new system that shares the weight posterior: the state
        prior is replaced and its correlation with the weights dropped."""
        self.x = np.array(x0, dtype=float).ravel()
        self.Pxx = np.array(Px0, dtype=float).reshape(self.n_x, self.n_x)
        self._PxtS[...] = 0.0

    # -- snapshot -----------------------------------------------------------
    def to_bytes(self) -> bytes:
        """Binary snapshot: header (magic, n_x, n_w, J as little-endian u64)
        followed by ``x, theta, Pxx, Pxt, Ptt`` as little-endian float64,
        matrices row-major."""
        parts = [_HEADER.pack(_MAGIC, self.n_x, self.n_w, self.output_dim)]
        for a in (self.x, self.theta, self.Pxx, self.Pxt, self.Ptt):
            parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes(order="C"))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "FilterState":
        magic, n_x, n_w, J = _HEADER.unpack_from(data, 0)
        if magic != _MAGIC:
            raise ValueError("not a filter-state snapshot")
        sizes = [n_x, n_w, n_x * n_x, n_x * n_w, n_w * n_w]
        expected = _HEADER.size + 8 * sum(sizes)
        if len(data) != expected:
            raise ValueError(f"snapshot has {len(data)} bytes, header implies {expected}")
        arrays, off = [], _HEADER.size
        for n in sizes:
            arrays.append(np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(float))
            off += 8 * n
        return cls(*arrays, output_dim=int(J))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "FilterState":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def initial_state(model: AugmentedModel, x0, Px0, weight_variance: float | None = None,
                  theta0=None) -> FilterState:
    """Prior with ``Ptt = sigma^2 I`` and no state-weight correlation.

    ``weight_variance`` defaults to the prior variance of the basis config.
    """
    n_w = model.n_weights
    if weight_variance is None:
        weight_variance = model.config.prior_variance if model.has_expansion else 0.0
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.size != model.state_dim:
        raise ShapeError(f"initial state has {x0.size} entries, model has {model.state_dim}")
    Px0 = np.asarray(Px0, dtype=float)
    if Px0.ndim == 0:
        Px0 = Px0 * np.eye(model.state_dim)
    theta = np.zeros(n_w) if theta0 is None else np.asarray(theta0, dtype=float)
    return FilterState.prior(x0, Px0, theta, weight_variance, max(model.output_dim, 1))


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _mm(a, b, counter):
    if counter is not None:
        counter["flops"] += 2 * a.shape[0] * a.shape[1] * (b.shape[1] if b.ndim > 1 else 1)
    return a @ b


def _touch(counter, n):
    if counter is not None:
        counter["flops"] += n


def _rows(P, sel):
    return P if isinstance(sel, slice) else P[sel]


def _cols(P, sel):
    # fancy column gathers can come back in Fortran order; keep BLAS inputs
    # laid out as in the dense path so both give identical sums
    return P if isinstance(sel, slice) else np.ascontiguousarray(P[:, sel])


def _block(P, sel):
    return P if isinstance(sel, slice) else P[np.ix_(sel, sel)]


def _check_method(method):
    if method not in METHODS:
        raise ValueError(f"unknown filter method {method!r}; expected one of {METHODS}")


def _active_for(model, state, u, method, active):
    _check_method(method)
    if method == "dense":
        return select(model, state.x, u, "dense")
    if active is not None:
        return active
    return select(model, state.x, u, method)


def _locate(state: FilterState, lin: Linearization, dense: bool):
    """Storage selector for the active weights: a full slice for the dense
    filter, support positions otherwise."""
    if dense:
        state.densify()
        return slice(None)
    return state._ensure(lin.weights)


def _weight_rows(state: FilterState, loc):
    if isinstance(loc, slice):
        return state._views()[1]
    return state._true_rows(loc)


def _sym(a):
    return 0.5 * (a + a.T)


# ---------------------------------------------------------------------------
# time update
# ---------------------------------------------------------------------------


def time_update(state: FilterState, model: AugmentedModel, u=None, method="fast",
                active: basis.ActiveSet | None = None, counter: Counter | None = None) -> FilterState:
    """Predict one step ahead (in place).

    ``active`` overrides the set selected at the current mean; with
    ``method='dense'`` every center is used and ``active`` is ignored.
    """
    act = _active_for(model, state, u, method, active)
    lin = linearize_expansion(model, state.x, state.theta, act, u, counter)
    A, B = model.transition_jacobians(state.x, u, lin.uf)
    x_new = model.transition(state.x, u, lin.uf)
    if not np.all(np.isfinite(x_new)):
        raise NumericalError("state prediction is not finite")

    if not model.has_expansion:
        state.x = x_new
        state.Pxx = _sym(A @ state.Pxx @ A.T + model.Q)
        return state

    Fx = A + B @ lin.duf_dx
    Ft = B @ lin.Phi
    loc = _locate(state, lin, method == "dense")
    Pxt = state._views()[0]
    rows = _weight_rows(state, loc)  # Ptt[a, :]

    cross = _mm(_mm(Fx, _cols(Pxt, loc), counter), Ft.T, counter)
    Pxx = (_mm(_mm(Fx, state.Pxx, counter), Fx.T, counter) + cross + cross.T
           + _mm(_mm(Ft, _cols(rows, loc), counter), Ft.T, counter) + model.Q)
    Pxt_new = _mm(Fx, Pxt, counter)
    if Ft.shape[1]:
        Pxt_new += _mm(Ft, rows, counter)

    state.x = x_new
    state.Pxx = _sym(Pxx)
    Pxt[...] = Pxt_new
    if model.weight_noise:
        state.inflate(model.weight_noise)
        _touch(counter, state._m)
    return state


def time_update_dense(state, model, u=None, counter=None):
    return time_update(state, model, u, "dense", counter=counter)


def time_update_sparse(state, model, u=None, method="fast", active=None, counter=None):
    return time_update(state, model, u, method, active, counter)


# ---------------------------------------------------------------------------
# measurement update
# ---------------------------------------------------------------------------


def _factor(S):
    cond = np.linalg.cond(S)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise NumericalError(f"innovation covariance is ill-conditioned (condition number {cond:.3g})")
    try:
        return la.cho_factor(S, lower=True)
    except la.LinAlgError as exc:
        raise NumericalError(f"innovation covariance is not positive definite (condition number {cond:.3g})") from exc


def measurement_update(state: FilterState, model: AugmentedModel, y, u=None, method="fast",
                       active: basis.ActiveSet | None = None, gain_scale: float = 1.0,
                       counter: Counter | None = None) -> FilterState:
    """Correct with observation ``y`` (in place), Joseph form.

    The weight part of the gain is restricted to the active weights unless
    ``method='dense'``; learning is skipped entirely when the model reports
    ``learning_enabled() == False``. ``gain_scale`` multiplies the gain and
    exists to exercise the Joseph-form guarantee with non-optimal gains.
    """
    y = np.asarray(y, dtype=float).ravel()
    if y.size != model.obs_dim:
        raise ShapeError(f"observation has {y.size} entries, model expects {model.obs_dim}")
    act = _active_for(model, state, u, method, active)
    lin = linearize_expansion(model, state.x, state.theta, act, u, counter)
    y_pred, Hx, Ht = _observation(model, state.x, u, lin)
    R = model.R

    if not model.has_expansion:
        HPx = Hx @ state.Pxx
        S = _sym(R + HPx @ Hx.T)
        L = la.cho_solve(_factor(S), HPx).T * gain_scale
        x_new = state.x + L @ (y - y_pred)
        if not np.all(np.isfinite(x_new)):
            raise NumericalError("corrected state is not finite")
        state.x = x_new
        state.Pxx = _sym(state.Pxx - L @ HPx - HPx.T @ L.T + L @ S @ L.T)
        return state

    dense = method == "dense"
    # storage positions where H_theta may be non-zero
    hsel = _locate(state, lin, dense)
    Pxt = state._views()[0]
    learn = model.learning_enabled(state.x, u)
    gsel = hsel if learn else np.zeros(0, dtype=np.int64)
    gw = (slice(None) if dense else lin.weights) if learn else gsel
    has_ht = Ht is not None and Ht.shape[1] > 0
    rows = _weight_rows(state, hsel) if (has_ht or learn) else None  # Ptt[a, :]

    HPx = _mm(Hx, state.Pxx, counter)
    HPt = _mm(Hx, Pxt, counter)
    if has_ht:
        HPx = HPx + _mm(Ht, _cols(Pxt, hsel).T, counter)
        HPt = HPt + _mm(Ht, rows, counter)
    S = R + _mm(HPx, Hx.T, counter)
    if has_ht:
        S = S + _mm(_cols(HPt, hsel), Ht.T, counter)
    S = _sym(S)
    cf = _factor(S)

    Lx = la.cho_solve(cf, HPx).T * gain_scale
    Lt = la.cho_solve(cf, _cols(HPt, gsel)).T * gain_scale
    nu = y - y_pred

    x_new = state.x + Lx @ nu
    if not np.all(np.isfinite(x_new)):
        raise NumericalError("corrected state is not finite")
    state.x = x_new
    if Lt.shape[0]:
        state.theta[gw] += Lt @ nu

    # P+ = P - K HP - (K HP)^T + K S K^T, valid for any gain K
    LxS = _mm(Lx, S, counter)
    Pxx = state.Pxx - _mm(Lx, HPx, counter) - HPx.T @ Lx.T + _mm(LxS, Lx.T, counter)
    Pxt -= _mm(Lx, HPt, counter)
    if Lt.shape[0]:
        corr = -_mm(HPx.T, Lt.T, counter) + _mm(LxS, Lt.T, counter)
        M = _mm(Lt, HPt, counter)  # rows g of K HP, weight columns
        quad = _mm(_mm(Lt, S, counter), Lt.T, counter)
        _touch(counter, 2 * M.size + quad.size)
        if dense:
            Pxt += corr
            P = rows
            P -= M
            P -= M.T
            P += quad
            P[...] = _sym(P)
        else:
            Pxt[:, gsel] += corr
            # only rows g change apart from their mirror images, which the
            # row stamps account for
            new = rows - M
            new[:, gsel] -= M[:, gsel].T
            new[:, gsel] += quad
            new[:, gsel] = _sym(new[:, gsel])
            state._write_rows(gsel, new)
    state.Pxx = _sym(Pxx)
    return state


def measurement_update_dense(state, model, y, u=None, gain_scale=1.0, counter=None):
    return measurement_update(state, model, y, u, "dense", gain_scale=gain_scale, counter=counter)


def measurement_update_sparse(state, model, y, u=None, method="fast", active=None, gain_scale=1.0,
                              counter=None):
    return measurement_update(state, model, y, u, method, active, gain_scale, counter)


# ---------------------------------------------------------------------------
# queries
# ---------------------------------------------------------------------------


def query_function(state: FilterState, model: AugmentedModel, z, method="fast"):
    """Posterior mean and covariance of ``u_f`` at basis input ``z``."""
    J = model.output_dim
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if not model.config.compact or method == "dense":
        act = basis.ActiveSet.all(model.grid)
    else:
        act = basis.select_active(z, model.grid, model.config, method)
    if act.count == 0:
        return np.zeros(J), np.zeros((J, J))
    beta = basis.eval_active(z, model.grid, model.config, act)
    wa = weight_indices(act, model.n_centers, J, model.ordering)
    Phi = expansion_matrix(beta, J, model.ordering)
    mean = combine(beta, state.theta[wa], J, model.ordering)
    cov = Phi @ state.weight_covariance(wa) @ Phi.T
    return mean, _sym(cov)


@dataclass(frozen=True)
class MemoryEstimate:
    covariance_bits: int
    mean_bits: int

    @property
    def total_bits(self) -> int:
        return self.covariance_bits + self.mean_bits

    @property
    def total_bytes(self) -> int:
        return self.total_bits // 8


def memory_estimate(n_w_per_output: int, output_dim: int, bits_per_number: int = 64) -> MemoryEstimate:
    """Storage of the weight mean and (full, symmetry ignored) covariance."""
    for name, v in (("n_w_per_output", n_w_per_output), ("output_dim", output_dim),
                    ("bits_per_number", bits_per_number)):
        if int(v) != v or v <= 0:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")
    n = int(n_w_per_output) * int(output_dim)
    return MemoryEstimate(int(bits_per_number) * n * n, int(bits_per_number) * n)
