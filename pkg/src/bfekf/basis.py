"""Radial basis functions on Cartesian grids.

Two families are supported: the Wendland compactly supported RBF
``(1 - r)_+^6 (35 r^2 + 18 r + 3) / 3`` with support radius ``alpha`` and the
globally supported Gaussian RBF with length scale ``l``.

Grid centers are addressed by a single row-major global index::

    index = sum_p i_p * prod_{q > p} m_q

so that an :class:`ActiveSet` produced here is valid in every other module.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import DomainError, ShapeError, UnsupportedFamilyError

WENDLAND = "wendland"
GAUSSIAN = "gaussian"

_SPACING_RTOL = 1e-12


# ---------------------------------------------------------------------------
# scalar profiles
# ---------------------------------------------------------------------------


def _check_radius(r):
    r = np.asarray(r, dtype=float)
    if np.any(r < 0) or np.any(np.isnan(r)):
        raise DomainError("scaled radius must be non-negative")
    return r


def wendland_value(r):
    """Wendland function of a radius already scaled by ``1/alpha``.

    Exactly zero for ``r >= 1``. Accepts scalars or arrays.
    """
    r = _check_radius(r)
    t = np.clip(1.0 - r, 0.0, None)
    out = t**6 * (35.0 * r * r + 18.0 * r + 3.0) / 3.0
    return out if out.ndim else float(out)


def wendland_derivative(r):
    """d/dr of :func:`wendland_value`; zero at ``r = 0`` and for ``r >= 1``."""
    r = _check_radius(r)
    t = np.clip(1.0 - r, 0.0, None)
    out = -56.0 / 3.0 * r * t**5 * (5.0 * r + 1.0)
    return out if out.ndim else float(out)


def _wendland_derivative_over_r(r):
    # w'(r) / r, finite at the origin
    t = np.clip(1.0 - r, 0.0, None)
    return -56.0 / 3.0 * t**5 * (5.0 * r + 1.0)


def gaussian_value(x, center, length_scale: float) -> float:
    """Gaussian RBF ``exp(-||x - center||^2 / (2 l^2))``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    center = np.atleast_1d(np.asarray(center, dtype=float))
    if x.shape != center.shape:
        raise ShapeError(f"point shape {x.shape} does not match center shape {center.shape}")
    if length_scale <= 0:
        raise DomainError("length scale must be positive")
    d = x - center
    return float(np.exp(-np.dot(d, d) / (2.0 * length_scale**2)))


# ---------------------------------------------------------------------------
# configuration and grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BasisConfig:
    """Basis family, its scale (support ``alpha`` or length scale ``l``) and
    the prior weight variance ``sigma_j^2``."""

    family: str
    scale: float
    prior_variance: float = 1.0

    def __post_init__(self):
        if self.family not in (WENDLAND, GAUSSIAN):
            raise ValueError(f"unknown basis family {self.family!r}")
        if not self.scale > 0:
            raise DomainError(f"{self.family} scale must be positive, got {self.scale}")
        if self.prior_variance < 0:
            raise DomainError("prior weight variance must be non-negative")

    @classmethod
    def wendland(cls, support: float, prior_variance: float = 1.0) -> "BasisConfig":
        return cls(WENDLAND, float(support), float(prior_variance))

    @classmethod
    def gaussian(cls, length_scale: float, prior_variance: float = 1.0) -> "BasisConfig":
        return cls(GAUSSIAN, float(length_scale), float(prior_variance))

    @property
    def compact(self) -> bool:
        return self.family == WENDLAND


@dataclass(frozen=True, eq=False)
class CartesianGrid:
    """Tensor-product grid of basis-function centers.

    ``centers[p]`` holds the strictly increasing coordinates along dimension
    ``p``. Instances are immutable and safe to share between threads.
    """

    centers: tuple

    def __post_init__(self):
        if len(self.centers) == 0:
            raise ShapeError("grid needs at least one dimension")
        cs = []
        for p, c in enumerate(self.centers):
            c = np.array(c, dtype=float).ravel()
            if c.size == 0:
                raise ShapeError(f"dimension {p} has no centers")
            if c.size > 1 and not np.all(np.diff(c) > 0):
                raise ValueError(f"centers along dimension {p} must be strictly increasing")
            c.setflags(write=False)
            cs.append(c)
        object.__setattr__(self, "centers", tuple(cs))

    @property
    def dims(self) -> int:
        return len(self.centers)

    @property
    def counts(self) -> tuple:
        return tuple(c.size for c in self.centers)

    @property
    def size(self) -> int:
        return math.prod(self.counts)

    @cached_property
    def strides(self) -> np.ndarray:
        m = self.counts
        return np.array([math.prod(m[p + 1:]) for p in range(self.dims)], dtype=np.int64)

    @cached_property
    def origin(self) -> np.ndarray:
        return np.array([c[0] for c in self.centers])

    @cached_property
    def spacing(self) -> np.ndarray:
        """Per-dimension spacing; NaN for dimensions that are not equally spaced."""
        out = np.full(self.dims, np.nan)
        for p, c in enumerate(self.centers):
            if c.size == 1:
                out[p] = np.inf
                continue
            d = np.diff(c)
            step = (c[-1] - c[0]) / (c.size - 1)
            if np.all(np.abs(d - step) <= _SPACING_RTOL * step + 4 * np.spacing(np.abs(c).max())):
                out[p] = step
        return out

    @property
    def regular(self) -> bool:
        return not np.any(np.isnan(self.spacing))

    @cached_property
    def points(self) -> np.ndarray:
        """All centers as an ``(size, dims)`` array in global-index order."""
        mesh = np.meshgrid(*self.centers, indexing="ij")
        out = np.stack([m.ravel() for m in mesh], axis=1)
        out.setflags(write=False)
        return out

    @cached_property
    def columns(self) -> np.ndarray:
        """``points.T`` made contiguous, one row per dimension."""
        out = np.ascontiguousarray(self.points.T)
        out.setflags(write=False)
        return out

    def ravel(self, multi_index) -> np.ndarray:
        return np.asarray(multi_index, dtype=np.int64) @ self.strides

    def unravel(self, index) -> np.ndarray:
        """Per-dimension indices, shape ``(len(index), dims)``."""
        return np.stack(np.unravel_index(np.asarray(index, dtype=np.int64), self.counts), axis=-1)

    def coordinates(self, index) -> np.ndarray:
        sub = self.unravel(index)
        return np.stack([self.centers[p][sub[:, p]] for p in range(self.dims)], axis=-1)


def make_grid(lower: Sequence[float], upper: Sequence[float], spacing) -> CartesianGrid:
    """Equally spaced grid from ``lower`` to ``upper`` (inclusive).

    When the extent is not a multiple of ``spacing`` the last cell is
    truncated, so no center ever exceeds ``upper``.
    """
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    if lower.shape != upper.shape:
        raise ShapeError("lower and upper bounds differ in dimension")
    step = np.broadcast_to(np.asarray(spacing, dtype=float), lower.shape)
    if np.any(~(step > 0)):
        raise DomainError("grid spacing must be positive")
    if np.any(~(upper > lower)):
        raise DomainError("upper bound must exceed lower bound in every dimension")
    centers = []
    for lo, hi, d in zip(lower, upper, step):
        n = int(math.floor((hi - lo) / d + 1e-9)) + 1
        centers.append(lo + d * np.arange(n))
    return CartesianGrid(tuple(centers))


# ---------------------------------------------------------------------------
# active sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ActiveSet:
    """Strictly increasing global indices of the basis functions in use."""

    indices: np.ndarray

    @property
    def count(self) -> int:
        return int(self.indices.size)

    def __len__(self) -> int:
        return self.count

    def __eq__(self, other):
        if not isinstance(other, ActiveSet):
            return NotImplemented
        return np.array_equal(self.indices, other.indices)

    @classmethod
    def empty(cls) -> "ActiveSet":
        return cls(np.zeros(0, dtype=np.int64))

    @classmethod
    def all(cls, grid: CartesianGrid) -> "ActiveSet":
        return cls(np.arange(grid.size, dtype=np.int64))


def _point(x, grid: CartesianGrid) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
    if x.size != grid.dims:
        raise ShapeError(f"point has dimension {x.size}, grid has {grid.dims}")
    if not np.all(np.isfinite(x)):
        raise DomainError("basis input must be finite")
    return x


def _sq_dist(x, coords) -> np.ndarray:
    # accumulate per dimension in a fixed order so every code path that
    # evaluates a given center produces bitwise identical results
    d2 = np.zeros(coords.shape[0])
    for p in range(coords.shape[1]):
        d2 = d2 + (x[p] - coords[:, p]) ** 2
    return d2


def active_exact(x, grid: CartesianGrid, config: BasisConfig) -> ActiveSet:
    """All centers strictly inside the support, found by checking every center."""
    if not config.compact:
        raise UnsupportedFamilyError("Gaussian basis has global support; no active subset exists")
    x = _point(x, grid)
    cols = grid.columns
    # every center is checked along the first coordinate; a center inside the
    # ball is within alpha there, so only those survivors (with a rounding
    # margin) get the full distance, computed exactly as in _sq_dist
    tmp = np.subtract(x[0], cols[0])
    np.abs(tmp, out=tmp)
    cand = np.flatnonzero(tmp < config.scale * (1.0 + 1e-9))
    d2 = np.zeros(cand.size)
    for p in range(grid.dims):
        d2 = d2 + (x[p] - cols[p][cand]) ** 2
    r = np.sqrt(d2) / config.scale
    return ActiveSet(cand[r < 1.0].astype(np.int64))


def _box_ranges(x, grid: CartesianGrid, alpha: float):
    ranges = []
    for p in range(grid.dims):
        c = grid.centers[p]
        m = c.size
        if m == 1:
            lo, hi = 0, 0
        else:
            step = grid.spacing[p]
            t = (x[p] - c[0]) / step
            reach = alpha / step
            lo = max(0, math.ceil(t - reach) - 1)
            hi = min(m - 1, math.floor(t + reach) + 1)
        # the widened range is trimmed with the same comparison the exact
        # check implies per dimension, which keeps fast a superset of exact
        while lo <= hi and not abs(x[p] - c[lo]) < alpha:
            lo += 1
        while hi >= lo and not abs(x[p] - c[hi]) < alpha:
            hi -= 1
        if lo > hi:
            return None
        ranges.append(np.arange(lo, hi + 1, dtype=np.int64))
    return ranges


def active_fast(x, grid: CartesianGrid, config: BasisConfig) -> ActiveSet:
    """Centers inside the axis-aligned box ``|x_p - c_p| < alpha``.

    Index ranges come from arithmetic on the grid origin and spacing, so the
    cost is ``O(P + n_active)`` regardless of grid size. The box encloses the
    support ball, hence the result is a superset of :func:`active_exact`.
    """
    if not config.compact:
        raise UnsupportedFamilyError("Gaussian basis has global support; no active subset exists")
    if not grid.regular:
        raise ValueError("fast selection needs an equally spaced grid in every dimension")
    x = _point(x, grid)
    ranges = _box_ranges(x, grid, config.scale)
    if ranges is None:
        return ActiveSet.empty()
    strides = grid.strides
    idx = ranges[0] * strides[0]
    for p in range(1, grid.dims):
        idx = (idx[:, None] + ranges[p][None, :] * strides[p]).ravel()
    return ActiveSet(idx)


SELECTORS = ("dense", "exact", "fast")


def select_active(x, grid: CartesianGrid, config: BasisConfig, method: str) -> ActiveSet:
    """Dispatch on ``method``: ``dense`` (every center), ``exact`` or ``fast``."""
    if method == "dense":
        return ActiveSet.all(grid)
    if method == "exact":
        return active_exact(x, grid, config)
    if method == "fast":
        return active_fast(x, grid, config)
    raise ValueError(f"unknown selection method {method!r}; expected one of {SELECTORS}")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _profile(d2, config: BasisConfig):
    if config.compact:
        return wendland_value(np.sqrt(d2) / config.scale)
    return np.exp(-d2 / (2.0 * config.scale**2))


def eval_active(x, grid: CartesianGrid, config: BasisConfig, active: ActiveSet,
                counter: Counter | None = None) -> np.ndarray:
    """Basis values at the active centers, in active-index order.

    The caller is responsible for ``active`` having been selected at ``x``;
    a stale set silently yields the wrong columns.
    """
    x = _point(x, grid)
    if active.count == 0:
        return np.zeros(0)
    if counter is not None:
        counter["basis_evals"] += active.count
    return _profile(_sq_dist(x, grid.coordinates(active.indices)), config)


def eval_all(x, grid: CartesianGrid, config: BasisConfig,
             counter: Counter | None = None) -> np.ndarray:
    """Every basis function at ``x`` (length ``grid.size``)."""
    x = _point(x, grid)
    if counter is not None:
        counter["basis_evals"] += grid.size
    return _profile(_sq_dist(x, grid.points), config)


def eval_active_gradient(x, grid: CartesianGrid, config: BasisConfig,
                         active: ActiveSet) -> np.ndarray:
    """Gradient of each active basis function w.r.t. ``x``; shape ``(n_active, P)``.

    For the Wendland family the gradient at a center is the zero vector.
    """
    x = _point(x, grid)
    if active.count == 0:
        return np.zeros((0, grid.dims))
    coords = grid.coordinates(active.indices)
    diff = x[None, :] - coords
    d2 = _sq_dist(x, coords)
    if config.compact:
        r = np.sqrt(d2) / config.scale
        g = _wendland_derivative_over_r(r) / config.scale**2
    else:
        g = -np.exp(-d2 / (2.0 * config.scale**2)) / config.scale**2
    return g[:, None] * diff


def product_eval_gaussian(x, grid: CartesianGrid, length_scale: float,
                          counter: Counter | None = None) -> np.ndarray:
    """All Gaussian basis values via per-dimension factors and Kronecker products.

    Uses ``sum(m_p)`` exponentials instead of ``prod(m_p)``.
    """
    x = _point(x, grid)
    if length_scale <= 0:
        raise DomainError("length scale must be positive")
    out = np.ones(1)
    for p in range(grid.dims):
        c = grid.centers[p]
        factor = np.exp(-((x[p] - c) ** 2) / (2.0 * length_scale**2))
        if counter is not None:
            counter["exp"] += c.size
        out = np.kron(out, factor)
    return out


# ---------------------------------------------------------------------------
# GP view
# ---------------------------------------------------------------------------


def kernel_value(x, x2, grid: CartesianGrid, config: BasisConfig) -> float:
    """Covariance ``sigma^2 * sum_i beta_i(x) beta_i(x2)`` induced by an
    i.i.d. Gaussian prior on the weights."""
    if config.prior_variance == 0:
        return 0.0
    return float(config.prior_variance * eval_all(x, grid, config) @ eval_all(x2, grid, config))


def gram_matrix(points, grid: CartesianGrid, config: BasisConfig) -> np.ndarray:
    phi = np.stack([eval_all(p, grid, config) for p in np.atleast_2d(points)])
    return config.prior_variance * phi @ phi.T


def active_upper_bound(alpha: float, spacing: float, dims: int) -> int:
    """Largest possible active count for fast selection on a regular grid,
    ``(floor(2 alpha / spacing) + 1) ** dims``."""
    if not alpha > 0 or not spacing > 0:
        raise DomainError("support and spacing must be positive")
    if int(dims) != dims or dims < 1:
        raise DomainError("dimension must be a positive integer")
    return (math.floor(2.0 * alpha / spacing) + 1) ** int(dims)
