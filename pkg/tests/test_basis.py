from collections import Counter

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bfekf import basis
from bfekf.basis import ActiveSet, BasisConfig, CartesianGrid, make_grid
from bfekf.errors import DomainError, ShapeError, UnsupportedFamilyError


def mp_wendland(r):
    r = mpmath.mpf(r)
    if r >= 1:
        return mpmath.mpf(0)
    return (1 - r) ** 6 * (35 * r**2 + 18 * r + 3) / 3


def brute_active(x, grid, alpha):
    pts = grid.points
    return {i for i in range(grid.size) if np.linalg.norm(np.asarray(x) - pts[i]) / alpha < 1}


# -- Wendland profile --------------------------------------------------------


def test_wendland_examples():
    assert basis.wendland_value(0.0) == 1.0
    assert basis.wendland_value(1.7) == 0.0
    assert basis.wendland_value(0.5) == pytest.approx(float(mp_wendland("0.5")), rel=1e-14)
    assert basis.wendland_value(0.5) == pytest.approx(0.10807291666666667, rel=1e-14)


def test_wendland_derivative_examples():
    assert basis.wendland_derivative(0.0) == 0.0
    assert basis.wendland_derivative(2.0) == 0.0
    h = 1e-6
    fd = (basis.wendland_value(0.5 + h) - basis.wendland_value(0.5 - h)) / (2 * h)
    assert basis.wendland_derivative(0.5) == pytest.approx(fd, abs=1e-8)
    assert basis.wendland_derivative(0.5) == pytest.approx(-1.0208333333333333, rel=1e-12)


@pytest.mark.parametrize("fn", [basis.wendland_value, basis.wendland_derivative])
def test_wendland_rejects_negative(fn):
    with pytest.raises(DomainError):
        fn(-0.1)


def test_wendland_support_and_positivity():
    r = np.linspace(0, 0.999, 500)
    assert np.all(basis.wendland_value(r) > 0)
    assert np.all(basis.wendland_value(np.linspace(1, 5, 50)) == 0)


def test_wendland_derivative_matches_finite_differences():
    h = 1e-6
    r = np.linspace(0, 1.5, 202)[1:-1]
    fd = (basis.wendland_value(r + h) - basis.wendland_value(np.maximum(r - h, 0))) / (
        r + h - np.maximum(r - h, 0))
    assert np.max(np.abs(basis.wendland_derivative(r) - fd)) <= 1e-6


# -- Gaussian ---------------------------------------------------------------


def test_gaussian_examples():
    assert basis.gaussian_value([1.0, 2.0], [1.0, 2.0], 0.7) == 1.0
    assert basis.gaussian_value([1.0], [0.0], 1.0) == pytest.approx(float(mpmath.exp(-0.5)), rel=1e-15)
    joint = basis.gaussian_value([0.0, 1.0], [1.0, 3.0], 1.0)
    sep = basis.gaussian_value([0.0], [1.0], 1.0) * basis.gaussian_value([1.0], [3.0], 1.0)
    assert abs(joint - sep) <= 1e-15


def test_gaussian_shape_mismatch():
    with pytest.raises(ShapeError):
        basis.gaussian_value([0.0, 1.0], [0.0], 1.0)


# -- grids ------------------------------------------------------------------


def test_make_grid_examples():
    g = make_grid([0], [4], 1)
    np.testing.assert_array_equal(g.centers[0], [0, 1, 2, 3, 4])
    assert g.size == 5
    g = make_grid([0, 0], [4, 4], 4)
    assert g.size == 4
    np.testing.assert_array_equal(g.centers[0], [0, 4])
    np.testing.assert_array_equal(g.centers[1], [0, 4])
    g = make_grid([0], [1], 0.4)
    np.testing.assert_allclose(g.centers[0], [0, 0.4, 0.8], rtol=0, atol=1e-15)


@pytest.mark.parametrize("lo,hi,d", [([0], [1], 0), ([0], [1], -1), ([1], [0], 0.1), ([0, 0], [1, 0], 0.1)])
def test_make_grid_errors(lo, hi, d):
    with pytest.raises(DomainError):
        make_grid(lo, hi, d)


def test_grid_invariants():
    g = make_grid([-1.0, 2.0, 0.0], [3.0, 5.0, 1.0], [0.5, 1.0, 0.25])
    assert g.size == np.prod(g.counts)
    for p, c in enumerate(g.centers):
        assert np.all(np.diff(c) > 0)
        np.testing.assert_allclose(np.diff(c), g.spacing[p], rtol=1e-12)
    # row-major mapping
    idx = np.arange(g.size)
    sub = g.unravel(idx)
    np.testing.assert_array_equal(g.ravel(sub), idx)
    np.testing.assert_array_equal(g.coordinates(idx), g.points)
    assert g.ravel([1, 2, 3]) == 1 * g.counts[1] * g.counts[2] + 2 * g.counts[2] + 3


def test_grid_rejects_unsorted_centers():
    with pytest.raises(ValueError):
        CartesianGrid(([0.0, 2.0, 1.0],))


# -- active sets ------------------------------------------------------------


def test_active_exact_examples():
    g = make_grid([0], [4], 1)
    cfg = BasisConfig.wendland(1.5)
    assert set(basis.active_exact([2.0], g, cfg).indices) == {1, 2, 3}
    big = BasisConfig.wendland(10 * 4)
    assert basis.active_exact([1.3], g, big).count == g.size
    g2 = make_grid([0], [1], 1)
    assert basis.active_exact([5.0], g2, BasisConfig.wendland(0.5)).count == 0


def test_active_requires_compact_family():
    g = make_grid([0], [4], 1)
    with pytest.raises(UnsupportedFamilyError):
        basis.active_exact([1.0], g, BasisConfig.gaussian(1.0))
    with pytest.raises(UnsupportedFamilyError):
        basis.active_fast([1.0], g, BasisConfig.gaussian(1.0))


def test_active_fast_examples():
    g = make_grid([0, 0], [2, 2], 1)
    cfg = BasisConfig.wendland(1.2)
    fast = set(basis.active_fast([0.0, 0.0], g, cfg).indices)
    exact = set(basis.active_exact([0.0, 0.0], g, cfg).indices)
    assert fast == {g.ravel(m) for m in [(0, 0), (1, 0), (0, 1), (1, 1)]}
    assert exact == brute_active([0, 0], g, 1.2)
    assert g.ravel((1, 1)) not in exact

    g1 = make_grid([0], [4], 1)
    f1 = basis.active_fast([2.0], g1, BasisConfig.wendland(1.5))
    assert f1 == basis.active_exact([2.0], g1, BasisConfig.wendland(1.5))
    np.testing.assert_array_equal(f1.indices, [1, 2, 3])

    g4 = make_grid([0, 0], [4, 4], 4)
    f4 = basis.active_fast([2.0, 2.0], g4, BasisConfig.wendland(2.9))
    assert f4.count == 4


def test_active_fast_rejects_irregular_grid():
    g = CartesianGrid(([0.0, 1.0, 3.0],))
    with pytest.raises(ValueError):
        basis.active_fast([1.0], g, BasisConfig.wendland(1.0))
    # the exact path still works on arbitrary center lists
    assert set(basis.active_exact([1.0], g, BasisConfig.wendland(1.5)).indices) == {0, 1}


def test_active_fast_far_outside_grid_is_empty():
    g = make_grid([0, 0], [5, 5], 1)
    assert basis.active_fast([100.0, 2.0], g, BasisConfig.wendland(2.0)).count == 0


@settings(max_examples=300, deadline=None)
@given(
    dims=st.integers(1, 3),
    alpha=st.floats(0.05, 4.0),
    spacing=st.floats(0.1, 2.0),
    m=st.integers(1, 7),
    data=st.data(),
)
def test_fast_superset_and_bound(dims, alpha, spacing, m, data):
    g = make_grid([0.0] * dims, [spacing * (m - 1) + 1e-9 if m > 1 else 1.0] * dims, spacing)
    ext = spacing * max(m - 1, 1)
    x = np.array([data.draw(st.floats(-alpha - 1, ext + alpha + 1)) for _ in range(dims)])
    cfg = BasisConfig.wendland(alpha)
    fast = basis.active_fast(x, g, cfg)
    exact = basis.active_exact(x, g, cfg)
    assert set(exact.indices) <= set(fast.indices)
    assert np.all(np.diff(fast.indices) > 0)
    assert fast.count <= basis.active_upper_bound(alpha, spacing, dims)
    vals = basis.eval_active(x, g, cfg, fast)
    extra = np.isin(fast.indices, exact.indices, invert=True)
    assert np.all(vals[extra] == 0)


# -- evaluation -------------------------------------------------------------


def test_eval_active_examples():
    g = make_grid([0], [4], 1)
    cfg = BasisConfig.wendland(1.5)
    assert basis.eval_active([2.0], g, cfg, ActiveSet.empty()).size == 0
    vals = basis.eval_active([2.0], g, cfg, basis.active_exact([2.0], g, cfg))
    w = float(mp_wendland(mpmath.mpf(1) / mpmath.mpf("1.5")))
    np.testing.assert_allclose(vals, [w, 1.0, w], rtol=1e-14)
    assert w == pytest.approx(0.013971447441954987, rel=1e-14)


def test_dense_equivalence_bitwise():
    rng = np.random.default_rng(3)
    g = make_grid([0, 0], [10, 6], [1.0, 0.5])
    cfg = BasisConfig.wendland(1.7)
    for _ in range(200):
        x = rng.uniform(-1, 11, 2)
        for act in (basis.active_fast(x, g, cfg), basis.active_exact(x, g, cfg)):
            full = np.zeros(g.size)
            full[act.indices] = basis.eval_active(x, g, cfg, act)
            assert np.array_equal(full, basis.eval_all(x, g, cfg))


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    g = make_grid([0, 0], [5, 5], 1)
    for cfg in (BasisConfig.wendland(2.2), BasisConfig.gaussian(1.3)):
        act = ActiveSet.all(g)
        for _ in range(10):
            x = rng.uniform(0, 5, 2)
            grad = basis.eval_active_gradient(x, g, cfg, act)
            h = 1e-6
            for p in range(2):
                e = np.zeros(2)
                e[p] = h
                fd = (basis.eval_all(x + e, g, cfg) - basis.eval_all(x - e, g, cfg)) / (2 * h)
                np.testing.assert_allclose(grad[:, p], fd, atol=1e-8)


def test_gradient_at_center_is_zero():
    g = make_grid([0, 0], [2, 2], 1)
    grad = basis.eval_active_gradient([1.0, 1.0], g, BasisConfig.wendland(1.5), ActiveSet.all(g))
    np.testing.assert_array_equal(grad[g.ravel((1, 1))], [0.0, 0.0])


def test_product_eval_gaussian():
    g1 = make_grid([0], [3], 0.5)
    np.testing.assert_allclose(basis.product_eval_gaussian([1.2], g1, 0.8),
                               basis.eval_all([1.2], g1, BasisConfig.gaussian(0.8)), rtol=1e-15)
    g = make_grid([0, 0], [2, 2], 1)
    x = np.array([0.3, 1.7])
    joint = np.array([basis.gaussian_value(x, c, 1.0) for c in g.points])
    np.testing.assert_allclose(basis.product_eval_gaussian(x, g, 1.0), joint, rtol=1e-12)


def test_product_eval_counts_evaluations():
    g = make_grid([0, 0], [99, 99], 1)
    c = Counter()
    basis.product_eval_gaussian([10.0, 20.0], g, 2.0, counter=c)
    assert c["exp"] == 200


@pytest.mark.parametrize("dims", [2, 3])
def test_product_factorization_random(dims):
    rng = np.random.default_rng(dims)
    for _ in range(5):
        lo = rng.uniform(-3, 0, dims)
        g = make_grid(lo, lo + rng.uniform(2, 4, dims), rng.uniform(0.3, 0.9, dims))
        x = rng.uniform(lo - 1, lo + 4)
        ell = rng.uniform(0.3, 2)
        joint = basis.eval_all(x, g, BasisConfig.gaussian(ell))
        np.testing.assert_allclose(basis.product_eval_gaussian(x, g, ell), joint, rtol=1e-12)


# -- kernel ------------------------------------------------------------------


def test_kernel_examples():
    g = make_grid([0], [10], 1)
    cfg = BasisConfig.wendland(2.5, prior_variance=0.7)
    x = [3.3]
    b = basis.eval_all(x, g, cfg)
    assert basis.kernel_value(x, x, g, cfg) == pytest.approx(0.7 * b @ b)
    assert basis.kernel_value([1.0], [4.0], g, cfg) == basis.kernel_value([4.0], [1.0], g, cfg)
    zero = BasisConfig.wendland(2.5, prior_variance=0.0)
    assert basis.kernel_value([1.0], [1.5], g, zero) == 0.0


def test_kernel_gram_psd():
    rng = np.random.default_rng(5)
    g = make_grid([0], [10], 1)
    cfg = BasisConfig.wendland(2.5)
    K = basis.gram_matrix(rng.uniform(0, 10, (10, 1)), g, cfg)
    assert np.linalg.eigvalsh(K).min() >= -1e-10


# -- bound -------------------------------------------------------------------


def test_active_upper_bound_examples():
    assert basis.active_upper_bound(5, 1, 2) == 121
    assert basis.active_upper_bound(0.7, 0.7, 1) == 3
    with pytest.raises(DomainError):
        basis.active_upper_bound(0, 1, 1)
    with pytest.raises(DomainError):
        basis.active_upper_bound(1, -1, 1)


def test_active_upper_bound_monte_carlo():
    rng = np.random.default_rng(6)
    g = make_grid([0, 0], [19, 19], 1)
    cfg = BasisConfig.wendland(2.5)
    counts = [basis.active_fast(rng.uniform(0, 19, 2), g, cfg).count for _ in range(1000)]
    assert max(counts) <= 36
