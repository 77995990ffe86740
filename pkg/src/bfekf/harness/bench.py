"""Timing benchmarks: single-point evaluation of ``u_f`` and one-step prediction.

Single-point evaluation costs a few microseconds for the fast CSRBF path, so
interpreter overhead would swamp any numpy version of it. All three
evaluators (dense RBF, CSRBF by distance to every center, CSRBF by index
box) are therefore compiled with numba and compared on equal footing; they
are checked against :mod:`bfekf.basis` in the test suite.

The ``n_w`` sweep enlarges the extent of a 2-D grid at fixed spacing and
support, so the number of active centers stays constant across the sweep.
"""

from __future__ import annotations

import contextlib
import math
import time

import numba
import numpy as np
from threadpoolctl import threadpool_limits

from .. import basis, ekf, ssmodel
from .metrics import MetricsReport, TimingStats

STAGGERED, STACKED = ssmodel.STAGGERED, ssmodel.STACKED


# ---------------------------------------------------------------------------
# compiled evaluators
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _wendland(r):
    s = 1.0 - r
    if s <= 0.0:
        return 0.0
    s2 = s * s
    return s2 * s2 * s2 * ((35.0 * r + 18.0) * r + 3.0) / 3.0


@numba.njit(cache=True)
def _theta_at(theta, k, j, J, n_centers, stacked):
    if stacked:
        return theta[j * n_centers + k]
    return theta[k * J + j]


@numba.njit(cache=True)
def dense_uf(x, points, length_scale, theta, J, stacked):
    """Gaussian expansion summed over every center."""
    n, P = points.shape
    inv = 1.0 / (2.0 * length_scale * length_scale)
    out = np.zeros(J)
    for k in range(n):
        d2 = 0.0
        for p in range(P):
            d = x[p] - points[k, p]
            d2 += d * d
        b = math.exp(-d2 * inv)
        for j in range(J):
            out[j] += b * _theta_at(theta, k, j, J, n, stacked)
    return out


@numba.njit(cache=True)
def exact_uf(x, points, alpha, theta, J, stacked):
    """Wendland expansion; every center's distance is checked."""
    n, P = points.shape
    out = np.zeros(J)
    for k in range(n):
        d2 = 0.0
        for p in range(P):
            d = x[p] - points[k, p]
            d2 += d * d
        r = math.sqrt(d2) / alpha
        if r < 1.0:
            b = _wendland(r)
            for j in range(J):
                out[j] += b * _theta_at(theta, k, j, J, n, stacked)
    return out


@numba.njit(cache=True)
def fast_uf(x, centers, counts, strides, alpha, theta, J, stacked):
    """Wendland expansion over the per-dimension index box.

    ``centers`` is ``(P, max count)``, padded; row ``p`` holds the
    coordinates along dimension ``p``.
    """
    P = x.size
    n = 1
    for p in range(P):
        n *= counts[p]
    lo = np.empty(P, np.int64)
    hi = np.empty(P, np.int64)
    out = np.zeros(J)
    for p in range(P):
        m = counts[p]
        if m == 1:
            a, b = 0, 0
        else:
            step = centers[p, 1] - centers[p, 0]
            t = (x[p] - centers[p, 0]) / step
            reach = alpha / step
            a = max(0, int(math.ceil(t - reach)) - 1)
            b = min(m - 1, int(math.floor(t + reach)) + 1)
        while a <= b and not abs(x[p] - centers[p, a]) < alpha:
            a += 1
        while b >= a and not abs(x[p] - centers[p, b]) < alpha:
            b -= 1
        if a > b:
            return out
        lo[p] = a
        hi[p] = b
    idx = lo.copy()
    while True:
        d2 = 0.0
        k = 0
        for p in range(P):
            d = x[p] - centers[p, idx[p]]
            d2 += d * d
            k += idx[p] * strides[p]
        r = math.sqrt(d2) / alpha
        if r < 1.0:
            w = _wendland(r)
            for j in range(J):
                out[j] += w * _theta_at(theta, k, j, J, n, stacked)
        p = P - 1
        while p >= 0:
            idx[p] += 1
            if idx[p] <= hi[p]:
                break
            idx[p] = lo[p]
            p -= 1
        if p < 0:
            break
    return out


class PointEvaluator:
    """Compiled ``u_f`` evaluation on one grid with one weight vector."""

    def __init__(self, grid: basis.CartesianGrid, config: basis.BasisConfig, theta,
                 output_dim: int, ordering: str = STAGGERED):
        self.grid, self.config, self.J = grid, config, int(output_dim)
        self.theta = np.ascontiguousarray(theta, dtype=float)
        if self.theta.size != grid.size * self.J:
            raise ValueError("weight vector does not match grid size times output dimension")
        if ordering not in ssmodel.ORDERINGS:
            raise ValueError(f"unknown weight ordering {ordering!r}")
        self.stacked = ordering == STACKED
        self.points = np.ascontiguousarray(grid.points)
        width = max(c.size for c in grid.centers)
        self.centers = np.zeros((grid.dims, width))
        for p, c in enumerate(grid.centers):
            self.centers[p, :c.size] = c
        self.counts = np.asarray(grid.counts, dtype=np.int64)
        self.strides = np.asarray(grid.strides, dtype=np.int64)

    def dense(self, x):
        if self.config.compact:
            raise basis.UnsupportedFamilyError("dense evaluator uses the Gaussian family")
        return dense_uf(x, self.points, self.config.scale, self.theta, self.J, self.stacked)

    def exact(self, x):
        return exact_uf(x, self.points, self.config.scale, self.theta, self.J, self.stacked)

    def fast(self, x):
        if not self.grid.regular:
            raise ValueError("fast selection needs an equally spaced grid")
        return fast_uf(x, self.centers, self.counts, self.strides, self.config.scale, self.theta,
                       self.J, self.stacked)


# ---------------------------------------------------------------------------
# timing helpers
# ---------------------------------------------------------------------------


@contextlib.contextmanager
def single_threaded():
    """Pin BLAS and OpenMP pools to one thread for the duration. The
    compiled kernels are serial."""
    with threadpool_limits(limits=1):
        yield


def time_call(fn, args_list, repeats: int, warmup: int) -> TimingStats:
    """Per-call wall time over ``repeats`` passes through ``args_list``.

    Every call is its own sample, so a scheduler stall spoils one sample
    rather than a whole pass; warm-up passes are discarded.
    """
    for _ in range(warmup):
        for a in args_list:
            fn(a)
    samples = []
    clock = time.perf_counter
    for _ in range(repeats):
        for a in args_list:
            t0 = clock()
            fn(a)
            samples.append(clock() - t0)
    return TimingStats.from_samples(samples)


def sweep_grid(n_w: int, output_dim: int, spacing: float) -> basis.CartesianGrid:
    """Square 2-D grid with about ``n_w / output_dim`` centers."""
    side = max(2, int(round(math.sqrt(n_w / output_dim))))
    return basis.make_grid([0.0, 0.0], [spacing * (side - 1)] * 2, spacing)


def _query_points(grid, n, margin, rng):
    lo = np.array([c[0] for c in grid.centers]) + margin
    hi = np.array([c[-1] for c in grid.centers]) - margin
    return [np.ascontiguousarray(rng.uniform(lo, hi)) for _ in range(n)]


def _bench_params(cfg):
    return dict(repeats=max(20, cfg.get_int("timing", "repeats")),
                warmup=cfg.get_int("timing", "warmup"))


# ---------------------------------------------------------------------------
# benchmarks
# ---------------------------------------------------------------------------


def bench_eval(cfg) -> MetricsReport:
    """Single-point ``u_f`` evaluation time over the ``n_w`` sweep."""
    report = MetricsReport("bench-eval", config=cfg.to_dict())
    J = cfg.get_int("grid", "output_dim")
    spacing = cfg.get("grid", "spacing")
    alpha = cfg.get("basis", "support")
    ell = cfg.get("basis", "length_scale")
    npts = cfg.get_int("timing", "points")
    tp = _bench_params(cfg)
    sweep = cfg.nw_sweep or tuple(int(v) for v in cfg.floats("sweep", "nw"))
    rng = np.random.default_rng(cfg.seed)
    methods = {"dense": "dense", "csrbf": "exact", "fast-csrbf": "fast"}
    rows = []
    with single_threaded():
        for n_w in sweep:
            grid = sweep_grid(n_w, J, spacing)
            theta = rng.standard_normal(grid.size * J)
            pts = _query_points(grid, npts, alpha, rng)
            ev_w = PointEvaluator(grid, basis.BasisConfig.wendland(alpha), theta, J)
            ev_g = PointEvaluator(grid, basis.BasisConfig.gaussian(ell), theta, J)
            for name in cfg.methods:
                ev = ev_g if name == "dense" else ev_w
                st = time_call(getattr(ev, methods[name]), pts, **tp)
                key = f"{name}@{grid.size * J}"
                report.timings[key] = st
                rows.append([grid.size * J, name, st.median, st.mean, st.std, st.n])
                report.row(n_w=grid.size * J, method=name, time_median_s=st.median,
                           time_mean_s=st.mean, time_std_s=st.std, reps=st.n)
            counts = [basis.active_fast(p, grid, ev_w.config).count for p in pts]
            report.active[str(grid.size * J)] = {"mean": float(np.mean(counts)), "max": int(max(counts)),
                                                 "bound": basis.active_upper_bound(alpha, spacing, 2)}

        # stacked versus staggered layout of the same weights, fast path
        n_w = int(cfg.get("ordering", "nw"))
        grid = sweep_grid(n_w, J, spacing)
        theta = rng.standard_normal(grid.size * J)
        pts = _query_points(grid, npts, alpha, rng)
        cfg_w = basis.BasisConfig.wendland(alpha)
        stag = PointEvaluator(grid, cfg_w, theta, J, STAGGERED)
        stack = PointEvaluator(grid, cfg_w, ssmodel.reorder(theta, grid.size, J, STAGGERED, STACKED), J,
                               STACKED)
        t_stag = time_call(stag.fast, pts, **tp)
        t_stack = time_call(stack.fast, pts, **tp)
    report.timings["ordering_staggered"] = t_stag
    report.timings["ordering_stacked"] = t_stack
    ratio = t_stack.median / t_stag.median
    report.per_run["ordering_ratio"] = [ratio]
    report.notes.append(f"stacked / staggered fast evaluation time at n_w={grid.size * J}: {ratio:.3f}")
    report.series["eval_times"] = (["n_w", "method", "median_s", "mean_s", "std_s", "reps"], rows)
    report.series["ordering"] = (["ordering", "median_s", "mean_s", "std_s", "reps"],
                                 [["staggered", t_stag.median, t_stag.mean, t_stag.std, t_stag.n],
                                  ["stacked", t_stack.median, t_stack.mean, t_stack.std, t_stack.n]])
    return report


def _warm_state(model, method, steps, speed, start, rng):
    """Filter a short straight trajectory so the state has a realistic support."""
    x = np.array([start[0], start[1], speed, speed * 0.5])
    st = ekf.initial_state(model, x, 0.1)
    F = model.F
    for _ in range(steps):
        y = x[:2] + 0.1 * rng.standard_normal(2)
        ekf.measurement_update(st, model, y, method=method)
        ekf.time_update(st, model, method=method)
        x = F @ x
    return st


def bench_predict(cfg) -> MetricsReport:
    """One-step prediction (time update) over the ``n_w`` sweep."""
    report = MetricsReport("bench-predict", config=cfg.to_dict())
    J = 2
    spacing = cfg.get("grid", "spacing")
    alpha = cfg.get("basis", "support")
    ell = cfg.get("basis", "length_scale")
    Ts = cfg.get("model", "Ts")
    q, r = cfg.get("model", "q"), cfg.get("model", "r")
    pw = cfg.get("model", "weight_variance")
    cap = cfg.get("guard", "max_dense_bytes")
    warm = cfg.get_int("timing", "warm_steps")
    tp = _bench_params(cfg)
    sweep = cfg.nw_sweep or tuple(int(v) for v in cfg.floats("sweep", "nw"))
    methods = {"dense": "dense", "csrbf": "exact", "fast-csrbf": "fast"}
    rows = []
    with single_threaded():
        for n_w in sweep:
            grid = sweep_grid(n_w, J, spacing)
            nw_actual = grid.size * J
            mem = ekf.memory_estimate(grid.size, J)
            start = (grid.centers[0][grid.counts[0] // 2], grid.centers[1][grid.counts[1] // 2])
            for name in cfg.methods:
                if name == "dense" and mem.total_bytes > cap:
                    report.row(n_w=nw_actual, method=name, status="skipped: memory guard",
                               memory_bytes=mem.total_bytes)
                    rows.append([nw_actual, name, math.nan, math.nan, math.nan, 0, mem.total_bytes,
                                 "skipped: memory guard"])
                    report.notes.append(f"dense prediction skipped at n_w={nw_actual}: estimated "
                                        f"{mem.total_bytes / 1e9:.2f} GB exceeds the {cap / 1e9:.2f} GB guard")
                    continue
                bcfg = basis.BasisConfig.gaussian(ell, pw) if name == "dense" else basis.BasisConfig.wendland(alpha, pw)
                model = ssmodel.build_cv_model(Ts, q, r, grid, bcfg)
                rng = np.random.default_rng(cfg.seed)
                state = _warm_state(model, methods[name], warm, 1.0, start, rng)
                reps = tp["repeats"] if name != "dense" else max(20, min(tp["repeats"], 25))
                x0 = state.x.copy()

                def step(_, state=state, model=model, sel=methods[name], x0=x0):
                    # predict from the same mean every time so the active set stays put
                    state.x[:] = x0
                    ekf.time_update(state, model, method=sel)

                st = time_call(step, [None], repeats=reps, warmup=tp["warmup"])
                report.timings[f"{name}@{nw_actual}"] = st
                report.row(n_w=nw_actual, method=name, status="ok", memory_bytes=mem.total_bytes,
                           time_median_s=st.median, time_mean_s=st.mean, time_std_s=st.std, reps=st.n,
                           support=int(state.support.size))
                rows.append([nw_actual, name, st.median, st.mean, st.std, st.n, mem.total_bytes, "ok"])
                del state
    report.series["predict_times"] = (["n_w", "method", "median_s", "mean_s", "std_s", "reps",
                                       "memory_bytes", "status"], rows)
    return report
