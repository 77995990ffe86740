"""Monte Carlo experiment runners.

Each runner takes an :class:`ExperimentConfig` and returns a
:class:`MetricsReport`. Runs draw their seeds from
``SeedSequence(config.seed)`` so a report is a pure function of the config
apart from wall-clock timings.
"""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .. import basis, ekf, sim, ssmodel
from ..errors import NumericalError
from .config import ExperimentConfig
from .metrics import MetricsReport, TimingStats, compute_rmse, per_step_rmse

log = logging.getLogger(__name__)

# --method name -> active-set selection used by the filter
SELECTION = {"dense": "dense", "csrbf": "exact", "fast-csrbf": "fast"}


def run_seeds(seed: int, n: int, stream: int = 0) -> list:
    """``n`` independent integer seeds; ``stream`` separates experiment parts."""
    ss = np.random.SeedSequence([seed, stream])
    return [int(s.generate_state(1, dtype=np.uint64)[0]) for s in ss.spawn(n)]


def worker_count() -> int:
    """Monte Carlo parallelism, capped by ``BFEKF_THREADS`` (default 1)."""
    try:
        n = int(os.environ.get("BFEKF_THREADS", "1"))
    except ValueError:
        n = 1
    return max(1, n)


def _map(fn, items):
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _finite(state) -> bool:
    return bool(np.all(np.isfinite(state.x)) and np.all(np.isfinite(state.Pxx)))


def filter_trajectory(state, model, traj: sim.Trajectory, method: str, timings: dict | None = None):
    """Measurement update then time update at every step; returns the
    filtered states (one row per step) or ``None`` on divergence."""
    est = np.empty((len(traj), model.state_dim))
    inputs = traj.inputs
    has_u = inputs.shape[1] > 0
    for k, y in enumerate(traj.observations):
        u = inputs[k] if has_u else None
        try:
            t0 = time.perf_counter()
            ekf.measurement_update(state, model, y, u, method=method)
            t1 = time.perf_counter()
            est[k] = state.x
            ekf.time_update(state, model, u, method=method)
            t2 = time.perf_counter()
        except NumericalError as exc:
            log.warning("numerical failure at step %d: %s", k, exc)
            return None
        if not _finite(state):
            return None
        if timings is not None:
            timings.setdefault("measurement_update", []).append(t1 - t0)
            timings.setdefault("time_update", []).append(t2 - t1)
    return est


# ---------------------------------------------------------------------------
# one-dimensional example
# ---------------------------------------------------------------------------


def _example1_run(args):
    cfg, scenario, seed = args
    steps = cfg.get_int("run", "steps")
    q, r = cfg.get("noise", "q"), cfg.get("noise", "r")
    gen = sim.simulate_scenario1 if scenario == 1 else sim.simulate_scenario2
    traj = gen(steps=steps, q=q, r=r, seed=seed, x0=cfg.floats("prior", "x0"))
    # grid covering this run's trajectory plus a margin
    margin, spacing = cfg.get("basis", "margin"), cfg.get("basis", "spacing")
    lo = np.floor(traj.states.min(axis=0) / spacing) * spacing - margin
    hi = np.ceil(traj.states.max(axis=0) / spacing) * spacing + margin
    grid_b = basis.make_grid([lo[0]], [hi[0]], spacing)
    grid_c = basis.make_grid(lo, hi, spacing)
    bcfg = basis.BasisConfig.wendland(cfg.get("basis", "support"), cfg.get("prior", "weight_variance"))
    models = dict(zip("abc", ssmodel.build_1d_models(grid_b, grid_c, bcfg, q=q, r=r)))
    out = {}
    for name in cfg.get_str("run", "models").replace(",", " ").split():
        model = models[name]
        for meth in cfg.methods:
            sel = SELECTION[meth]
            state = ekf.initial_state(model, traj.states[0], cfg.get("prior", "state_variance"))
            t0 = time.perf_counter()
            est = filter_trajectory(state, model, traj, sel)
            dt = time.perf_counter() - t0
            rmse = math.nan if est is None else compute_rmse(est[:, 0], traj.states[:, 0])
            out[(name, meth)] = (rmse, dt)
    return scenario, out


def run_example1(cfg: ExperimentConfig) -> MetricsReport:
    """Models (a), (b), (c) on both 1-D scenarios; mean positional RMSE."""
    report = MetricsReport("example1", config=cfg.to_dict())
    jobs = [(cfg, sc, s) for sc in (1, 2) for s in run_seeds(cfg.seed, cfg.runs, stream=sc)]
    times: dict = {}
    for scenario, out in _map(_example1_run, jobs):
        for (name, meth), (rmse, dt) in out.items():
            key = f"scenario{scenario}/{name}/{meth}"
            if math.isfinite(rmse):
                report.add_run(key, rmse)
            else:
                report.diverged[key] = report.diverged.get(key, 0) + 1
            times.setdefault(key, []).append(dt)
    for key in sorted(set(report.per_run) | set(report.diverged)):
        sc, name, meth = key.split("/")
        n_div = report.diverged.get(key, 0)
        if n_div:
            report.notes.append(f"{key}: {n_div} diverged runs excluded")
        report.timings[key] = TimingStats.from_samples(times[key])
        report.row(scenario=int(sc[-1]), model=name, method=meth, rmse_mean=report.mean(key),
                   rmse_std=report.std(key), runs=len(report.per_run.get(key, [])), diverged=n_div,
                   time_per_run_s=report.timings[key].mean)
    return report


# ---------------------------------------------------------------------------
# tire friction
# ---------------------------------------------------------------------------


def _tire_setup(cfg):
    veh = ssmodel.VehicleParams(**{k: cfg.get("vehicle", k) for k in ("l_r", "l_f", "mass", "g0", "wheel_radius")})
    pac = sim.PacejkaParams(**{k: cfg.get("pacejka", k) for k in "BCDE"})
    prof = sim.DriveProfile(peak_slip=cfg.floats("drive", "peak_slip"), ramp=cfg.get("drive", "ramp"),
                            cruise_slip=cfg.get("drive", "cruise_slip"), fade_from=cfg.get("drive", "fade_from"),
                            target_speed=cfg.floats("drive", "target_speed"), coast=cfg.get("drive", "coast"))
    grid = basis.make_grid([cfg.get("model", "slip_lower")], [cfg.get("model", "slip_upper")],
                           cfg.get("model", "spacing"))
    return veh, pac, prof, grid


def tire_model(cfg, method: str, veh, grid):
    """Filter model for ``method``: Gaussian RBF for ``dense``, Wendland otherwise."""
    sec = "rbf" if method == "dense" else "csrbf"
    if method == "dense":
        bcfg = basis.BasisConfig.gaussian(cfg.get(sec, "length_scale"), cfg.get(sec, "weight_variance"))
    else:
        bcfg = basis.BasisConfig.wendland(cfg.get(sec, "support"), cfg.get(sec, "weight_variance"))
    R = np.diag([cfg.get("model", "r_accel"), cfg.get("model", "r_speed")])
    return ssmodel.build_tire_model(veh, grid, bcfg, q=cfg.get(sec, "q"), R=R,
                                    weight_noise=cfg.get(sec, "weight_noise"), Ts=cfg.get("model", "Ts"),
                                    slip_floor=cfg.get("model", "slip_floor"),
                                    exact_weight_observation=cfg.get_bool("model", "exact_weight_observation"))


def learned_curve(state, model, slips, method: str) -> tuple:
    """Posterior mean and standard deviation of the friction coefficient."""
    sel = SELECTION[method]
    mean = np.empty(len(slips))
    std = np.empty(len(slips))
    for i, s in enumerate(slips):
        m, c = ekf.query_function(state, model, [s], method=sel)
        mean[i], std[i] = m[0], math.sqrt(max(c[0, 0], 0.0))
    return mean, std


def function_rmse(state, model, slips, method: str, pacejka: sim.PacejkaParams) -> float:
    """RMSE of the learned ``G mu(s)`` against the truth at the given slips."""
    G = model.vehicle.gain
    est, _ = learned_curve(state, model, slips, method)
    return compute_rmse(G * est, G * sim.pacejka_mu(slips, pacejka))


def _tire_run(args):
    cfg, seed = args
    veh, pac, prof, grid = _tire_setup(cfg)
    trajs = sim.simulate_tire_runs(cfg.get_int("run", "accelerations"), seed=seed, vehicle=veh, pacejka=pac,
                                   profile=prof, Ts=cfg.get("model", "Ts"),
                                   slip_floor=cfg.get("model", "slip_floor"),
                                   accel_std=cfg.get("sensor", "accel_std"),
                                   speed_std=cfg.get("sensor", "speed_std"),
                                   omega_std=cfg.get("sensor", "omega_std"))
    slips = np.concatenate([t.meta["slip"] for t in trajs])
    sweep = np.linspace(cfg.get("model", "slip_lower"), cfg.get("model", "slip_upper"),
                        cfg.get_int("output", "sweep_points"))
    pv = cfg.get("model", "state_variance")
    out = {"slips": slips}
    for meth in cfg.methods:
        model = tire_model(cfg, meth, veh, grid)
        state = ekf.initial_state(model, [0.0], pv)
        ok = True
        timings: dict = {}
        for tr in trajs:
            state.reset_state([0.0], [[pv]])
            if filter_trajectory(state, model, tr, SELECTION[meth], timings) is None:
                ok = False
                break
        if not ok:
            out[meth] = None
            continue
        curve, _ = learned_curve(state, model, sweep, meth)
        out[meth] = {"rmse": function_rmse(state, model, slips, meth, pac), "curve": curve,
                     "timings": timings}
    return out


def run_tire(cfg: ExperimentConfig) -> MetricsReport:
    """Learn the friction curve from ``accelerations`` runs, repeated
    ``runs`` times; function RMSE at the visited slips."""
    report = MetricsReport("tire", config=cfg.to_dict())
    _, pac, _, _ = _tire_setup(cfg)
    G = ssmodel.VehicleParams(**{k: cfg.get("vehicle", k) for k in ("l_r", "l_f", "mass", "g0", "wheel_radius")}).gain
    sweep = np.linspace(cfg.get("model", "slip_lower"), cfg.get("model", "slip_upper"),
                        cfg.get_int("output", "sweep_points"))
    results = _map(_tire_run, [(cfg, s) for s in run_seeds(cfg.seed, cfg.runs)])
    curves = {m: [] for m in cfg.methods}
    updates = {m: {} for m in cfg.methods}
    all_slips = []
    for res in results:
        all_slips.append(res["slips"])
        for meth in cfg.methods:
            r = res[meth]
            if r is None:
                report.diverged[meth] = report.diverged.get(meth, 0) + 1
                continue
            report.add_run(meth, r["rmse"])
            curves[meth].append(r["curve"])
            for k, v in r["timings"].items():
                updates[meth].setdefault(k, []).extend(v)
    zero = compute_rmse(np.zeros_like(sweep), G * sim.pacejka_mu(sweep, pac))
    for meth in cfg.methods:
        for k, v in updates[meth].items():
            report.timings[f"{k}/{meth}"] = TimingStats.from_samples(v)
        report.row(method=meth, rmse_mean=report.mean(meth), rmse_std=report.std(meth),
                   runs=len(report.per_run.get(meth, [])), diverged=report.diverged.get(meth, 0))
    report.notes.append(f"RMSE of the zero function over the slip sweep: {zero:.4f}")

    # learned curve: mean and 3 sigma band over the Monte Carlo realizations
    header, cols = ["slip", "truth"], [sweep, G * sim.pacejka_mu(sweep, pac)]
    for meth in cfg.methods:
        if not curves[meth]:
            continue
        C = G * np.array(curves[meth])
        mu, sd = C.mean(axis=0), C.std(axis=0)
        header += [f"{meth}_mean", f"{meth}_lower", f"{meth}_upper"]
        cols += [mu, mu - 3 * sd, mu + 3 * sd]
    report.series["friction_curve"] = (header, np.column_stack(cols).tolist())
    slips = np.concatenate(all_slips)
    counts, edges = np.histogram(slips, bins=sweep)
    report.series["slip_histogram"] = (["slip_lower", "slip_upper", "count"],
                                       [[a, b, int(c)] for a, b, c in zip(edges[:-1], edges[1:], counts)])
    report.active["slip_range"] = [float(slips.min()), float(slips.max())]
    return report


# ---------------------------------------------------------------------------
# three-way intersection
# ---------------------------------------------------------------------------


def intersection_grid(cfg) -> basis.CartesianGrid:
    g = sim.IntersectionGeometry(cfg.get("geometry", "approach"), cfg.get("geometry", "radius"),
                                 cfg.get("geometry", "exit_x"))
    m, d = cfg.get("model", "margin"), cfg.get("model", "spacing")
    top = g.approach + g.radius
    lo = [-g.exit_x - m, -m]
    hi = [g.exit_x + m, top + m]
    lo = [math.floor(v / d) * d for v in lo]
    hi = [math.ceil(v / d) * d for v in hi]
    return basis.make_grid(lo, hi, d)


def intersection_model(cfg, method: str | None, grid):
    Ts, q, r = cfg.get("model", "Ts"), cfg.get("model", "q"), cfg.get("model", "r")
    if method is None:
        return ssmodel.build_cv_model(Ts, q, r, grid, None, with_expansion=False)
    pw = cfg.get("model", "weight_variance")
    if method == "dense":
        bcfg = basis.BasisConfig.gaussian(cfg.get("rbf", "length_scale"), pw)
    else:
        bcfg = basis.BasisConfig.wendland(cfg.get("csrbf", "support"), pw)
    return ssmodel.build_cv_model(Ts, q, r, grid, bcfg, weight_noise=cfg.get("model", "weight_noise"))


def _intersection_run(args):
    cfg, seed, methods = args
    geo = sim.IntersectionGeometry(cfg.get("geometry", "approach"), cfg.get("geometry", "radius"),
                                   cfg.get("geometry", "exit_x"))
    trajs = sim.simulate_intersection(cfg.get_int("run", "vehicles"), seed=seed, geometry=geo,
                                      speed=cfg.get("traffic", "speed"), speed_dev=cfg.get("traffic", "speed_dev"),
                                      Ts=cfg.get("model", "Ts"), r=cfg.get("traffic", "r"))
    grid = intersection_grid(cfg)
    pv = cfg.get("model", "state_variance")
    labels = [t.meta["label"] for t in trajs]
    out = {"labels": labels}
    for meth in methods:
        model = intersection_model(cfg, None if meth == "cv" else meth, grid)
        sel = "dense" if meth == "cv" else SELECTION[meth]
        state = ekf.initial_state(model, trajs[0].states[0], pv)
        pos, vel, timings, active = [], [], {}, []
        for tr in trajs:
            state.reset_state(tr.states[0], pv * np.eye(4))
            est = filter_trajectory(state, model, tr, sel, timings)
            if est is None:
                pos.append(math.nan)
                vel.append(math.nan)
                continue
            pos.append(per_step_rmse(est, tr.states, [0, 1]))
            vel.append(per_step_rmse(est, tr.states, [2, 3]))
        out[meth] = {"pos": pos, "vel": vel, "timings": timings,
                     "support": int(state.support.size) if model.has_expansion else 0}
    return out


def _bins(n: int, width: int) -> list:
    return [(a, min(a + width, n)) for a in range(0, n, width)]


def run_intersection(cfg: ExperimentConfig) -> MetricsReport:
    """Per-path position and velocity RMSE against the number of vehicles
    processed, for the sparse CSRBF, dense RBF and plain CV filters, and
    per-step update timings."""
    report = MetricsReport("intersection", config=cfg.to_dict())
    grid = intersection_grid(cfg)
    cap = cfg.get("guard", "max_dense_bytes")
    mem = ekf.memory_estimate(grid.size, 2)
    methods = list(cfg.methods)
    if "dense" in methods and mem.total_bytes > cap:
        methods.remove("dense")
        report.notes.append(f"dense RBF skipped: estimated {mem.total_bytes / 1e9:.2f} GB for "
                            f"n_w={grid.size * 2} exceeds the {cap / 1e9:.2f} GB guard")
    if cfg.get_bool("run", "cv_baseline"):
        methods.append("cv")
    report.active["n_w"] = grid.size * 2
    report.active["memory_estimate_bytes"] = mem.total_bytes
    report.active["active_bound"] = basis.active_upper_bound(cfg.get("csrbf", "support"),
                                                             cfg.get("model", "spacing"), 2)

    results = _map(_intersection_run, [(cfg, s, methods) for s in run_seeds(cfg.seed, cfg.runs)])
    n = cfg.get_int("run", "vehicles")
    width = cfg.get_int("report", "bin")
    rows = []
    for meth in methods:
        tt, mt = [], []
        for ri, res in enumerate(results):
            r = res[meth]
            tt += r["timings"].get("time_update", [])
            mt += r["timings"].get("measurement_update", [])
            for q in ("pos", "vel"):
                vals = np.asarray(r[q])
                report.add_run(f"{meth}/{q}", float(np.nanmean(vals)))
                report.diverged[meth] = report.diverged.get(meth, 0) + int(np.isnan(vals).sum())
        report.timings[f"time_update/{meth}"] = TimingStats.from_samples(tt)
        report.timings[f"measurement_update/{meth}"] = TimingStats.from_samples(mt)
        for path in ("left", "right", "all"):
            for b, (a, e) in enumerate(_bins(n, width)):
                vals = {"pos": [], "vel": []}
                for res in results:
                    for k in range(a, e):
                        if path != "all" and res["labels"][k] != path:
                            continue
                        for q in vals:
                            v = res[meth][q][k]
                            if math.isfinite(v):
                                vals[q].append(v)
                pm = float(np.mean(vals["pos"])) if vals["pos"] else math.nan
                vm = float(np.mean(vals["vel"])) if vals["vel"] else math.nan
                rows.append([meth, path, b, e, pm, vm, len(vals["pos"])])
                report.row(method=meth, path=path, bin=b, vehicles=e, pos_rmse=pm, vel_rmse=vm,
                           samples=len(vals["pos"]))
    report.series["rmse_vs_vehicles"] = (["method", "path", "bin", "vehicles", "pos_rmse", "vel_rmse",
                                          "samples"], rows)
    # relative gap of the sparse filter to the dense one, per bin
    sparse = next((m for m in ("fast-csrbf", "csrbf") if m in methods), None)
    if sparse and "dense" in methods:
        gap_rows = []
        for path in ("left", "right", "all"):
            for b, (_, e) in enumerate(_bins(n, width)):
                s = report.lookup(method=sparse, path=path, bin=b)
                d = report.lookup(method="dense", path=path, bin=b)
                gp = (s["pos_rmse"] - d["pos_rmse"]) / d["pos_rmse"]
                gv = (s["vel_rmse"] - d["vel_rmse"]) / d["vel_rmse"]
                gap_rows.append([path, b, e, gp, gv])
        report.series["rmse_gap"] = (["path", "bin", "vehicles", "pos_gap", "vel_gap"], gap_rows)
        report.active["gap"] = {f"{p}/{b}": {"pos": gp, "vel": gv} for p, b, _, gp, gv in gap_rows}
        for kind in ("time_update", "measurement_update"):
            ratio = report.timings[f"{kind}/dense"].mean / report.timings[f"{kind}/{sparse}"].mean
            report.per_run[f"speedup/{kind}"] = [ratio]
            report.notes.append(f"{kind}: dense / {sparse} mean time ratio {ratio:.1f}")
    return report


def gap_summary(report: MetricsReport, path: str = "all") -> dict:
    """First and last bin relative gap (sparse minus dense, over dense)."""
    rows = [r for r in report.series["rmse_gap"][1] if r[0] == path]
    rows.sort(key=lambda r: r[1])
    return {"pos_first": rows[0][3], "pos_last": rows[-1][3],
            "vel_first": rows[0][4], "vel_last": rows[-1][4]}


EXPERIMENT_RUNNERS = {
    "example1": run_example1,
    "tire": run_tire,
    "intersection": run_intersection,
}
