"""Error metrics, timing statistics and the report written by every experiment."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def compute_rmse(estimates, truth, field=None) -> float:
    """Root mean squared error over all steps and selected components.

    ``field`` picks columns (an index, slice or index list) of 2-D inputs;
    ``None`` uses every column.

    >>> compute_rmse([1.0, 2.0], [0.0, 0.0]) == math.sqrt(5 / 2)
    True
    >>> compute_rmse([[3.0, 9.0]], [[0.0, 0.0]], field=0)
    3.0
    """
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise ValueError(f"estimates {est.shape} and truth {tru.shape} differ in shape")
    if est.size == 0:
        raise ValueError("cannot compute RMSE of an empty sequence")
    if field is not None:
        if est.ndim < 2:
            raise ValueError("field selection needs 2-D inputs")
        est, tru = est[:, field], tru[:, field]
    err = est - tru
    return float(np.sqrt(np.mean(err * err)))


def per_step_rmse(estimates, truth, cols) -> float:
    """RMSE of the Euclidean error of a vector sub-state (e.g. 2-D position)."""
    est = np.asarray(estimates, dtype=float)[:, cols]
    tru = np.asarray(truth, dtype=float)[:, cols]
    return float(np.sqrt(np.mean(np.sum((est - tru) ** 2, axis=1))))


@dataclass(frozen=True)
class TimingStats:
    """Summary of wall-clock samples in seconds."""

    n: int
    mean: float
    std: float
    median: float
    min: float
    max: float

    @classmethod
    def from_samples(cls, samples) -> "TimingStats":
        s = np.asarray(samples, dtype=float)
        if s.size == 0:
            return cls(0, math.nan, math.nan, math.nan, math.nan, math.nan)
        return cls(int(s.size), float(s.mean()), float(s.std(ddof=1)) if s.size > 1 else 0.0,
                   float(np.median(s)), float(s.min()), float(s.max()))

    def to_dict(self) -> dict:
        return self.__dict__.copy()


def _clean(o):
    if isinstance(o, dict):
        return {str(k): _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, TimingStats):
        return o.to_dict()
    if isinstance(o, np.ndarray):
        return _clean(o.tolist())
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, float) and not math.isfinite(o):
        return None
    if isinstance(o, Path):
        return str(o)
    return o


@dataclass
class MetricsReport:
    """Results of one experiment.

    ``table`` holds the summary rows written to ``table.csv``. ``per_run``
    maps a metric name to its value in every Monte Carlo run. ``series``
    holds plot data as ``name -> (header, rows)``, each written to its own
    CSV. Timings are kept apart so reports from equal seeds compare equal
    once :meth:`comparable` drops them.
    """

    experiment: str
    table: list = field(default_factory=list)
    per_run: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    active: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)
    diverged: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def add_run(self, key: str, value: float) -> None:
        self.per_run.setdefault(key, []).append(float(value))

    def mean(self, key: str) -> float:
        vals = [v for v in self.per_run.get(key, []) if math.isfinite(v)]
        return float(np.mean(vals)) if vals else math.nan

    def std(self, key: str) -> float:
        vals = [v for v in self.per_run.get(key, []) if math.isfinite(v)]
        return float(np.std(vals)) if vals else math.nan

    def row(self, **values) -> dict:
        self.table.append(values)
        return values

    def lookup(self, **match) -> dict:
        """The single table row whose fields equal ``match``."""
        rows = [r for r in self.table if all(r.get(k) == v for k, v in match.items())]
        if len(rows) != 1:
            raise KeyError(f"{len(rows)} rows match {match}")
        return rows[0]

    def to_dict(self) -> dict:
        return _clean({"experiment": self.experiment, "table": self.table, "per_run": self.per_run,
                       "timings": self.timings, "active": self.active, "diverged": self.diverged,
                       "notes": self.notes, "config": self.config})

    def comparable(self) -> dict:
        """Everything except wall-clock measurements."""
        d = self.to_dict()
        d.pop("timings")
        d["table"] = [{k: v for k, v in r.items() if not k.startswith("time")} for r in d["table"]]
        return d

    def write(self, outdir) -> Path:
        """Write ``metrics.json``, ``table.csv`` and one CSV per series."""
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        with open(outdir / "metrics.json", "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
        if self.table:
            cols = list(dict.fromkeys(k for r in self.table for k in r))
            write_csv(outdir / "table.csv", cols, [[r.get(c, "") for c in cols] for r in self.table])
        for name, (header, rows) in self.series.items():
            write_csv(outdir / f"{name}.csv", header, rows)
        return outdir


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return v


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
