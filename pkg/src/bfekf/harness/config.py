"""Experiment configuration.

Each experiment ships an INI file under ``bfekf/configs`` holding every
parameter with its default value. A user file only needs the keys it
changes; unknown sections or keys are rejected so that typos do not pass
silently.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from ..errors import ConfigError

EXPERIMENTS = ("example1", "tire", "intersection", "bench-eval", "bench-predict")
METHOD_CHOICES = ("dense", "csrbf", "fast-csrbf", "all")
ALL_METHODS = ("dense", "csrbf", "fast-csrbf")

# keys holding variances or standard deviations; must be non-negative
_NONNEGATIVE = ("q", "r", "weight_noise")
_NONNEGATIVE_SUFFIX = ("_variance", "_std")

_MISSING = object()


def _parser() -> configparser.ConfigParser:
    p = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    p.optionxform = str
    return p


def default_config_text(experiment: str) -> str:
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}; expected one of {EXPERIMENTS}")
    return resources.files("bfekf").joinpath("configs", f"{experiment}.ini").read_text()


def _floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"expected numbers, got {text!r}") from exc


@dataclass
class ExperimentConfig:
    """Parameters of one experiment run.

    ``sections`` maps section name to raw ``key -> text``; typed access goes
    through :meth:`get`, :meth:`floats` and friends. ``methods`` is the
    expanded ``--method`` selection.
    """

    experiment: str
    sections: dict
    seed: int = 0
    runs: int = 1
    out: Path = Path("results")
    methods: tuple = ALL_METHODS
    nw_sweep: tuple = ()
    source: str | None = None

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if int(self.runs) != self.runs or self.runs < 1:
            raise ConfigError(f"run count must be a positive integer, got {self.runs!r}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        for m in self.methods:
            if m not in ALL_METHODS:
                raise ConfigError(f"unknown method {m!r}; expected one of {METHOD_CHOICES}")
        if any(n < 1 for n in self.nw_sweep):
            raise ConfigError("n_w sweep values must be positive")
        self._validate_covariances()

    def _validate_covariances(self):
        for sec, items in self.sections.items():
            for key, text in items.items():
                if key in _NONNEGATIVE or key.endswith(_NONNEGATIVE_SUFFIX):
                    vals = _floats(text)
                    if any(not v >= 0 for v in vals):
                        raise ConfigError(f"[{sec}] {key} must be non-negative (a variance), got {text!r}")

    def has(self, section: str, key: str) -> bool:
        return key in self.sections.get(section, {})

    def _raw(self, section, key, default):
        try:
            return self.sections[section][key]
        except KeyError:
            if default is _MISSING:
                raise ConfigError(f"missing key [{section}] {key}") from None
            return None

    def get(self, section: str, key: str, default=_MISSING) -> float:
        text = self._raw(section, key, default)
        if text is None:
            return default
        vals = _floats(text)
        if len(vals) != 1:
            raise ConfigError(f"[{section}] {key} expects one number, got {text!r}")
        return vals[0]

    def get_int(self, section: str, key: str, default=_MISSING) -> int:
        v = self.get(section, key, default)
        if v != int(v):
            raise ConfigError(f"[{section}] {key} must be an integer, got {v!r}")
        return int(v)

    def get_bool(self, section: str, key: str, default=_MISSING) -> bool:
        text = self._raw(section, key, default)
        if text is None:
            return default
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"[{section}] {key} expects a boolean, got {text!r}")

    def get_str(self, section: str, key: str, default=_MISSING) -> str:
        text = self._raw(section, key, default)
        return default if text is None else text.strip()

    def floats(self, section: str, key: str, default=_MISSING) -> tuple:
        text = self._raw(section, key, default)
        return default if text is None else _floats(text)

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "seed": self.seed, "runs": self.runs,
                "methods": list(self.methods), "nw_sweep": list(self.nw_sweep),
                "source": self.source, "parameters": self.sections}


def parse_methods(text: str | None, default: tuple) -> tuple:
    """Expand a ``--method`` value (possibly comma separated)."""
    if text is None:
        return default
    out = []
    for part in text.split(","):
        part = part.strip()
        if part == "all":
            return ALL_METHODS
        if part not in ALL_METHODS:
            raise ConfigError(f"unknown method {part!r}; expected one of {METHOD_CHOICES}")
        out.append(part)
    return tuple(dict.fromkeys(out))


def parse_sweep(text) -> tuple:
    if text is None or text == "":
        return ()
    if isinstance(text, str):
        parts = [p for p in text.split(",") if p.strip()]
    else:
        parts = list(text)
    try:
        vals = tuple(int(float(p)) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"bad n_w sweep {text!r}") from exc
    return vals


def load_config(experiment: str, path=None, *, seed=None, runs=None, out=None, method=None,
                nw_sweep=None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults for ``experiment``, then ``path``, then explicit arguments.

    ``overrides`` is ``{section: {key: value}}`` and is applied last.
    """
    parser = _parser()
    parser.read_string(default_config_text(experiment))
    known = {s: set(parser[s]) for s in parser.sections()}
    if path is not None:
        user = _parser()
        try:
            with open(path) as fh:
                user.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        for sec in user.sections():
            if sec not in known:
                raise ConfigError(f"unknown section [{sec}] in {path}")
            for key, val in user[sec].items():
                if key not in known[sec]:
                    raise ConfigError(f"unknown key [{sec}] {key} in {path}")
                parser[sec][key] = val
    for sec, items in (overrides or {}).items():
        if sec not in known:
            raise ConfigError(f"unknown section [{sec}]")
        for key, val in items.items():
            if key not in known[sec]:
                raise ConfigError(f"unknown key [{sec}] {key}")
            parser[sec][key] = str(val)

    sections = {s: dict(parser[s]) for s in parser.sections()}
    run = sections.get("run", {})
    try:
        seed_v = int(run.get("seed", "0")) if seed is None else int(seed)
        runs_v = int(run.get("runs", "1")) if runs is None else int(runs)
    except ValueError as exc:
        raise ConfigError(f"seed and runs must be integers: {exc}") from exc
    default_methods = parse_methods(run.get("methods", "all"), ALL_METHODS)
    sweep = parse_sweep(nw_sweep if nw_sweep is not None else sections.get("sweep", {}).get("nw"))
    return ExperimentConfig(
        experiment=experiment, sections=sections, seed=seed_v, runs=runs_v,
        out=Path(out) if out is not None else Path("results"),
        methods=parse_methods(method, default_methods), nw_sweep=sweep,
        source=str(path) if path is not None else None)
