"""Experiment configuration: INI-style ``key = value`` sections, one level deep.

Sections: ``[experiment]`` (model, eps, eps_list, dt_rule, T, N, R, seed,
dictionary_seed, dictionary_size, output_dir, averaging, averaged_model),
``[grid]`` (lower, upper, points, escape_margin), ``[solver]`` (cell-problem
budget), ``[filter]`` (resampling) and ``[model]`` (constructor overrides).
Lists are comma separated.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields
from typing import Optional

from .averaged_model import TensorGrid
from .cell_problem import AveragingParams, PoissonParams, StationaryParams
from .errors import ConfigError
from .filters import ResamplePolicy
from .registry import REGISTRY, get_entry

_SECTIONS = {
    "experiment": {"model", "eps", "eps_list", "dt_rule", "T", "N", "R", "seed",
                   "dictionary_seed", "dictionary_size", "output_dir", "averaging",
                   "averaged_model"},
    "grid": {"lower", "upper", "points", "escape_margin"},
    "solver": {"t_max", "poisson_dt", "poisson_paths", "stationary_dt", "burn_in", "n_samples",
               "acf_window", "ess_floor", "delta_x", "inner_paths",
               "mixing_multiple"},
    "filter": {"resample", "resample_threshold", "collapse_patience", "dump_ensembles"},
}


@dataclass
class ExperimentConfig:
    model: str = "ou-linear"
    model_params: dict = field(default_factory=dict)
    eps: float = 0.25
    eps_list: tuple = (0.5, 0.35, 0.25, 0.18, 0.125)
    dt_rule: float = 0.1
    T: float = 1.0
    N: int = 2000
    R: int = 50
    seed: int = 0
    dictionary_seed: int = 0
    dictionary_size: int = 64
    output_dir: str = "out"
    averaging: str = "monte-carlo"
    averaged_model: Optional[str] = None
    grid_lower: tuple = (-3.0,)
    grid_upper: tuple = (3.0,)
    grid_points: tuple = (13,)
    escape_margin: Optional[float] = None
    t_max: Optional[float] = None
    poisson_dt: float = 0.01
    poisson_paths: int = 10000
    stationary_dt: float = 0.01
    burn_in: float = 10.0
    n_samples: int = 4000
    acf_window: float = 10.0
    ess_floor: float = 100.0
    delta_x: Optional[float] = None
    inner_paths: int = 4
    mixing_multiple: float = 20.0
    resample: str = "systematic"
    resample_threshold: float = 0.5
    collapse_patience: int = 10
    dump_ensembles: bool = False
    source_sha256: str = ""

    def validate(self) -> "ExperimentConfig":
        if self.model not in REGISTRY:
            raise ConfigError(f"unknown model {self.model!r}")
        eps = list(self.eps_list)
        if not eps or any(not 0 < e <= 1 for e in eps):
            raise ConfigError("eps_list entries must lie in (0, 1]")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ConfigError("eps_list must be strictly decreasing")
        if not 0 < self.eps <= 1:
            raise ConfigError("eps must lie in (0, 1]")
        if not self.T > 0:
            raise ConfigError("T must be positive")
        if self.N < 1 or self.R < 1:
            raise ConfigError("N and R must be at least 1")
        if not self.dt_rule > 0:
            raise ConfigError("dt_rule must be positive")
        if self.dictionary_size < 32:
            raise ConfigError("dictionary_size must be at least 32")
        if self.averaging not in ("monte-carlo", "analytic"):
            raise ConfigError("averaging must be 'monte-carlo' or 'analytic'")
        if self.averaging == "analytic" and get_entry(self.model).analytic_average is None:
            raise ConfigError(f"model {self.model!r} has no closed-form averaged model")
        if not len(self.grid_lower) == len(self.grid_upper) == len(self.grid_points):
            raise ConfigError("grid lower/upper/points must have equal length")
        if any(p < 2 for p in self.grid_points) or any(
                hi <= lo for lo, hi in zip(self.grid_lower, self.grid_upper)):
            raise ConfigError("grid needs upper > lower and at least 2 points per axis")
        if self.resample not in ("systematic", "never"):
            raise ConfigError("resample must be 'systematic' or 'never'")
        return self

    def dt_for(self, eps: float) -> float:
        return self.dt_rule * eps * eps

    def build_model(self):
        try:
            return get_entry(self.model).build(**self.model_params)
        except TypeError as exc:
            raise ConfigError(f"bad [model] parameters: {exc}") from None

    def grid(self) -> TensorGrid:
        return TensorGrid.uniform(self.grid_lower, self.grid_upper, self.grid_points)

    def averaging_params(self) -> AveragingParams:
        stat = StationaryParams(dt=self.stationary_dt, burn_in=self.burn_in,
                                n_samples=self.n_samples, acf_window=self.acf_window,
                                ess_floor=self.ess_floor)
        pois = PoissonParams(t_max=self.t_max, dt=self.poisson_dt, n_paths=self.poisson_paths,
                             delta_x=self.delta_x, mixing_multiple=self.mixing_multiple,
                             stationary=stat)
        return AveragingParams(stationary=stat, poisson=pois, inner_paths=self.inner_paths)

    def resample_policy(self) -> ResamplePolicy:
        return ResamplePolicy(threshold=self.resample_threshold, method=self.resample,
                              collapse_patience=self.collapse_patience)

    def provenance(self) -> list:
        return [f"config_sha256={self.source_sha256}", f"seed={self.seed}"]

    def echo(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _optional_float(text):
    return None if text.strip().lower() in ("", "none", "auto") else float(text)


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_PARSERS = {
    "eps": float, "eps_list": _floats, "dt_rule": float, "T": float, "N": int, "R": int,
    "seed": int, "dictionary_seed": int, "dictionary_size": int,
    "lower": _floats, "upper": _floats, "points": _ints, "escape_margin": _optional_float,
    "t_max": _optional_float, "poisson_dt": float, "poisson_paths": int, "stationary_dt": float,
    "burn_in": float, "n_samples": int, "acf_window": float, "ess_floor": float,
    "delta_x": _optional_float, "inner_paths": int, "mixing_multiple": float,
    "resample_threshold": float, "collapse_patience": int, "dump_ensembles": _bool,
}
_RENAME = {"lower": "grid_lower", "upper": "grid_upper", "points": "grid_points"}


def parse_config(text: str) -> ExperimentConfig:
    """Parse config text; raises ConfigError on unknown sections/keys or bad values."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}") from None
    kwargs = {}
    for section in parser.sections():
        if section == "model":
            params = {}
            for key, raw in parser.items(section):
                try:
                    params[key] = float(raw)
                except ValueError:
                    raise ConfigError(f"[model] {key} must be numeric") from None
            kwargs["model_params"] = params
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                value = _PARSERS[key](raw) if key in _PARSERS else raw.strip()
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from None
            kwargs[_RENAME.get(key, key)] = value
    if "model" not in kwargs:
        raise ConfigError("[experiment] model is required")
    cfg = ExperimentConfig(**kwargs)
    cfg.source_sha256 = hashlib.sha256(text.encode("utf-8")).hexdigest()
    return cfg.validate()


def load_config(path, **overrides) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg = parse_config(text)
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    return cfg.validate()
