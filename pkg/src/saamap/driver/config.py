"""Run configuration: flat key = value text with sections, parsed into a
dataclass whose defaults mirror the experimental protocol (quadrature
tolerance 1e-7, solve tolerance 1e-8, iteration cap 350, hyperprior rate
1e-4). Every output file echoes the effective configuration in comment
lines for provenance.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

__all__ = ["ConfigError", "RunConfig", "load_config", "config_echo_lines"]


class ConfigError(ValueError):
    """Invalid or unparseable run configuration."""


@dataclass
class RunConfig:
    # problem
    kind: str = "static"
    n_side: int = 32
    j: float = 0.456
    n_t: int = 6
    n_src: int = 8
    n_rcv: int = 12
    noise_level: float = 0.02
    nu: float = 0.5
    problem_seed: int = 0
    problem_path: str = ""
    mu: float = 0.0
    # hyperparameters
    theta0: tuple = ()
    lower: tuple = ()
    upper: tuple = ()
    ell_box: tuple = (0.05, 2.0)
    ell_t_box: tuple = (0.05, 2.0)
    # estimator
    n_mc: int = 24
    probe_kind: str = "rademacher"
    probe_seed: int = 0
    quad_tol: float = 1e-7
    pcg_tol: float = 1e-8
    kmax: int = 350
    gamma: float = 1e-4
    threads: int = 1
    # preconditioner
    precond_enabled: bool = True
    p_space: int = 8
    p_theta: int = 25
    p_time: int = 3
    # optimizer
    maxiter: int = 100
    ftol: float = 1e-8
    gtol: float = 1e-6
    # experiments
    repetitions: int = 5
    # output
    out_dir: str = "out"
    cache_dir: str = ""

    def __post_init__(self):
        if self.kind not in ("static", "dynamic", "saved"):
            raise ConfigError(f"unknown problem kind {self.kind!r}")
        if self.probe_kind not in ("rademacher", "gaussian"):
            raise ConfigError(f"unknown probe kind {self.probe_kind!r}")
        for name in ("quad_tol", "pcg_tol", "gamma", "ftol", "gtol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("n_mc", "kmax", "maxiter", "p_space", "p_theta", "p_time", "threads"):
            if not getattr(self, name) >= 1:
                raise ConfigError(f"{name} must be at least 1")
        for name in ("ell_box", "ell_t_box"):
            box = getattr(self, name)
            if len(box) != 2 or not (0 < box[0] < box[1]):
                raise ConfigError(f"{name} must be an increasing positive pair")

    def n_theta(self) -> int:
        return 4 if self.kind == "dynamic" else 3

    def bounds(self):
        k = self.n_theta()
        lower = np.array(self.lower if self.lower else [1e-8] * k, dtype=float)
        if self.upper:
            upper = np.array(self.upper, dtype=float)
        elif self.kind == "dynamic":
            upper = np.array([1e2, 1e1, self.ell_t_box[1], self.ell_box[1]])
        else:
            upper = np.array([1e2, 1e1, self.ell_box[1]])
        if lower.size != k or upper.size != k:
            raise ConfigError(f"bounds must have {k} components")
        if np.any(lower <= 0) or np.any(upper <= lower):
            raise ConfigError("bounds must satisfy 0 < lower < upper")
        return lower, upper


_SECTIONED_KEYS = {
    "problem": ["kind", "n_side", "j", "n_t", "n_src", "n_rcv", "noise_level", "nu",
                "problem_seed", "problem_path", "mu"],
    "theta": ["theta0", "lower", "upper", "ell_box", "ell_t_box"],
    "estimator": ["n_mc", "probe_kind", "probe_seed", "quad_tol", "pcg_tol", "kmax",
                  "gamma", "threads"],
    "precond": ["precond_enabled", "p_space", "p_theta", "p_time"],
    "optimizer": ["maxiter", "ftol", "gtol"],
    "experiment": ["repetitions"],
    "output": ["out_dir", "cache_dir"],
}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(name: str, raw: str):
    ftype = _FIELD_TYPES[name]
    raw = raw.strip()
    try:
        if ftype == "tuple":
            return tuple(float(x) for x in raw.split()) if raw else ()
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse {name} = {raw!r}") from exc


def load_config(path) -> RunConfig:
    """Parse an INI-style configuration file into a RunConfig."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        read = parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
    if not read:
        raise ConfigError(f"config file not found: {path}")
    kwargs = {}
    for section in parser.sections():
        if section not in _SECTIONED_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTIONED_KEYS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            kwargs[key] = _parse_value(key, raw)
    return RunConfig(**kwargs)


def config_echo_lines(cfg: RunConfig):
    """Configuration as CSV comment lines, stable key order."""
    lines = []
    for section, keys in _SECTIONED_KEYS.items():
        for key in keys:
            val = getattr(cfg, key)
            if isinstance(val, tuple):
                val = " ".join(repr(float(v)) for v in val)
            lines.append(f"# {section}.{key} = {val}")
    return lines
