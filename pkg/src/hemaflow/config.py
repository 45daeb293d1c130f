"""INI configuration surface.

A run file has up to three sections::

    [model]
    r = constant:0.015
    m = constant:0.02
    death_rate = 0.005
    ; optional overrides: r_hat, m_hat, m_min, lip_r, lip_m

    [run]
    n_compartments = 200
    horizon = 100.0
    initial_counts = stem_only:50      ; or a comma list of length N
    seed = 12345
    out_points = 201
    test_functions = identity          ; optional, comma list

    [limit]
    grid_cells = 200
    dt = auto                          ; or a float
    a0 = 1.0
    z0 = 0.0
    mild_steps = 1000

Rate strings are family:comma-separated-parameters.  The tabulated family is
API-only; a table has no sane one-line encoding.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .rates import (ModelConfig, RateModel, affine_rate, constant_rate,
                    make_model, saturating_rate, stem_only_counts)


@dataclass
class LimitSettings:
    grid_cells: int = 200
    dt: float | None = None
    a0: float = 1.0
    z0: float = 0.0
    mild_steps: int = 1000


@dataclass
class ConfigBundle:
    model: RateModel
    run: ModelConfig
    limit: LimitSettings
    test_functions: tuple[str, ...]
    path: str

    def resolved(self) -> dict:
        """Plain-type view for the run manifest."""
        return {
            "path": self.path,
            "n_compartments": int(self.run.n_compartments),
            "horizon": float(self.run.horizon),
            "seed": int(self.run.seed),
            "initial_total": int(self.run.initial_counts.sum()),
            "out_points": int(self.run.out_times.size),
            "death_rate": float(self.model.death_rate),
            "r_hat": float(self.model.r_hat),
            "m_hat": float(self.model.m_hat),
            "m_min": float(self.model.m_min),
            "grid_cells": int(self.limit.grid_cells),
            "limit_dt": self.limit.dt,
            "a0": float(self.limit.a0),
            "z0": float(self.limit.z0),
            "mild_steps": int(self.limit.mild_steps),
            "test_functions": list(self.test_functions),
        }


def _parse_rate(text: str):
    head, _, tail = text.strip().partition(":")
    family = head.strip().lower()
    try:
        params = [float(tok) for tok in tail.split(",")] if tail.strip() else []
    except ValueError as exc:
        raise ConfigError(f"bad rate parameters in {text!r}") from exc
    try:
        if family == "constant":
            (value,) = params
            return constant_rate(value)
        if family == "affine":
            base, sx, sz, cap = params
            return affine_rate(base, sx, sz, cap)
        if family == "saturating":
            top, inhibition, floor = params
            return saturating_rate(top, inhibition, floor)
    except ValueError as exc:
        raise ConfigError(f"wrong parameter count in {text!r}") from exc
    raise ConfigError(f"unknown rate family in {text!r}")


def _get(section, key, cast, default=None, required=False):
    if key not in section:
        if required:
            raise ConfigError(f"missing key {key!r} in [{section.name}]")
        return default
    raw = section[key].strip()
    try:
        return cast(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc


def load_config(path: str) -> ConfigBundle:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")

    if "model" not in parser:
        raise ConfigError("config needs a [model] section")
    sec = parser["model"]
    r_spec = _parse_rate(_get(sec, "r", str, required=True))
    m_spec = _parse_rate(_get(sec, "m", str, required=True))
    death = _get(sec, "death_rate", float, required=True)
    overrides = {key: _get(sec, key, float) for key in
                 ("r_hat", "m_hat", "m_min", "lip_r", "lip_m")}
    model = make_model(r_spec, m_spec, death, **overrides)

    if "run" not in parser:
        raise ConfigError("config needs a [run] section")
    run_sec = parser["run"]
    n = _get(run_sec, "n_compartments", int, required=True)
    horizon = _get(run_sec, "horizon", float, required=True)
    seed = _get(run_sec, "seed", int, default=0)
    out_points = _get(run_sec, "out_points", int, default=101)
    if out_points < 2:
        raise ConfigError("out_points must be at least 2")
    counts_text = _get(run_sec, "initial_counts", str, required=True)
    if counts_text.startswith("stem_only:"):
        try:
            counts = stem_only_counts(n, int(counts_text.split(":", 1)[1]))
        except ValueError as exc:
            raise ConfigError(f"bad stem count in {counts_text!r}") from exc
    else:
        try:
            counts = np.array([int(tok) for tok in counts_text.split(",")],
                              dtype=np.int64)
        except ValueError as exc:
            raise ConfigError(f"bad count list {counts_text!r}") from exc
    fn_text = _get(run_sec, "test_functions", str, default="")
    names = tuple(tok.strip() for tok in fn_text.split(",") if tok.strip())
    for name in names:
        if name not in ("identity", "square") and not name.startswith("hat:"):
            raise ConfigError(f"unknown test function {name!r}")

    run = ModelConfig(n_compartments=n, horizon=horizon, initial_counts=counts,
                      model=model, out_times=np.linspace(0.0, horizon, out_points),
                      seed=seed)

    limit = LimitSettings()
    if "limit" in parser:
        lim_sec = parser["limit"]
        limit.grid_cells = _get(lim_sec, "grid_cells", int, default=200)
        dt_text = _get(lim_sec, "dt", str, default="auto")
        limit.dt = None if dt_text == "auto" else float(dt_text)
        limit.a0 = _get(lim_sec, "a0", float, default=1.0)
        limit.z0 = _get(lim_sec, "z0", float, default=0.0)
        limit.mild_steps = _get(lim_sec, "mild_steps", int, default=1000)
        if limit.grid_cells < 2:
            raise ConfigError("grid_cells must be at least 2")

    return ConfigBundle(model=model, run=run, limit=limit,
                        test_functions=names, path=str(path))
