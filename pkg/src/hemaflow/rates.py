"""Rate models for the maturation system.

A model bundles a division rate r(x, z), a differentiation rate m(x, z), a
death rate for the mature pool, and the constants the analysis relies on:
0 <= r <= r_hat, 0 < m_min <= m <= m_hat, and Lipschitz constants in (x, z).
Rates are always evaluated with x clamped to [0, 1] and z clamped to
[0, inf); that clamped extension is what every solver in the package sees.

Rates come in two flavors.  `RateSpec` describes one of four parametric
families and can be handed to compiled kernels; any python callable
``f(x, z) -> array`` (vectorized in x) works everywhere else.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .errors import ConfigError

FAMILY_CODES = {"constant": 0, "affine": 1, "saturating": 2, "tabulated": 3}


@dataclass(frozen=True)
class RateSpec:
    """One parametric rate family, kernel-representable.

    families and their parameter vectors:

    constant    [c]
    affine      [c, slope_x, slope_z, z_cap]      c + slope_x*x + slope_z*min(z, z_cap)
    saturating  [top, inhibition, floor]          max(top / (1 + inhibition*z), floor)
    tabulated   [nx, nz, x_lo, x_hi, z_lo, z_hi, table...]   bilinear, clamped
    """

    family: str
    params: np.ndarray

    def __post_init__(self):
        if self.family not in FAMILY_CODES:
            raise ConfigError(f"unknown rate family {self.family!r}")
        p = np.ascontiguousarray(np.asarray(self.params, dtype=np.float64))
        p.flags.writeable = False
        object.__setattr__(self, "params", p)

    @property
    def code(self) -> int:
        return FAMILY_CODES[self.family]

    def __call__(self, x, z):
        # Mirror of _kernels._rate_scalar; keep operation order in sync,
        # the two are cross-checked for exact equality.
        x = np.minimum(np.maximum(np.asarray(x, dtype=np.float64), 0.0), 1.0)
        z = z if z > 0.0 else 0.0
        p = self.params
        if self.family == "constant":
            return np.full_like(x, p[0])
        if self.family == "affine":
            zc = z if z < p[3] else p[3]
            return p[0] + p[1] * x + p[2] * zc
        if self.family == "saturating":
            v = p[0] / (1.0 + p[1] * z)
            v = v if v > p[2] else p[2]
            return np.full_like(x, v)
        # tabulated
        nx = int(p[0])
        nz = int(p[1])
        x_lo, x_hi, z_lo, z_hi = p[2], p[3], p[4], p[5]
        tab = p[6:].reshape(nx, nz)
        gx = (x - x_lo) / (x_hi - x_lo) * (nx - 1)
        gx = np.minimum(np.maximum(gx, 0.0), nx - 1.0)
        gz = (z - z_lo) / (z_hi - z_lo) * (nz - 1)
        gz = min(max(gz, 0.0), nz - 1.0)
        ix = np.minimum(gx.astype(np.int64), nx - 2)
        iz = min(int(gz), nz - 2)
        wx = gx - ix
        wz = gz - iz
        t00 = tab[ix, iz]
        t01 = tab[ix, iz + 1]
        t10 = tab[ix + 1, iz]
        t11 = tab[ix + 1, iz + 1]
        return (1.0 - wx) * ((1.0 - wz) * t00 + wz * t01) + wx * ((1.0 - wz) * t10 + wz * t11)


RateLike = Union[RateSpec, Callable]


def constant_rate(value: float) -> RateSpec:
    return RateSpec("constant", np.array([float(value)]))


def affine_rate(base: float, slope_x: float, slope_z: float, z_cap: float) -> RateSpec:
    if z_cap < 0:
        raise ConfigError("z_cap must be nonnegative")
    return RateSpec("affine", np.array([base, slope_x, slope_z, z_cap], dtype=float))


def saturating_rate(top: float, inhibition: float, floor: float) -> RateSpec:
    if inhibition < 0:
        raise ConfigError("inhibition must be nonnegative")
    if not 0 <= floor <= top:
        raise ConfigError("need 0 <= floor <= top")
    return RateSpec("saturating", np.array([top, inhibition, floor], dtype=float))


def tabulated_rate(x_nodes: int, z_nodes: int, z_hi: float, table: np.ndarray) -> RateSpec:
    """Bilinear table on a uniform (x, z) grid over [0,1] x [0, z_hi]."""
    tab = np.asarray(table, dtype=float)
    if tab.shape != (x_nodes, z_nodes):
        raise ConfigError("table shape does not match node counts")
    if x_nodes < 2 or z_nodes < 2:
        raise ConfigError("tabulated rates need at least a 2x2 grid")
    header = np.array([x_nodes, z_nodes, 0.0, 1.0, 0.0, float(z_hi)])
    return RateSpec("tabulated", np.concatenate([header, tab.ravel()]))


def _spec_bounds(spec: RateSpec) -> tuple[float, float, float]:
    """(lower bound, upper bound, Lipschitz constant) over [0,1] x [0,inf)."""
    p = spec.params
    if spec.family == "constant":
        return p[0], p[0], 0.0
    if spec.family == "affine":
        zr = p[2] * p[3]
        lo = p[0] + min(0.0, p[1]) + min(0.0, zr)
        hi = p[0] + max(0.0, p[1]) + max(0.0, zr)
        return lo, hi, max(abs(p[1]), abs(p[2]))
    if spec.family == "saturating":
        if p[1] == 0.0:
            return p[0], p[0], 0.0
        # decays from top toward floor; steepest at z = 0
        return p[2], p[0], abs(p[0] * p[1])
    nx, nz = int(p[0]), int(p[1])
    tab = p[6:].reshape(nx, nz)
    dx = (p[3] - p[2]) / (nx - 1)
    dz = (p[5] - p[4]) / (nz - 1)
    lip_x = np.abs(np.diff(tab, axis=0)).max() / dx if nx > 1 else 0.0
    lip_z = np.abs(np.diff(tab, axis=1)).max() / dz if nz > 1 else 0.0
    return tab.min(), tab.max(), max(lip_x, lip_z)


def _spec_z_dependent(spec: RateSpec) -> bool:
    p = spec.params
    if spec.family == "constant":
        return False
    if spec.family == "affine":
        return p[2] != 0.0 and p[3] > 0.0
    if spec.family == "saturating":
        return p[1] != 0.0
    nx, nz = int(p[0]), int(p[1])
    tab = p[6:].reshape(nx, nz)
    return bool(np.any(np.diff(tab, axis=1) != 0.0))


def model_z_dependent(model: "RateModel") -> bool:
    """Whether either rate reacts to the mature pool (conservative for callables)."""
    dep = False
    for spec in (model.r, model.m):
        if isinstance(spec, RateSpec):
            dep = dep or _spec_z_dependent(spec)
        else:
            dep = True
    return dep


def extend_clamped(fn: Callable) -> Callable:
    """Wrap a raw callable so it sees x in [0,1] and z in [0, inf)."""

    def clamped(x, z):
        xc = np.minimum(np.maximum(np.asarray(x, dtype=np.float64), 0.0), 1.0)
        return np.asarray(fn(xc, z if z > 0.0 else 0.0), dtype=np.float64)

    clamped.__wrapped__ = fn
    return clamped


@dataclass(frozen=True)
class RateModel:
    """Rates plus the constants every estimate in the suite depends on."""

    r: RateLike
    m: RateLike
    death_rate: float
    r_hat: float
    m_hat: float
    m_min: float
    lip_r: float
    lip_m: float

    def __post_init__(self):
        if self.death_rate < 0:
            raise ConfigError("death_rate must be nonnegative")
        if self.m_min <= 0:
            raise ConfigError("m_min must be positive")
        if self.r_hat < 0 or self.m_hat < self.m_min:
            raise ConfigError("rate bounds are inconsistent")

    @property
    def kernel_ready(self) -> bool:
        return isinstance(self.r, RateSpec) and isinstance(self.m, RateSpec)

    def r_eval(self, x, z):
        if isinstance(self.r, RateSpec):
            return self.r(x, z)
        return extend_clamped(self.r)(x, z)

    def m_eval(self, x, z):
        if isinstance(self.m, RateSpec):
            return self.m(x, z)
        return extend_clamped(self.m)(x, z)


def make_model(r: RateLike, m: RateLike, death_rate: float, *,
               r_hat: float | None = None, m_hat: float | None = None,
               m_min: float | None = None, lip_r: float | None = None,
               lip_m: float | None = None) -> RateModel:
    """Assemble a RateModel, deriving bounds for parametric specs.

    Bound and Lipschitz arguments override the derived values and are
    mandatory for plain callables (nothing can be derived there).
    """
    def fill(spec, hat, low, lip, name, need_low):
        if isinstance(spec, RateSpec):
            lo_d, hi_d, lip_d = _spec_bounds(spec)
        else:
            lo_d = hi_d = lip_d = None
        hat = hat if hat is not None else hi_d
        low = low if low is not None else lo_d
        lip = lip if lip is not None else lip_d
        if hat is None or lip is None or (need_low and low is None):
            raise ConfigError(f"{name}: bounds required for callable rates")
        return hat, low, lip

    # the division rate needs no lower bound (only nonnegativity, checked
    # for families below); the maturation rate must declare m_min > 0
    r_hat_v, r_lo, lip_r_v = fill(r, r_hat, None, lip_r, "r", False)
    m_hat_v, m_min_v, lip_m_v = fill(m, m_hat, m_min, lip_m, "m", True)
    if r_lo is not None and r_lo < -1e-12:
        raise ConfigError("division rate family admits negative values")
    return RateModel(r=r, m=m, death_rate=float(death_rate),
                     r_hat=float(r_hat_v), m_hat=float(m_hat_v),
                     m_min=float(m_min_v), lip_r=float(lip_r_v),
                     lip_m=float(lip_m_v))


def validate(model: RateModel, n_samples: int = 2000, seed: int = 0,
             z_max: float = 5.0) -> list[str]:
    """Randomized spot checks of the declared bounds.

    Samples (x, z) pairs, checks 0 <= r <= r_hat and m_min <= m <= m_hat,
    and probes the Lipschitz constants on point pairs.  Violations come
    back as strings; an empty list means nothing was caught.  This is a
    falsification pass, not a proof.
    """
    rng = np.random.default_rng(seed)
    xs = rng.uniform(-0.2, 1.2, n_samples)  # deliberately outside [0,1]
    zs = rng.uniform(0.0, z_max, n_samples)
    out: list[str] = []
    tol = 1e-12
    rv = np.array([float(model.r_eval(x, z)) for x, z in zip(xs, zs)])
    mv = np.array([float(model.m_eval(x, z)) for x, z in zip(xs, zs)])
    if rv.min() < -tol:
        out.append(f"r < 0 at sample {int(rv.argmin())}: {rv.min():.3e}")
    if rv.max() > model.r_hat + tol:
        out.append(f"r exceeds r_hat: {rv.max():.6g} > {model.r_hat:.6g}")
    if mv.min() < model.m_min - tol:
        out.append(f"m below m_min: {mv.min():.6g} < {model.m_min:.6g}")
    if mv.max() > model.m_hat + tol:
        out.append(f"m exceeds m_hat: {mv.max():.6g} > {model.m_hat:.6g}")
    # Lipschitz probes in the 1-norm on (x, z)
    xs2 = np.minimum(np.maximum(xs + rng.normal(0, 0.05, n_samples), 0.0), 1.0)
    zs2 = np.maximum(zs + rng.normal(0, 0.2, n_samples), 0.0)
    xs1 = np.minimum(np.maximum(xs, 0.0), 1.0)
    dist = np.abs(xs2 - xs1) + np.abs(zs2 - zs)
    keep = dist > 1e-9
    rv2 = np.array([float(model.r_eval(x, z)) for x, z in zip(xs2, zs2)])
    mv2 = np.array([float(model.m_eval(x, z)) for x, z in zip(xs2, zs2)])
    rq = np.abs(rv2 - rv)[keep] / dist[keep]
    mq = np.abs(mv2 - mv)[keep] / dist[keep]
    if rq.size and rq.max() > model.lip_r * (1 + 1e-9) + tol:
        out.append(f"r Lipschitz ratio {rq.max():.6g} exceeds {model.lip_r:.6g}")
    if mq.size and mq.max() > model.lip_m * (1 + 1e-9) + tol:
        out.append(f"m Lipschitz ratio {mq.max():.6g} exceeds {model.lip_m:.6g}")
    return out


def stem_only_counts(n_compartments: int, count: int) -> np.ndarray:
    """Initial condition with every cell in the first compartment."""
    counts = np.zeros(n_compartments, dtype=np.int64)
    counts[0] = count
    return counts


@dataclass
class ModelConfig:
    """Everything one finite-N run needs.

    out_times must be strictly increasing and live in [0, horizon]; the
    simulator snapshots the state there, pre-event for times interior to a
    waiting interval and post-event on exact float coincidence.
    """

    n_compartments: int
    horizon: float
    initial_counts: np.ndarray
    model: RateModel
    out_times: np.ndarray = None
    seed: int = 0

    def __post_init__(self):
        n = self.n_compartments
        if n < 3:
            raise ConfigError("need at least stem, one interior, and mature compartments")
        if not self.horizon > 0:
            raise ConfigError("horizon must be positive")
        counts = np.asarray(self.initial_counts, dtype=np.int64)
        if counts.shape != (n,):
            raise ConfigError(f"initial_counts must have length {n}")
        if counts.min() < 0:
            raise ConfigError("initial counts must be nonnegative")
        self.initial_counts = counts
        if self.out_times is None:
            self.out_times = np.linspace(0.0, self.horizon, 101)
        t = np.asarray(self.out_times, dtype=np.float64)
        if t.ndim != 1 or t.size == 0 or np.any(np.diff(t) <= 0):
            raise ConfigError("out_times must be 1-d strictly increasing")
        if t[0] < 0 or t[-1] > self.horizon:
            raise ConfigError("out_times must lie within [0, horizon]")
        self.out_times = t
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must fit in 64 unsigned bits")
