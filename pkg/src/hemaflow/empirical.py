"""Empirical-measure diagnostics for simulated trajectories.

The belt compartments i = 2..N-1 define the scaled atomic measure
mu = (1/N) sum_i X_i delta_{i/N}.  Around it this module builds the
semimartingale decomposition of the triplet (X1/N, mu, XN/N): exact drift
integrals, martingale residuals, and the 1/N-scaled predictors of their
quadratic variations.  All integrals come straight from the simulation
accumulators, so any disagreement is bookkeeping error, never quadrature.

The measure residual is assembled against g = f - f(1).  Subtracting the
boundary value makes one forward-difference formula exact across the whole
belt including the exit compartment (a cell maturing out of the belt
carries g(1) = 0), and it kills the f == 1 residual identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class AtomicMeasure:
    """Finite non-negative measure on [0,1] as aligned atom arrays.

    Zero weights are kept so measures built from states always have exactly
    N-2 atoms, which keeps time points comparable index by index.
    """

    locations: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        loc = np.asarray(self.locations, dtype=np.float64)
        w = np.asarray(self.weights, dtype=np.float64)
        if loc.shape != w.shape or loc.ndim != 1:
            raise ValueError("locations and weights must be aligned 1-d arrays")
        if loc.size and (loc.min() < 0.0 or loc.max() > 1.0):
            raise ValueError("atom locations must lie in [0,1]")
        if w.size and w.min() < 0.0:
            raise ValueError("atom weights must be non-negative")
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "weights", w)

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    def pair(self, f) -> float:
        """<mu, f> = sum of weight * f(location)."""
        if self.locations.size == 0:
            return 0.0
        return float(np.dot(self.weights, np.asarray(f(self.locations),
                                                     dtype=np.float64)))


def empirical_measure(counts, n_compartments: int | None = None) -> AtomicMeasure:
    """Scaled belt measure of a state: atoms (i/N, X_i/N) for i = 2..N-1.

    Accepts a full count vector (length N) or anything with a `.counts`
    attribute holding one.
    """
    counts = getattr(counts, "counts", counts)
    counts = np.asarray(counts)
    n = counts.size if n_compartments is None else int(n_compartments)
    if counts.size != n or n < 3:
        raise ValueError("need the full count vector of at least 3 compartments")
    locs = np.arange(2, n) / n
    return AtomicMeasure(locs, counts[1:n - 1] / n)


def pair(measure: AtomicMeasure, f) -> float:
    return measure.pair(f)


def discrete_derivative(f, h: float):
    """The difference-quotient operator x -> (f(x+h) - f(x)) / h."""
    if h <= 0.0:
        raise ValueError("h must be positive")

    def dfh(x):
        return (np.asarray(f(np.asarray(x) + h)) - np.asarray(f(x))) / h

    return dfh


@dataclass(frozen=True)
class TestFunction:
    """A function on [0,1] with declared sup and Lipschitz bounds.

    The declared bounds are contracts, not derived facts; `verify_bounds`
    spot-checks them on a random grid the way rate bounds are checked.
    """

    name: str
    fn: Callable
    sup_bound: float
    lip_bound: float
    derivative: Callable | None = None

    def __call__(self, x):
        return self.fn(np.asarray(x, dtype=np.float64))

    def verify_bounds(self, n_samples: int = 2000, seed: int = 0) -> list:
        rng = np.random.default_rng(seed)
        x = rng.uniform(0.0, 1.0, size=n_samples)
        vals = np.asarray(self(x), dtype=np.float64)
        out = []
        bad = np.abs(vals) > self.sup_bound + 1e-12
        if bad.any():
            i = int(np.argmax(np.abs(vals)))
            out.append(f"|{self.name}({x[i]:.6f})| = {abs(vals[i]):.6g} "
                       f"exceeds sup bound {self.sup_bound:g}")
        y = rng.uniform(0.0, 1.0, size=n_samples)
        fy = np.asarray(self(y), dtype=np.float64)
        gap = np.abs(x - y)
        ok = gap > 1e-9
        quot = np.abs(vals[ok] - fy[ok]) / gap[ok]
        if quot.size and quot.max() > self.lip_bound * (1 + 1e-9) + 1e-12:
            out.append(f"{self.name}: difference quotient {quot.max():.6g} "
                       f"exceeds Lipschitz bound {self.lip_bound:g}")
        return out


def identity() -> TestFunction:
    return TestFunction("identity", lambda x: x, 1.0, 1.0,
                        derivative=lambda x: np.ones_like(x))


def square() -> TestFunction:
    return TestFunction("square", lambda x: x * x, 1.0, 2.0,
                        derivative=lambda x: 2.0 * x)


def constant(value: float = 1.0) -> TestFunction:
    v = float(value)
    return TestFunction("constant", lambda x, _v=v: np.full_like(x, _v),
                        abs(v), 0.0, derivative=lambda x: np.zeros_like(x))


def hat(eps: float) -> TestFunction:
    """Boundary hat: 1 at x = 0, linear down to 0 at eps, 0 beyond.

    Pairs with the belt measure to estimate how much immature mass sits
    near maturity zero.
    """
    eps = float(eps)
    if not 0.0 < eps <= 1.0:
        raise ValueError("hat width must lie in (0, 1]")
    return TestFunction(f"hat:{eps:g}",
                        lambda x, _e=eps: np.maximum(0.0, 1.0 - x / _e),
                        1.0, 1.0 / eps)


def parse_test_function(token: str) -> TestFunction:
    """Resolve a config token: identity, square, constant, or hat:<eps>."""
    token = token.strip()
    if token == "identity":
        return identity()
    if token == "square":
        return square()
    if token == "constant":
        return constant()
    if token.startswith("hat:"):
        try:
            return hat(float(token[4:]))
        except ValueError as exc:
            raise ConfigError(f"bad hat width in {token!r}: {exc}") from exc
    raise ConfigError(f"unknown test function {token!r}")


@dataclass
class SemimartingalePanel:
    """Drift integrals, martingale residuals, and predicted brackets.

    a1/m1 decompose the scaled stem count, af/mf the belt measure paired
    with g = f - f(1), an/mn the scaled mature count.  Each residual is
    exactly zero at t = 0.  qv holds the predicted quadratic (co)variations
    keyed as in `qv_predicted`.
    """

    times: np.ndarray
    f_name: str
    a1: np.ndarray
    af: np.ndarray
    an: np.ndarray
    m1: np.ndarray
    mf: np.ndarray
    mn: np.ndarray
    qv: dict = field(default_factory=dict)


def _resolve_registered(traj, f):
    if isinstance(f, str):
        name = f
    else:
        name = getattr(f, "name", None)
        if name is None:
            raise KeyError("test function has no name to match panels by")
        probe = np.asarray(f(np.array([1.0])), dtype=np.float64)
        if probe.shape != (1,) or not math.isfinite(float(probe[0])):
            raise ValueError(f"test function {name!r} has no finite value at 1")
    if name not in traj.f_panels:
        raise KeyError(
            f"{name!r} was not registered when the trajectory was simulated")
    return name, traj.f_panels[name], traj.test_values[name]


def qv_predicted(traj, f=None) -> dict:
    """Predicted quadratic variations from the exact drift integrals.

    Keys: "m1" and "mN" for the stem and mature martingales, "f" for the
    measure one (needs f), and the printed cross formulas "m1_mN", "m1_f",
    "f_mN_printed".  All diagonal entries carry the 1/N prefactor that
    drives the variance decay.  The cross entries reproduce the published
    formulas verbatim; note that "f_mN_printed" has the opposite sign to
    the pathwise product of the two jump chains, and "m1_mN" is nonzero
    only when the mature count is read through the belt mass balance.
    """
    acc = traj.accumulators
    n = traj.n_compartments
    d = traj.model.death_rate
    out = {
        "m1": (acc["I_r1"] + acc["I_m1"]) / n,
        "mN": (acc["I_mN1"] + d * acc["I_XN"]) / n,
        "m1_mN": -acc["I_m1"] / n,
    }
    if f is not None:
        name, panel, values = _resolve_registered(traj, f)
        f1 = values[n - 1]
        f2 = values[1]
        out["f"] = (panel["F3"] + panel["F4"] / n
                    + (f2 - f1) ** 2 * acc["I_m1"]) / n
        out["m1_f"] = (f1 - f2) * acc["I_m1"] / n
        out["f_mN_printed"] = (f1 * acc["I_mur"] - panel["F1"]
                               + (f1 - f2) * acc["I_m1"]) / n
    return out


def drift_terms(traj, f) -> SemimartingalePanel:
    """Assemble the semimartingale panel for a registered test function.

    The drift terms are
    a1 = int r(1/N,z) X1/N - int m(1/N,z) X1/N,
    af = (f(2/N)-f(1)) int m(1/N,z) X1/N + int <mu, g r> + int <mu, (Dg) m>,
    an = int m((N-1)/N,z) X_{N-1} - d int XN/N,
    with g = f - f(1) and D the N-scaled forward difference, and every
    integral taken from the exact accumulators.  Raises KeyError if f was
    not registered at simulate time and ValueError if f(1) is not finite.
    """
    name, panel, values = _resolve_registered(traj, f)
    acc = traj.accumulators
    n = traj.n_compartments
    a1 = acc["I_r1"] - acc["I_m1"]
    an = acc["I_mN1"] - traj.model.death_rate * acc["I_XN"]
    f1 = values[n - 1]
    f2 = values[1]
    af = (f2 - f1) * acc["I_m1"] + panel["F1"] - f1 * acc["I_mur"] + panel["F2"]
    mass = traj.belt.sum(axis=1) / n
    mu_f = traj.belt @ values[1:n - 1] / n
    g_path = mu_f - f1 * mass
    m1 = traj.x1 - traj.x1[0] - a1
    mf = g_path - g_path[0] - af
    mn = traj.xn - traj.xn[0] - an
    return SemimartingalePanel(times=traj.out_times, f_name=name,
                               a1=a1, af=af, an=an, m1=m1, mf=mf, mn=mn,
                               qv=qv_predicted(traj, name))


def martingale_residual(traj, f) -> dict:
    """The three residuals {"m1", "mf", "mn"}; each starts at exactly 0."""
    panel = drift_terms(traj, f)
    return {"m1": panel.m1, "mf": panel.mf, "mn": panel.mn}


def pathwise_identity_residual(traj) -> np.ndarray:
    """Relative closure error of the exit-flux identity, per output time.

    The identity ties together four independently maintained records of one
    replicate: event counters, the belt mass read from counts, and the
    Kahan drift integrals.  It holds exactly (to rounding) by construction,
    so the residual measures internal bookkeeping consistency, which is why
    it is driven to 1e-9 rather than treated as a statistical check.
    """
    acc = traj.accumulators
    n = traj.n_compartments
    c = traj.counters
    mass = traj.belt.sum(axis=1) / n
    lhs = acc["I_mN1"]
    sum_m = (c["div_belt"] + c["diff_1"] - c["diff_last"]) \
        - n * (acc["I_mur"] + acc["I_m1"] - acc["I_mN1"])
    rhs = mass[0] - mass + acc["I_m1"] + acc["I_mur"] + sum_m / n
    scale = np.maximum(1.0, np.maximum(np.abs(lhs), np.abs(rhs)))
    return (lhs - rhs) / scale


def moment_bound_constants(model, config) -> dict:
    """A-priori moment bounds from the declared rate envelope.

    "sup_mass": bound on E[sup_{s<=T} total scaled mass], namely the
    initial scaled mass times exp(r_hat T).  "int_compartment": bound on
    int_0^T E[X_i(s)] ds, uniform over belt compartments i, namely
    (1/m_min)(Y0 + (m_hat/r_hat) X1_0) exp(r_hat T) with the middle term
    replaced by its r_hat -> 0 limit m_hat T X1_0 when divisions are off.
    """
    n = config.n_compartments
    t_end = float(config.horizon)
    y0 = float(config.initial_counts.sum()) / n
    x10 = float(config.initial_counts[0]) / n
    sup_mass = y0 * math.exp(model.r_hat * t_end)
    if model.r_hat > 0.0:
        stem_term = (model.m_hat / model.r_hat) * x10 * math.exp(model.r_hat * t_end)
    else:
        stem_term = model.m_hat * x10 * t_end
    int_comp = (y0 * math.exp(model.r_hat * t_end) + stem_term) / model.m_min
    return {"sup_mass": sup_mass, "int_compartment": int_comp}
