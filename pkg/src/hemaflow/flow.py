"""Characteristic flow of the maturation field.

flow(s, t, x) is the maturity at time s of the cell lineage that sits at
maturity x at time t, i.e. the solution of dy/du = m(y, z(u)) through
(t, x) evaluated at u = s.  The first argument is the evaluation time and
the second the anchoring time; s < t integrates backward.  The feedback
signal z enters through a piecewise-linear trajectory.

Integration is classical RK4 with a fixed step near 0.01, always run twice
(step h and h/2) so step-halving agreement certifies the result; silent
inaccuracy raises instead of propagating.  Inverses in space and time are
bracketed bisection problems because m > 0 makes the flow strictly
monotone in both slots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from . import _kernels
from .errors import FlowAccuracyError
from .rates import RateModel, RateSpec, extend_clamped


@dataclass(frozen=True)
class ZTrajectory:
    """Piecewise-linear feedback signal; evaluation clamps to the endpoints."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        if t.ndim != 1 or t.shape != v.shape or t.size < 1:
            raise ValueError("times and values must be aligned 1-d arrays")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, value: float, horizon: float = 1.0) -> "ZTrajectory":
        return cls(np.array([0.0, float(horizon)]),
                   np.array([float(value), float(value)]))

    def __call__(self, t):
        return np.interp(t, self.times, self.values)


def abs_diff_integral(z1: ZTrajectory, z2: ZTrajectory,
                      lo: float, hi: float) -> float:
    """Exact integral of |z1 - z2| over [lo, hi] for piecewise-linear inputs.

    Breakpoints of both trajectories and the sign-change roots of their
    difference are handled explicitly, so the only error is rounding.
    """
    if hi < lo:
        lo, hi = hi, lo
    inner1 = z1.times[(z1.times > lo) & (z1.times < hi)]
    inner2 = z2.times[(z2.times > lo) & (z2.times < hi)]
    pts = np.unique(np.concatenate([[lo, hi], inner1, inner2]))
    total = 0.0
    for a, b in zip(pts[:-1], pts[1:]):
        da = float(z1(a)) - float(z2(a))
        db = float(z1(b)) - float(z2(b))
        if da * db < 0.0:
            root = a + (b - a) * da / (da - db)
            total += 0.5 * (abs(da) * (root - a) + abs(db) * (b - root))
        else:
            total += 0.5 * (abs(da) + abs(db)) * (b - a)
    return total


@dataclass(frozen=True)
class FlowField:
    """Maturation rate plus its feedback signal and declared envelope."""

    m: object
    z: ZTrajectory
    m_hat: float
    m_min: float
    lip_m: float

    def __post_init__(self):
        if not (0.0 < self.m_min <= self.m_hat):
            raise ValueError("need 0 < m_min <= m_hat")

    @classmethod
    def from_model(cls, model: RateModel, z: ZTrajectory) -> "FlowField":
        return cls(m=model.m, z=z, m_hat=model.m_hat, m_min=model.m_min,
                   lip_m=model.lip_m)

    def m_at(self, x: float, z: float) -> float:
        if isinstance(self.m, RateSpec):
            return float(self.m(x, z))
        return float(extend_clamped(self.m)(x, z))


def _rk4_python(field: FlowField, t0: float, span: float, n: int,
                x0: np.ndarray) -> np.ndarray:
    m_fn = extend_clamped(field.m) if not isinstance(field.m, RateSpec) else field.m
    zt, zv = field.z.times, field.z.values
    y = x0.astype(np.float64).copy()
    h = span / n
    for i in range(n):
        u = t0 + i * h
        zu = np.interp(u, zt, zv)
        zm = np.interp(u + 0.5 * h, zt, zv)
        ze = np.interp(u + h, zt, zv)
        k1 = np.asarray(m_fn(y, zu), dtype=np.float64)
        k2 = np.asarray(m_fn(y + 0.5 * h * k1, zm), dtype=np.float64)
        k3 = np.asarray(m_fn(y + 0.5 * h * k2, zm), dtype=np.float64)
        k4 = np.asarray(m_fn(y + h * k3, ze), dtype=np.float64)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return y


def _integrate(field: FlowField, t0: float, span: float, n: int,
               x0: np.ndarray) -> np.ndarray:
    if isinstance(field.m, RateSpec):
        return _kernels.flow_rk4_kernel(field.m.code, field.m.params,
                                        field.z.times, field.z.values,
                                        t0, span, n, np.ascontiguousarray(x0))
    return _rk4_python(field, t0, span, n, x0)


def flow(field: FlowField, s: float, t: float, x, *, rtol: float = 1e-8,
         base_step: float = 0.01, check: bool = True):
    """Flow map: maturity at time s of the lineage at x at time t.

    Scalar x returns a scalar, arrays map elementwise.  With check on
    (default) the integration runs at step h and h/2 and must agree to
    rtol, else FlowAccuracyError; the finer result is returned.
    """
    x_arr = np.atleast_1d(np.asarray(x, dtype=np.float64))
    scalar = np.isscalar(x) or np.asarray(x).ndim == 0
    span = float(s) - float(t)
    if span == 0.0:
        out = x_arr.copy()
        return float(out[0]) if scalar else out
    n = max(10, int(math.ceil(abs(span) / base_step)))
    fine = _integrate(field, float(t), span, 2 * n, x_arr)
    if check:
        coarse = _integrate(field, float(t), span, n, x_arr)
        scale = np.maximum(1.0, np.abs(fine))
        err = float(np.max(np.abs(fine - coarse) / scale))
        if err > rtol:
            raise FlowAccuracyError(
                f"step halving moved the flow by {err:.3e} > rtol {rtol:.1e}")
    return float(fine[0]) if scalar else fine


def inverse_space(field: FlowField, s: float, t: float, y: float,
                  *, tol: float = 1e-10) -> float:
    """The x with flow(s, t, x) = y; exists and is unique since m > 0."""
    span = float(s) - float(t)
    reach = field.m_hat * abs(span) + 1e-9
    if span >= 0.0:
        lo, hi = y - reach, float(y)
    else:
        lo, hi = float(y), y + reach
    x = brentq(lambda q: flow(field, s, t, q, check=False) - y, lo, hi,
               xtol=1e-14, rtol=8.9e-16)
    if abs(flow(field, s, t, x) - y) > tol:
        raise FlowAccuracyError("space inversion did not close the flow map")
    return float(x)


def inverse_time_kappa(field: FlowField, t: float, y: float, x: float,
                       *, tol: float = 1e-10) -> float:
    """The time u at which the lineage observed at (t, y) passed through x.

    Solves flow(t, u, x) = y for the anchoring time u.  The map is
    strictly decreasing in u, with slope at least m_min, which gives the
    bracket width |y - x| / m_min.
    """
    gap = float(y) - float(x)
    width = abs(gap) / field.m_min + 1e-9
    if gap >= 0.0:
        lo, hi = float(t) - width, float(t)
    else:
        lo, hi = float(t), float(t) + width
    u = brentq(lambda q: flow(field, t, q, x, check=False) - y, lo, hi,
               xtol=1e-14, rtol=8.9e-16)
    if abs(flow(field, t, u, x) - y) > tol:
        raise FlowAccuracyError("time inversion did not close the flow map")
    return float(u)


def tau(field: FlowField, t: float, y: float) -> float:
    """Boundary exit time: when the lineage at (t, y) crossed maturity 0."""
    return inverse_time_kappa(field, t, y, 0.0)


def stability_gap(field_a: FlowField, field_b: FlowField, s: float, t: float,
                  x: float) -> tuple:
    """Flow displacement under a feedback perturbation, with its bound.

    Both fields must share the rate; only the signals differ.  Returns
    (gap, bound) with gap = |flow_a - flow_b| at (s, t, x) and
    bound = exp(lip_m * T) * int |z_a - z_b| over the integration window,
    T = max(s, t).  The bound is the first-order envelope: it is valid as
    stated for lip_m <= 1 and test models stay in that regime.
    """
    if field_a.m is not field_b.m:
        same = (isinstance(field_a.m, RateSpec)
                and isinstance(field_b.m, RateSpec)
                and field_a.m.family == field_b.m.family
                and np.array_equal(field_a.m.params, field_b.m.params))
        if not same:
            raise ValueError("stability compares two signals under one rate")
    ya = flow(field_a, s, t, x)
    yb = flow(field_b, s, t, x)
    gap = abs(ya - yb)
    big_t = max(float(s), float(t))
    integral = abs_diff_integral(field_a.z, field_b.z, min(s, t), max(s, t))
    bound = math.exp(field_a.lip_m * big_t) * integral
    return gap, bound
