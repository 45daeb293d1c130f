"""Exact stochastic simulation of the finite compartment system.

Compartment i holds X_i cells, i = 1..N (arrays are 0-based).  A cell of
compartment i < N divides at rate r(i/N, z), differentiates to i+1 at
per-cell rate m(1/N, z) for the stem compartment and N*m(i/N, z) in the
belt, and mature cells die at rate d, where z = X_N / N.  Simulation is
the direct method: one exponential waiting time plus one compound uniform
per event against cached propensities.

Two interchangeable engines exist.  `_kernels.ssa_kernel` is the compiled
one; `_reference_run` below is a plain-python line-for-line mirror kept
bit-identical to it (same RNG stream, same float operation order), which is
what lets tests validate the kernel exactly.  Time integrals used by the
semimartingale bookkeeping are advanced in exact piecewise-constant chunks
with Kahan compensation in both engines.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from multiprocessing import get_context
from typing import Sequence

import numpy as np

from . import _kernels
from ._rng import Xoshiro
from .rates import (ModelConfig, RateModel, RateSpec, extend_clamped,
                    model_z_dependent)
from .errors import ConfigError

logger = logging.getLogger(__name__)

ACC_NAMES = ("I_r1", "I_m1", "I_mur", "I_mN1", "I_XN")
F_NAMES = ("F0", "F1", "F2", "F3", "F4")
COUNTER_NAMES = ("div_1", "div_belt", "diff_1", "diff_belt", "diff_last", "death")

WORKERS_ENV = "HEMAFLOW_WORKERS"


@dataclass
class CompartmentState:
    """Counts plus the clock, the unit the single-step API works on."""

    counts: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)

    @property
    def n_compartments(self) -> int:
        return self.counts.size

    @property
    def z(self) -> float:
        return self.counts[-1] / self.counts.size

    def copy(self) -> "CompartmentState":
        return CompartmentState(self.counts.copy(), self.time)


@dataclass
class EventLog:
    """Optional per-event record (reference engine only)."""

    times: np.ndarray
    kinds: np.ndarray         # 0 division, 1 differentiation, 2 death
    compartments: np.ndarray  # 0-based source compartment

    def __len__(self):
        return self.times.size


@dataclass
class Trajectory:
    """One replicate: state panels, integral panels, and event counters.

    `accumulators` holds the five time integrals
    I_r1 = int r(1/N,z) X1/N, I_m1 = int m(1/N,z) X1/N,
    I_mur = int <mu, r>, I_mN1 = int m((N-1)/N, z) X_{N-1},
    I_XN = int X_N/N, each sampled on `out_times`.  For every registered
    test function f there is a panel with
    F0 = int <mu,f>, F1 = int <mu,f r>, F2 = int <mu,(Df) m>,
    F3 = int <mu,(f-f(1))^2 r>, F4 = int <mu,(Df)^2 m>, where D is the
    forward difference scaled by N and mu the belt empirical measure.
    """

    out_times: np.ndarray
    x1: np.ndarray
    belt: np.ndarray
    xn: np.ndarray
    accumulators: dict
    f_panels: dict
    counters: dict
    final_counts: np.ndarray
    int_x: np.ndarray
    first_entry: np.ndarray
    max_total: int
    absorption_time: float
    n_events: int
    seed: int
    stream: int
    n_compartments: int
    model: RateModel
    test_values: dict
    initial_counts: np.ndarray
    method: str
    event_log: EventLog | None = None

    @property
    def mass(self) -> np.ndarray:
        """Scaled total X1/N + <mu,1> + XN/N on the output grid."""
        return self.x1 + self.belt.sum(axis=1) / self.n_compartments + self.xn

    @property
    def div_all(self) -> np.ndarray:
        return self.counters["div_1"] + self.counters["div_belt"]


def transitions(state: CompartmentState, model: RateModel):
    """Enumerate (rate, kind, compartment) for every possible event.

    Deliberately brute-force and cache-free; this is the oracle the cached
    propensity vector is checked against.
    """
    n = state.n_compartments
    counts = state.counts
    z = counts[n - 1] / n
    out = []
    if counts[0] > 0:
        x = 1.0 / n
        out.append((float(model.r_eval(x, z)) * counts[0], "division", 0))
        out.append((float(model.m_eval(x, z)) * counts[0], "differentiation", 0))
    for j in range(1, n - 1):
        if counts[j] > 0:
            x = (j + 1) / n
            out.append((float(model.r_eval(x, z)) * counts[j], "division", j))
            out.append((n * float(model.m_eval(x, z)) * counts[j],
                        "differentiation", j))
    if counts[n - 1] > 0 and model.death_rate > 0:
        out.append((model.death_rate * counts[n - 1], "death", n - 1))
    return out


def total_rate(state: CompartmentState, model: RateModel) -> float:
    """Total event intensity at the given state."""
    return sum(rate for rate, _, _ in transitions(state, model))


def step(state: CompartmentState, model: RateModel, rng: Xoshiro):
    """Advance by one event; returns (new_state, (time, kind, compartment)).

    Returns (state, None) if nothing can fire.  Independent of the cached
    engines on purpose: it re-enumerates transitions every call.
    """
    trans = transitions(state, model)
    lam = sum(rate for rate, _, _ in trans)
    if lam <= 0.0:
        return state, None
    dt = -math.log(1.0 - rng.next_double()) / lam
    target = rng.next_double() * lam
    cum = 0.0
    chosen = trans[-1]
    for item in trans:
        cum += item[0]
        if target < cum:
            chosen = item
            break
    _, kind, j = chosen
    new = state.copy()
    new.time = state.time + dt
    if kind == "division":
        new.counts[j] += 1
    elif kind == "differentiation":
        new.counts[j] -= 1
        new.counts[j + 1] += 1
    else:
        new.counts[j] -= 1
    return new, (new.time, kind, j)


def _check_test_functions(test_functions, n):
    grid = np.arange(1, n + 1) / n
    names = []
    values = np.empty((len(test_functions), n))
    for q, tf in enumerate(test_functions):
        vals = np.asarray(tf(grid), dtype=np.float64)
        if vals.shape != grid.shape or not np.all(np.isfinite(vals)):
            raise ValueError(
                f"test function {getattr(tf, 'name', q)!r} must be finite on "
                "the compartment grid including x = 1")
        name = getattr(tf, "name", None) or f"f{q}"
        if name in names:
            raise ValueError(f"duplicate test function name {name!r}")
        names.append(name)
        values[q] = vals
    return names, values


def _rate_scalar_py(code, p, x, z):
    # python twin of _kernels.rate_scalar; keep in exact sync
    if x < 0.0:
        x = 0.0
    elif x > 1.0:
        x = 1.0
    if z < 0.0:
        z = 0.0
    if code == 0:
        return p[0]
    if code == 1:
        zc = z if z < p[3] else p[3]
        return p[0] + p[1] * x + p[2] * zc
    if code == 2:
        v = p[0] / (1.0 + p[1] * z)
        return v if v > p[2] else p[2]
    nx = int(p[0])
    nz = int(p[1])
    gx = (x - p[2]) / (p[3] - p[2]) * (nx - 1)
    if gx < 0.0:
        gx = 0.0
    elif gx > nx - 1.0:
        gx = nx - 1.0
    gz = (z - p[4]) / (p[5] - p[4]) * (nz - 1)
    if gz < 0.0:
        gz = 0.0
    elif gz > nz - 1.0:
        gz = nz - 1.0
    ix = min(int(gx), nx - 2)
    iz = min(int(gz), nz - 2)
    wx = gx - ix
    wz = gz - iz
    base = 6 + ix * nz + iz
    t00 = p[base]
    t01 = p[base + 1]
    t10 = p[base + nz]
    t11 = p[base + nz + 1]
    return (1.0 - wx) * ((1.0 - wz) * t00 + wz * t01) \
        + wx * ((1.0 - wz) * t10 + wz * t11)


def _kadd_py(sums, comps, i, term):
    y = term - comps[i]
    t = sums[i] + y
    comps[i] = (t - sums[i]) - y
    sums[i] = t


def _reference_run(config: ModelConfig, f_values, stream, rebuild_every,
                   record_events):
    """Plain-python engine, the kernel's bit-identical twin."""
    model = config.model
    n = config.n_compartments
    horizon = float(config.horizon)
    inv_n = 1.0 / n
    n_f = float(n)
    out_times = config.out_times
    n_out = out_times.size
    nf = f_values.shape[0]
    death_rate = model.death_rate
    z_dependent = model_z_dependent(model)

    if isinstance(model.r, RateSpec):
        r_code, r_params = model.r.code, model.r.params
        r_call = None
    else:
        r_code, r_params = -1, None
        r_call = extend_clamped(model.r)
    if isinstance(model.m, RateSpec):
        m_code, m_params = model.m.code, model.m.params
        m_call = None
    else:
        m_code, m_params = -1, None
        m_call = extend_clamped(model.m)

    def r_at(x, z):
        if r_code >= 0:
            return _rate_scalar_py(r_code, r_params, x, z)
        return float(r_call(x, z))

    def m_at(x, z):
        if m_code >= 0:
            return _rate_scalar_py(m_code, m_params, x, z)
        return float(m_call(x, z))

    rng = Xoshiro(config.seed, stream)
    counts = config.initial_counts.copy()
    t = 0.0
    t_int = 0.0
    z = counts[n - 1] * inv_n
    r_arr = np.empty(n)
    m_arr = np.empty(n)

    def fill_rates():
        for j in range(n):
            xj = (j + 1) * inv_n
            r_arr[j] = r_at(xj, z)
            m_arr[j] = m_at(xj, z)

    fill_rates()

    f1 = np.empty(nf)
    f2 = np.empty(nf)
    df = np.zeros((nf, n))
    fm1sq = np.zeros((nf, n))
    for q in range(nf):
        f1[q] = f_values[q, n - 1]
        f2[q] = f_values[q, 1]
        for j in range(1, n - 1):
            df[q, j] = n_f * (f_values[q, j + 1] - f_values[q, j])
            d0 = f_values[q, j] - f1[q]
            fm1sq[q, j] = d0 * d0

    prop = np.empty(n)
    s_f = np.zeros(nf)
    s_fr = np.zeros(nf)
    s_dfm = np.zeros(nf)
    s_f3 = np.zeros(nf)
    s_f4 = np.zeros(nf)

    def rebuild():
        total_rate_ = 0.0
        prop[0] = (r_arr[0] + m_arr[0]) * counts[0]
        total_rate_ += prop[0]
        sr = 0.0
        for q in range(nf):
            s_f[q] = 0.0
            s_fr[q] = 0.0
            s_dfm[q] = 0.0
            s_f3[q] = 0.0
            s_f4[q] = 0.0
        for j in range(1, n - 1):
            prop[j] = (r_arr[j] + n_f * m_arr[j]) * counts[j]
            total_rate_ += prop[j]
            cj = counts[j]
            sr += r_arr[j] * cj
            for q in range(nf):
                s_f[q] += f_values[q, j] * cj
                s_fr[q] += f_values[q, j] * r_arr[j] * cj
                s_dfm[q] += df[q, j] * m_arr[j] * cj
                s_f3[q] += fm1sq[q, j] * r_arr[j] * cj
                s_f4[q] += df[q, j] * df[q, j] * m_arr[j] * cj
        prop[n - 1] = death_rate * counts[n - 1]
        total_rate_ += prop[n - 1]
        return sr, total_rate_

    s_r, lam = rebuild()

    acc = np.zeros(5)
    acc_c = np.zeros(5)
    facc = np.zeros((nf, 5))
    facc_c = np.zeros((nf, 5))

    counters = np.zeros(6, dtype=np.int64)
    last_touch = np.zeros(n)
    first_entry = np.full(n, np.nan)
    for j in range(n):
        if counts[j] > 0:
            first_entry[j] = 0.0
    int_x = np.zeros(n)
    total = int(counts.sum())
    max_total = total
    absorption = math.nan
    n_events = 0
    events_since_rebuild = 0
    out_idx = 0

    x1_out = np.empty(n_out)
    belt_out = np.empty((n_out, n - 2))
    xn_out = np.empty(n_out)
    acc_out = np.empty((n_out, 5))
    f_out = np.empty((n_out, nf, 5))
    counter_out = np.empty((n_out, 6), dtype=np.int64)

    ev_times: list[float] = []
    ev_kinds: list[int] = []
    ev_comps: list[int] = []

    def advance(dtc):
        if dtc <= 0.0:
            return
        _kadd_py(acc, acc_c, 0, r_arr[0] * counts[0] * inv_n * dtc)
        _kadd_py(acc, acc_c, 1, m_arr[0] * counts[0] * inv_n * dtc)
        _kadd_py(acc, acc_c, 2, s_r * inv_n * dtc)
        _kadd_py(acc, acc_c, 3, m_arr[n - 2] * counts[n - 2] * dtc)
        _kadd_py(acc, acc_c, 4, counts[n - 1] * inv_n * dtc)
        for q in range(nf):
            _kadd_py(facc[q], facc_c[q], 0, s_f[q] * inv_n * dtc)
            _kadd_py(facc[q], facc_c[q], 1, s_fr[q] * inv_n * dtc)
            _kadd_py(facc[q], facc_c[q], 2, s_dfm[q] * inv_n * dtc)
            _kadd_py(facc[q], facc_c[q], 3, s_f3[q] * inv_n * dtc)
            _kadd_py(facc[q], facc_c[q], 4, s_f4[q] * inv_n * dtc)

    def snapshot(k):
        x1_out[k] = counts[0] * inv_n
        belt_out[k, :] = counts[1:n - 1]
        xn_out[k] = counts[n - 1] * inv_n
        acc_out[k, :] = acc + acc_c
        for q in range(nf):
            f_out[k, q, :] = facc[q] + facc_c[q]
        counter_out[k, :] = counters

    def touch(j):
        int_x[j] += counts[j] * (t - last_touch[j])
        last_touch[j] = t

    def update_prop(j):
        nonlocal lam
        old = prop[j]
        if j == 0:
            prop[0] = (r_arr[0] + m_arr[0]) * counts[0]
        elif j == n - 1:
            prop[n - 1] = death_rate * counts[n - 1]
        else:
            prop[j] = (r_arr[j] + n_f * m_arr[j]) * counts[j]
        lam += prop[j] - old

    def sums_delta(j, sign):
        nonlocal s_r
        if sign > 0:
            s_r += r_arr[j]
            for q in range(nf):
                s_f[q] += f_values[q, j]
                s_fr[q] += f_values[q, j] * r_arr[j]
                s_dfm[q] += df[q, j] * m_arr[j]
                s_f3[q] += fm1sq[q, j] * r_arr[j]
                s_f4[q] += df[q, j] * df[q, j] * m_arr[j]
        else:
            s_r -= r_arr[j]
            for q in range(nf):
                s_f[q] -= f_values[q, j]
                s_fr[q] -= f_values[q, j] * r_arr[j]
                s_dfm[q] -= df[q, j] * m_arr[j]
                s_f3[q] -= fm1sq[q, j] * r_arr[j]
                s_f4[q] -= df[q, j] * df[q, j] * m_arr[j]

    while True:
        alive = (total - int(counts[n - 1])) > 0 or \
                (death_rate > 0.0 and counts[n - 1] > 0)
        if alive and lam <= 0.0:
            s_r, lam = rebuild()
            if lam <= 0.0:
                alive = False
        if alive:
            u1 = rng.next_double()
            t_next = t + (-math.log(1.0 - u1) / lam)
        else:
            if math.isnan(absorption):
                absorption = t
            t_next = math.inf

        while out_idx < n_out and out_times[out_idx] < t_next:
            advance(out_times[out_idx] - t_int)
            t_int = out_times[out_idx]
            snapshot(out_idx)
            out_idx += 1

        if t_next > horizon:
            advance(horizon - t_int)
            t_int = horizon
            break

        advance(t_next - t_int)
        t_int = t_next
        t = t_next

        u2 = rng.next_double()
        target = u2 * lam
        cum = 0.0
        j_sel = -1
        j_pos = 0
        for j in range(n):
            if prop[j] > 0.0:
                j_pos = j
            cum += prop[j]
            if target < cum:
                j_sel = j
                break
        if j_sel == -1:
            j_sel = j_pos
            rem = prop[j_sel]
        else:
            rem = target - (cum - prop[j_sel])

        if j_sel == 0:
            touch(0)
            if rem < r_arr[0] * counts[0]:
                counts[0] += 1
                counters[0] += 1
                total += 1
                max_total = max(max_total, total)
                kind = 0
            else:
                touch(1)
                counts[0] -= 1
                counts[1] += 1
                counters[2] += 1
                if counts[1] == 1 and math.isnan(first_entry[1]):
                    first_entry[1] = t
                sums_delta(1, +1)
                update_prop(1)
                kind = 1
            update_prop(0)
        elif j_sel == n - 1:
            touch(n - 1)
            counts[n - 1] -= 1
            counters[5] += 1
            total -= 1
            z = counts[n - 1] * inv_n
            update_prop(n - 1)
            kind = 2
            if z_dependent:
                fill_rates()
                s_r, lam = rebuild()
        else:
            touch(j_sel)
            if rem < r_arr[j_sel] * counts[j_sel]:
                counts[j_sel] += 1
                counters[1] += 1
                total += 1
                max_total = max(max_total, total)
                sums_delta(j_sel, +1)
                update_prop(j_sel)
                kind = 0
            else:
                jd = j_sel + 1
                touch(jd)
                counts[j_sel] -= 1
                counts[jd] += 1
                if counts[jd] == 1 and math.isnan(first_entry[jd]):
                    first_entry[jd] = t
                sums_delta(j_sel, -1)
                update_prop(j_sel)
                kind = 1
                if jd == n - 1:
                    counters[4] += 1
                    z = counts[n - 1] * inv_n
                    update_prop(n - 1)
                    if z_dependent:
                        fill_rates()
                        s_r, lam = rebuild()
                else:
                    counters[3] += 1
                    sums_delta(jd, +1)
                    update_prop(jd)

        if record_events:
            ev_times.append(t)
            ev_kinds.append(kind)
            ev_comps.append(j_sel)

        n_events += 1
        events_since_rebuild += 1
        if events_since_rebuild >= rebuild_every:
            s_r, lam = rebuild()
            events_since_rebuild = 0

        while out_idx < n_out and out_times[out_idx] == t:
            snapshot(out_idx)
            out_idx += 1

    for j in range(n):
        int_x[j] += counts[j] * (horizon - last_touch[j])

    log = None
    if record_events:
        log = EventLog(np.array(ev_times), np.array(ev_kinds, dtype=np.int8),
                       np.array(ev_comps, dtype=np.int32))
    return (x1_out, belt_out, xn_out, acc_out, f_out, counter_out,
            counts, int_x, first_entry, absorption, n_events, max_total, log)


def simulate(config: ModelConfig, test_functions: Sequence = (),
             stream: int = 0, method: str = "auto",
             record_events: bool = False, rebuild_every: int = 8192) -> Trajectory:
    """Run one replicate.

    method: "kernel" (compiled), "reference" (python mirror), or "auto",
    which picks the kernel whenever the model is kernel-ready and no event
    log was requested.  Both engines consume the same random stream and
    produce bit-identical results.
    """
    model = config.model
    n = config.n_compartments
    names, f_values = _check_test_functions(tuple(test_functions), n)
    if method == "auto":
        method = "kernel" if model.kernel_ready and not record_events else "reference"
    if method == "kernel" and not model.kernel_ready:
        raise ConfigError("compiled engine needs parametric rate specs")
    if method == "kernel" and record_events:
        raise ConfigError("event logging is reference-engine only")

    n_out = config.out_times.size
    if method == "kernel":
        from ._rng import derive_state
        rng_state = np.array(derive_state(config.seed, stream), dtype=np.uint64)
        x1_out = np.empty(n_out)
        belt_out = np.empty((n_out, n - 2))
        xn_out = np.empty(n_out)
        acc_out = np.empty((n_out, 5))
        f_out = np.empty((n_out, f_values.shape[0], 5))
        counter_out = np.empty((n_out, 6), dtype=np.int64)
        final_counts = np.empty(n, dtype=np.int64)
        int_x = np.zeros(n)
        first_entry = np.empty(n)
        absorption, n_events, max_total = _kernels.ssa_kernel(
            n, float(config.horizon), config.initial_counts,
            model.r.code, model.r.params, model.m.code, model.m.params,
            float(model.death_rate), model_z_dependent(model),
            config.out_times, f_values, rng_state, rebuild_every,
            x1_out, belt_out, xn_out, acc_out, f_out, counter_out,
            final_counts, int_x, first_entry)
        log = None
    else:
        (x1_out, belt_out, xn_out, acc_out, f_out, counter_out, final_counts,
         int_x, first_entry, absorption, n_events, max_total,
         log) = _reference_run(config, f_values, stream, rebuild_every,
                               record_events)

    accumulators = {name: acc_out[:, i].copy() for i, name in enumerate(ACC_NAMES)}
    f_panels = {}
    for q, name in enumerate(names):
        f_panels[name] = {fn: f_out[:, q, i].copy() for i, fn in enumerate(F_NAMES)}
    counters = {name: counter_out[:, i].copy()
                for i, name in enumerate(COUNTER_NAMES)}
    test_values = {name: f_values[q].copy() for q, name in enumerate(names)}
    return Trajectory(
        out_times=config.out_times.copy(), x1=x1_out, belt=belt_out, xn=xn_out,
        accumulators=accumulators, f_panels=f_panels, counters=counters,
        final_counts=np.asarray(final_counts, dtype=np.int64), int_x=int_x,
        first_entry=first_entry, max_total=int(max_total),
        absorption_time=float(absorption), n_events=int(n_events),
        seed=int(config.seed), stream=int(stream), n_compartments=n,
        model=model, test_values=test_values,
        initial_counts=config.initial_counts.copy(), method=method,
        event_log=log)


@dataclass
class EnsembleResult:
    """Replicate statistics, reduced along a fixed binary tree.

    sums/sumsqs map panel names to per-replicate sums, so mean(key) is an
    unbiased estimate and var(key) the n-1 sample variance.  Built-in keys:
    x1, belt, xn, mass (panels over out_times), sup_mass (scalar, the
    pathwise supremum of the scaled total), int_x (per-compartment time
    integrals), plus one key per custom reducer.
    """

    n_reps: int
    out_times: np.ndarray
    n_compartments: int
    sums: dict
    sumsqs: dict
    n_absorbed: int
    max_total: int

    def mean(self, key: str) -> np.ndarray:
        return self.sums[key] / self.n_reps

    def var(self, key: str) -> np.ndarray:
        if self.n_reps < 2:
            return np.zeros_like(self.sums[key])
        v = (self.sumsqs[key] - self.sums[key] ** 2 / self.n_reps) / (self.n_reps - 1)
        return np.maximum(v, 0.0)

    def sem(self, key: str) -> np.ndarray:
        return np.sqrt(self.var(key) / self.n_reps)


def _leaf_stats(config: ModelConfig, lo: int, hi: int, f_values, names,
                reducers, method: str, rebuild_every: int):
    sums = {}
    sumsqs = {}
    n_absorbed = 0
    max_total = 0

    def fold(key, value):
        value = np.asarray(value, dtype=np.float64)
        if key not in sums:
            sums[key] = np.zeros_like(value)
            sumsqs[key] = np.zeros_like(value)
        sums[key] += value
        sumsqs[key] += value * value

    tfs = [_ValueFunction(name, f_values[q])
           for q, name in enumerate(names)]
    for stream in range(lo, hi):
        traj = simulate(config, test_functions=tfs, stream=stream,
                        method=method, rebuild_every=rebuild_every)
        fold("x1", traj.x1)
        fold("belt", traj.belt)
        fold("xn", traj.xn)
        fold("mass", traj.mass)
        fold("sup_mass", traj.max_total / config.n_compartments)
        fold("int_x", traj.int_x)
        if reducers:
            for key, fn in reducers.items():
                fold(key, fn(traj))
        if not math.isnan(traj.absorption_time):
            n_absorbed += 1
        max_total = max(max_total, traj.max_total)
    return sums, sumsqs, n_absorbed, max_total


class _ValueFunction:
    """Test function known only through its grid values.

    Lets workers rebuild panels without pickling callables; evaluating it
    anywhere off the registration grid is a contract violation.
    """

    __slots__ = ("name", "values")

    def __init__(self, name, values):
        self.name = name
        self.values = values

    def __call__(self, grid):
        if grid.shape != self.values.shape:
            raise ValueError("value-backed test function evaluated off-grid")
        return self.values


def _combine(a, b):
    sums_a, sq_a, ab_a, mt_a = a
    sums_b, sq_b, ab_b, mt_b = b
    out_s = {k: sums_a[k] + sums_b[k] for k in sums_a}
    out_q = {k: sq_a[k] + sq_b[k] for k in sq_a}
    return out_s, out_q, ab_a + ab_b, max(mt_a, mt_b)


def _tree_reduce(items):
    if len(items) == 1:
        return items[0]
    mid = (len(items) + 1) // 2
    return _combine(_tree_reduce(items[:mid]), _tree_reduce(items[mid:]))


def _leaf_worker(args):
    (config, lo, hi, f_values, names, reducers, method, rebuild_every) = args
    return _leaf_stats(config, lo, hi, f_values, names, reducers, method,
                       rebuild_every)


def ensemble(config: ModelConfig, n_reps: int, *,
             test_functions: Sequence = (), reducers: dict | None = None,
             workers: int | None = None, rep_offset: int = 0,
             method: str = "auto", rebuild_every: int = 8192,
             leaf_size: int = 16) -> EnsembleResult:
    """Simulate replicates rep_offset .. rep_offset + n_reps - 1.

    Replicates are grouped into fixed index blocks (leaves) and the leaf
    statistics are merged along a fixed binary tree, so the result is
    bit-identical for every worker count.  Workers come from the argument,
    else the HEMAFLOW_WORKERS environment variable, else 1.  Reducers map
    names to picklable callables Trajectory -> scalar or array; their sums
    and sums of squares are accumulated like the built-in panels.
    """
    if n_reps < 1:
        raise ConfigError("n_reps must be positive")
    names, f_values = _check_test_functions(tuple(test_functions),
                                            config.n_compartments)
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    workers = max(1, workers)
    if method == "auto":
        method = "kernel" if config.model.kernel_ready else "reference"
    if workers > 1 and not config.model.kernel_ready:
        logger.warning("callable rates: falling back to a single worker")
        workers = 1

    leaves = []
    lo = rep_offset
    end = rep_offset + n_reps
    while lo < end:
        hi = min(lo + leaf_size, end)
        leaves.append((lo, hi))
        lo = hi

    payloads = [(config, lo, hi, f_values, names, reducers, method,
                 rebuild_every) for lo, hi in leaves]
    if workers == 1 or len(leaves) == 1:
        results = [_leaf_worker(p) for p in payloads]
    else:
        ctx = get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            results = list(pool.map(_leaf_worker, payloads))

    sums, sumsqs, n_absorbed, max_total = _tree_reduce(results)
    return EnsembleResult(n_reps=n_reps, out_times=config.out_times.copy(),
                          n_compartments=config.n_compartments, sums=sums,
                          sumsqs=sumsqs, n_absorbed=n_absorbed,
                          max_total=max_total)
