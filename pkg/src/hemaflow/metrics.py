"""Bounded-Lipschitz distance and the finite-N convergence harness.

d_BL(mu1, mu2) is the supremum of <mu1 - mu2, g> over the ball
sup|g| + Lip(g) <= 1.  On a uniform grid the supremum splits into an outer
scalar problem over the budget split lam (Lipschitz share) and an inner
chain problem: maximize sum w_j g_j subject to |g_j| <= 1 - lam and
|g_{j+1} - g_j| <= lam * dx.  The inner problem is solved exactly by a
concave piecewise-linear value recursion (compiled); the outer function of
lam is concave, so golden-section search locates the split.  Atoms are
snapped to the grid by linear mass splitting, which is the exact adjoint
of linear interpolation of g; on nested dyadic grids the distance can
therefore only grow with refinement.

A direct LP formulation (scipy HiGHS) of the same discrete problem is kept
alongside as an independent oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from . import _kernels
from .empirical import AtomicMeasure
from .errors import ConfigError
from .limit import DensityGrid, MeasureTrajectory, solve_upwind
from .rates import ModelConfig, RateModel, stem_only_counts
from .ssa import ensemble

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def snap_to_grid(measure: AtomicMeasure, n_cells: int) -> np.ndarray:
    """Node weights of the measure after linear mass splitting.

    An atom between nodes donates its weight to the two neighbors in
    proportion to proximity, so <snapped, g> equals <measure, g-linearly-
    interpolated> exactly.
    """
    w = np.zeros(n_cells + 1)
    if measure.locations.size:
        pos = measure.locations * n_cells
        j = np.minimum(np.floor(pos).astype(np.int64), n_cells - 1)
        frac = pos - j
        np.add.at(w, j, measure.weights * (1.0 - frac))
        np.add.at(w, j + 1, measure.weights * frac)
    return w


@dataclass
class BLWitness:
    """Optimal test function of one distance evaluation."""

    value: float
    lam: float
    nodes: np.ndarray
    g: np.ndarray


def _signed_weights(mu1: AtomicMeasure, mu2: AtomicMeasure,
                    n_cells: int) -> np.ndarray:
    w = snap_to_grid(mu1, n_cells) - snap_to_grid(mu2, n_cells)
    # canonical sign so the distance is bitwise symmetric in its arguments
    nz = np.nonzero(w)[0]
    if nz.size and w[nz[0]] < 0.0:
        w = -w
    return w


def bl_distance(mu1: AtomicMeasure, mu2: AtomicMeasure, *,
                n_cells: int = 512, return_witness: bool = False,
                lam_tol: float = 1e-12):
    """Bounded-Lipschitz distance after snapping both measures to a grid.

    Exact (to rounding) for the snapped pair; snapping itself perturbs each
    measure by at most mass * dx / 2 in BL.  n_cells controls that grid.
    """
    if n_cells < 1:
        raise ConfigError("need at least one cell")
    w = _signed_weights(mu1, mu2, n_cells)
    dx = 1.0 / n_cells
    scratch = np.empty(w.size)

    if not np.any(w):
        if return_witness:
            return 0.0, BLWitness(0.0, 0.0, np.arange(w.size) * dx,
                                  np.zeros(w.size))
        return 0.0

    def h(lam: float) -> float:
        return _kernels.bl_chain_dp(w, dx, lam, scratch, False)

    # concave in lam; track the best of all evaluations incl. endpoints
    best_lam = 0.0
    best_val = abs(float(w.sum()))  # lam = 0: constant g = +-1
    a, b = 0.0, 1.0
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc = h(c)
    fd = h(d)
    if fc > best_val:
        best_lam, best_val = c, fc
    if fd > best_val:
        best_lam, best_val = d, fd
    while b - a > lam_tol:
        if fc < fd:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = h(d)
            if fd > best_val:
                best_lam, best_val = d, fd
        else:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = h(c)
            if fc > best_val:
                best_lam, best_val = c, fc

    if not return_witness:
        return float(best_val)
    g = np.empty(w.size)
    val = _kernels.bl_chain_dp(w, dx, best_lam, g, True)
    if best_lam == 0.0:
        g[:] = 1.0 if w.sum() >= 0 else -1.0
        val = best_val
    return float(max(best_val, val)), BLWitness(
        float(max(best_val, val)), float(best_lam),
        np.arange(w.size) * dx, g)


def bl_distance_lp(mu1: AtomicMeasure, mu2: AtomicMeasure, *,
                   n_cells: int = 512) -> float:
    """Same discrete problem as bl_distance, solved as one LP (HiGHS).

    Variables (g_0..g_G, S, L): maximize w.g subject to |g_j| <= S,
    |g_{j+1} - g_j| <= L dx, S + L <= 1, S, L >= 0.  Independent of the
    recursion in every way that matters, which is the point.
    """
    w = _signed_weights(mu1, mu2, n_cells)
    g_n = w.size
    dx = 1.0 / n_cells
    n_var = g_n + 2  # g..., S, L
    i_s = g_n
    i_l = g_n + 1
    rows = []
    rhs = []
    for j in range(g_n):
        row = np.zeros(n_var)
        row[j] = 1.0
        row[i_s] = -1.0
        rows.append(row)
        rhs.append(0.0)
        row = np.zeros(n_var)
        row[j] = -1.0
        row[i_s] = -1.0
        rows.append(row)
        rhs.append(0.0)
    for j in range(g_n - 1):
        row = np.zeros(n_var)
        row[j + 1] = 1.0
        row[j] = -1.0
        row[i_l] = -dx
        rows.append(row)
        rhs.append(0.0)
        row = np.zeros(n_var)
        row[j + 1] = -1.0
        row[j] = 1.0
        row[i_l] = -dx
        rows.append(row)
        rhs.append(0.0)
    row = np.zeros(n_var)
    row[i_s] = 1.0
    row[i_l] = 1.0
    rows.append(row)
    rhs.append(1.0)

    cost = np.zeros(n_var)
    cost[:g_n] = -w
    bounds = [(None, None)] * g_n + [(0.0, None), (0.0, None)]
    res = linprog(cost, A_ub=np.array(rows), b_ub=np.array(rhs),
                  bounds=bounds, method="highs")
    if not res.success:
        raise RuntimeError(f"BL reference LP failed: {res.message}")
    return float(-res.fun)


def bl_bounds(mu1: AtomicMeasure, mu2: AtomicMeasure) -> tuple:
    """A-priori envelope |mass1 - mass2| <= d_BL <= mass1 + mass2."""
    m1, m2 = mu1.mass, mu2.mass
    return abs(m1 - m2), m1 + m2


def _mean_measure(n: int, belt_count_mean: np.ndarray) -> AtomicMeasure:
    """Replicate-averaged empirical measure from mean belt counts."""
    i = np.arange(2, n)
    return AtomicMeasure(i / n, np.asarray(belt_count_mean) / n)


@dataclass
class ConvergenceReport:
    """BL gap between averaged finite-N profiles and the limit, over N.

    distances holds d_BL(mean empirical measure at T, limit profile at T);
    sems the spread of the same distance across disjoint replicate batches.
    stem_errors and mature_errors track |mean X1/N - a(T)| and
    |mean XN/N - z(T)| (nan when the reference supplies no boundary path).
    """

    n_values: np.ndarray
    distances: np.ndarray
    sems: np.ndarray
    stem_errors: np.ndarray
    mature_errors: np.ndarray
    n_reps: int
    horizon: float
    bl_cells: int

    def ratios(self) -> np.ndarray:
        return self.distances[1:] / self.distances[:-1]

    def monotone_decreasing(self, slack: float = 0.0) -> bool:
        return bool(np.all(np.diff(self.distances) <= slack))


def convergence_study(model: RateModel, n_values, *, horizon: float,
                      n_reps: int, a0: float = 1.0, z0: float = 0.0,
                      initial_builder=None, reference=None,
                      ref_cells: int = 1000, bl_cells: int = 512,
                      base_seed: int = 0, workers: int | None = None,
                      n_batches: int = 10) -> ConvergenceReport:
    """Compare replicate-averaged finite-N states to the limit profile.

    For each N an ensemble of n_reps replicates runs to the horizon from
    initial_builder(N) cells (default: N stem cells, the scaled unit
    initial condition matching a0 = 1).  The belt counts are averaged over
    replicates first; the distance reported is d_BL of that mean measure to
    the reference profile, and the quoted sem is the batch spread (the
    n_reps replicates split into n_batches disjoint batches, one mean
    measure and one distance per batch).  reference may be a DensityGrid, a
    MeasureTrajectory, an AtomicMeasure, or None to solve the limit on
    ref_cells cells here.
    """
    n_values = np.asarray(sorted(int(n) for n in n_values))
    if initial_builder is None:
        def initial_builder(n):
            return stem_only_counts(n, n)

    if reference is None:
        reference = solve_upwind(model, n_cells=ref_cells, horizon=horizon,
                                 a0=a0, z0=z0)
    a_ref = z_ref = float("nan")
    if isinstance(reference, (DensityGrid, MeasureTrajectory)):
        ref_mu = reference.measure(-1)
        a_ref = float(reference.a_series[-1])
        z_ref = float(reference.z_series[-1])
    elif isinstance(reference, AtomicMeasure):
        ref_mu = reference
    else:
        raise TypeError("unsupported reference type")

    n_batches = max(1, min(n_batches, n_reps))
    edges = np.linspace(0, n_reps, n_batches + 1).astype(int)
    dists = np.empty(n_values.size)
    sems = np.empty(n_values.size)
    stem_err = np.empty(n_values.size)
    mature_err = np.empty(n_values.size)
    for i, n in enumerate(n_values):
        config = ModelConfig(
            n_compartments=int(n), horizon=horizon,
            initial_counts=initial_builder(int(n)), model=model,
            out_times=np.array([0.0, horizon]), seed=base_seed + i)
        belt_sum = np.zeros(int(n) - 2)
        x1_sum = 0.0
        xn_sum = 0.0
        batch_d = np.empty(n_batches)
        for b in range(n_batches):
            lo, hi = int(edges[b]), int(edges[b + 1])
            res = ensemble(config, hi - lo, rep_offset=lo, workers=workers)
            belt_b = res.sums["belt"][-1]
            belt_sum += belt_b
            x1_sum += float(res.sums["x1"][-1])
            xn_sum += float(res.sums["xn"][-1])
            batch_d[b] = bl_distance(_mean_measure(int(n), belt_b / (hi - lo)),
                                     ref_mu, n_cells=bl_cells)
        dists[i] = bl_distance(_mean_measure(int(n), belt_sum / n_reps),
                               ref_mu, n_cells=bl_cells)
        sems[i] = (float(np.std(batch_d, ddof=1)) / math.sqrt(n_batches)
                   if n_batches > 1 else float("nan"))
        stem_err[i] = abs(x1_sum / n_reps - a_ref)
        mature_err[i] = abs(xn_sum / n_reps - z_ref)
    return ConvergenceReport(n_values=n_values, distances=dists, sems=sems,
                             stem_errors=stem_err, mature_errors=mature_err,
                             n_reps=n_reps, horizon=float(horizon),
                             bl_cells=bl_cells)
