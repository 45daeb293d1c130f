"""Compiled kernels.

Everything here is numba-jitted and deliberately flat: scalars, 1-d/2-d
arrays, no objects.  The RNG and rate evaluation have pure-python twins
(`_rng.Xoshiro`, the `RateSpec` call, and the reference stepper in `ssa`)
that are held to exact agreement by tests; any edit here must keep the
operation order of those twins.
"""

from __future__ import annotations

import math

import numba
import numpy as np
from numba import njit

U64 = np.uint64
_GAMMA = U64(0x9E3779B97F4A7C15)
_MIX1 = U64(0xBF58476D1CE4E5B9)
_MIX2 = U64(0x94D049BB133111EB)
_INV53 = 1.0 / 9007199254740992.0


@njit(cache=True)
def xo_derive(base_seed, stream, out):
    """Fill out[0:4] with the replicate state; twin of _rng.derive_state."""
    s = base_seed ^ ((U64(stream) + U64(1)) * _GAMMA)
    for i in range(4):
        s = s + _GAMMA
        z = s
        z = (z ^ (z >> U64(30))) * _MIX1
        z = (z ^ (z >> U64(27))) * _MIX2
        out[i] = z ^ (z >> U64(31))
    if out[0] | out[1] | out[2] | out[3] == U64(0):
        out[0] = _GAMMA


@njit(cache=True)
def xo_next(s):
    """One xoshiro256** draw; mutates the 4-word state in place."""
    x = s[1] * U64(5)
    result = ((x << U64(7)) | (x >> U64(57))) * U64(9)
    t = s[1] << U64(17)
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = (s[3] << U64(45)) | (s[3] >> U64(19))
    return result


@njit(cache=True)
def xo_double(s):
    return (xo_next(s) >> U64(11)) * _INV53


@njit(cache=True)
def rate_scalar(code, p, x, z):
    """Clamped family evaluation; twin of RateSpec.__call__."""
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
    ix = int(gx)
    if ix > nx - 2:
        ix = nx - 2
    iz = int(gz)
    if iz > nz - 2:
        iz = nz - 2
    wx = gx - ix
    wz = gz - iz
    base = 6 + ix * nz + iz
    t00 = p[base]
    t01 = p[base + 1]
    t10 = p[base + nz]
    t11 = p[base + nz + 1]
    return (1.0 - wx) * ((1.0 - wz) * t00 + wz * t01) + wx * ((1.0 - wz) * t10 + wz * t11)


@njit(cache=True)
def _kadd(sums, comps, i, term):
    # Kahan update of slot i
    y = term - comps[i]
    t = sums[i] + y
    comps[i] = (t - sums[i]) - y
    sums[i] = t


# The SSA helpers below are module-level functions on purpose: njit closures
# capturing kernel state miscompiled here (locals updated on both sides of a
# closure call site forked into disjoint SSA chains), so every helper takes
# its state explicitly.

@njit(cache=True)
def _ssa_rates(r_code, r_params, m_code, m_params, z, r_arr, m_arr, inv_n):
    # rates at the compartment midlines x_i = i/n, laid out 0-based
    for j in range(r_arr.shape[0]):
        xj = (j + 1) * inv_n
        r_arr[j] = rate_scalar(r_code, r_params, xj, z)
        m_arr[j] = rate_scalar(m_code, m_params, xj, z)


@njit(cache=True)
def _ssa_rebuild(counts, r_arr, m_arr, f_values, df, fm1sq, prop,
                 s_f, s_fr, s_dfm, s_f3, s_f4, srv, lamv, death_rate):
    n = counts.shape[0]
    nf = f_values.shape[0]
    n_f = float(n)
    total_rate = 0.0
    prop[0] = (r_arr[0] + m_arr[0]) * counts[0]
    total_rate += prop[0]
    sr = 0.0
    for q in range(nf):
        s_f[q] = 0.0
        s_fr[q] = 0.0
        s_dfm[q] = 0.0
        s_f3[q] = 0.0
        s_f4[q] = 0.0
    for j in range(1, n - 1):
        prop[j] = (r_arr[j] + n_f * m_arr[j]) * counts[j]
        total_rate += prop[j]
        cj = counts[j]
        sr += r_arr[j] * cj
        for q in range(nf):
            s_f[q] += f_values[q, j] * cj
            s_fr[q] += f_values[q, j] * r_arr[j] * cj
            s_dfm[q] += df[q, j] * m_arr[j] * cj
            s_f3[q] += fm1sq[q, j] * r_arr[j] * cj
            s_f4[q] += df[q, j] * df[q, j] * m_arr[j] * cj
    prop[n - 1] = death_rate * counts[n - 1]
    total_rate += prop[n - 1]
    srv[0] = sr
    lamv[0] = total_rate


@njit(cache=True)
def _ssa_advance(dtc, counts, r_arr, m_arr, srv,
                 s_f, s_fr, s_dfm, s_f3, s_f4,
                 acc, acc_c, facc, facc_c, inv_n):
    if dtc <= 0.0:
        return
    n = counts.shape[0]
    nf = facc.shape[0]
    _kadd(acc, acc_c, 0, r_arr[0] * counts[0] * inv_n * dtc)
    _kadd(acc, acc_c, 1, m_arr[0] * counts[0] * inv_n * dtc)
    _kadd(acc, acc_c, 2, srv[0] * inv_n * dtc)
    _kadd(acc, acc_c, 3, m_arr[n - 2] * counts[n - 2] * dtc)
    _kadd(acc, acc_c, 4, counts[n - 1] * inv_n * dtc)
    for q in range(nf):
        _kadd(facc[q], facc_c[q], 0, s_f[q] * inv_n * dtc)
        _kadd(facc[q], facc_c[q], 1, s_fr[q] * inv_n * dtc)
        _kadd(facc[q], facc_c[q], 2, s_dfm[q] * inv_n * dtc)
        _kadd(facc[q], facc_c[q], 3, s_f3[q] * inv_n * dtc)
        _kadd(facc[q], facc_c[q], 4, s_f4[q] * inv_n * dtc)


@njit(cache=True)
def _ssa_snapshot(k, counts, acc, acc_c, facc, facc_c, counters,
                  x1_out, belt_out, xn_out, acc_out, f_out, counter_out,
                  inv_n):
    n = counts.shape[0]
    nf = facc.shape[0]
    x1_out[k] = counts[0] * inv_n
    for j in range(1, n - 1):
        belt_out[k, j - 1] = counts[j]
    xn_out[k] = counts[n - 1] * inv_n
    for i in range(5):
        acc_out[k, i] = acc[i] + acc_c[i]
    for q in range(nf):
        for i in range(5):
            f_out[k, q, i] = facc[q, i] + facc_c[q, i]
    for i in range(6):
        counter_out[k, i] = counters[i]


@njit(cache=True)
def ssa_kernel(n_comp, horizon,
               counts0,
               r_code, r_params, m_code, m_params, death_rate, z_dependent,
               out_times, f_values,
               rng_state, rebuild_every,
               x1_out, belt_out, xn_out,
               acc_out, f_out, counter_out,
               final_counts, int_x, first_entry):
    """Exact direct-method simulation of one replicate.

    Event selection uses a single compound uniform against cached
    propensities; all time integrals advance in exact piecewise-constant
    chunks with Kahan compensation.  Returns
    (absorption_time, n_events, max_total).
    """
    n = n_comp
    inv_n = 1.0 / n
    n_f = float(n)
    n_out = out_times.shape[0]
    nf = f_values.shape[0]

    counts = counts0.copy()
    t = 0.0  # time of last applied event

    # Loop-carried scalars with more than one assignment site in the event
    # loop live in one-element arrays.  As plain locals the jit forked them
    # into disjoint per-branch copies (bad phi merge); memory slots cannot be
    # forked.  t_int is the time integrals are committed up to.
    t_int = np.zeros(1)
    out_idx = np.zeros(1, dtype=np.int64)
    total = np.zeros(1, dtype=np.int64)
    max_total = np.zeros(1, dtype=np.int64)
    esr = np.zeros(1, dtype=np.int64)  # events since the last full rebuild

    r_arr = np.empty(n)
    m_arr = np.empty(n)
    z = counts[n - 1] * inv_n
    _ssa_rates(r_code, r_params, m_code, m_params, z, r_arr, m_arr, inv_n)

    # per-test-function node data over the belt columns 1..n-2
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
    # boxed so the rebuild helper can write them in place
    srv = np.zeros(1)   # srv[0]: sum over the belt of r * counts
    lamv = np.zeros(1)  # lamv[0]: total propensity

    _ssa_rebuild(counts, r_arr, m_arr, f_values, df, fm1sq, prop,
                 s_f, s_fr, s_dfm, s_f3, s_f4, srv, lamv, death_rate)

    # accumulator slots: 0 I_r1, 1 I_m1, 2 I_mur, 3 I_mN1, 4 I_XN
    acc = np.zeros(5)
    acc_c = np.zeros(5)
    facc = np.zeros((nf, 5))
    facc_c = np.zeros((nf, 5))

    # counters: 0 div_1, 1 div_belt, 2 diff_1, 3 diff_belt, 4 diff_last, 5 death
    counters = np.zeros(6, dtype=np.int64)
    last_touch = np.zeros(n)
    for j in range(n):
        first_entry[j] = np.nan
        if counts[j] > 0:
            first_entry[j] = 0.0
    for j in range(n):
        total[0] += counts[j]
    max_total[0] = total[0]
    absorption = np.nan
    n_events = np.int64(0)

    while True:
        # integer-exact liveness: something can fire iff a pre-mature cell
        # exists (m > 0 everywhere) or the death channel is active
        alive = (total[0] - counts[n - 1]) > 0 or \
                (death_rate > 0.0 and counts[n - 1] > 0)
        if alive and lamv[0] <= 0.0:
            # incremental sum drifted; restore exactly
            _ssa_rebuild(counts, r_arr, m_arr, f_values, df, fm1sq, prop,
                         s_f, s_fr, s_dfm, s_f3, s_f4, srv, lamv, death_rate)
            if lamv[0] <= 0.0:
                alive = False
        if alive:
            u1 = xo_double(rng_state)
            t_next = t + (-math.log(1.0 - u1) / lamv[0])
        else:
            if absorption != absorption:
                absorption = t
            t_next = math.inf

        while out_idx[0] < n_out and out_times[out_idx[0]] < t_next:
            _ssa_advance(out_times[out_idx[0]] - t_int[0], counts, r_arr,
                         m_arr, srv, s_f, s_fr, s_dfm, s_f3, s_f4,
                         acc, acc_c, facc, facc_c, inv_n)
            t_int[0] = out_times[out_idx[0]]
            _ssa_snapshot(out_idx[0], counts, acc, acc_c, facc, facc_c,
                          counters, x1_out, belt_out, xn_out, acc_out,
                          f_out, counter_out, inv_n)
            out_idx[0] += 1

        if t_next > horizon:
            _ssa_advance(horizon - t_int[0], counts, r_arr, m_arr,
                         srv, s_f, s_fr, s_dfm, s_f3, s_f4,
                         acc, acc_c, facc, facc_c, inv_n)
            t_int[0] = horizon
            break

        _ssa_advance(t_next - t_int[0], counts, r_arr, m_arr,
                     srv, s_f, s_fr, s_dfm, s_f3, s_f4,
                     acc, acc_c, facc, facc_c, inv_n)
        t_int[0] = t_next
        t = t_next

        # select event: compound uniform over cached propensities
        u2 = xo_double(rng_state)
        target = u2 * lamv[0]
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
            # float drift pushed target past the cached total; clamp to the
            # last live compartment and force its differentiation branch
            j_sel = j_pos
            rem = prop[j_sel]
        else:
            rem = target - (cum - prop[j_sel])

        if j_sel == 0:
            int_x[0] += counts[0] * (t - last_touch[0])
            last_touch[0] = t
            if rem < r_arr[0] * counts[0]:
                counts[0] += 1
                counters[0] += 1
                total[0] += 1
                if total[0] > max_total[0]:
                    max_total[0] = total[0]
            else:
                int_x[1] += counts[1] * (t - last_touch[1])
                last_touch[1] = t
                counts[0] -= 1
                counts[1] += 1
                counters[2] += 1
                if counts[1] == 1 and first_entry[1] != first_entry[1]:
                    first_entry[1] = t
                srv[0] += r_arr[1]
                for q in range(nf):
                    s_f[q] += f_values[q, 1]
                    s_fr[q] += f_values[q, 1] * r_arr[1]
                    s_dfm[q] += df[q, 1] * m_arr[1]
                    s_f3[q] += fm1sq[q, 1] * r_arr[1]
                    s_f4[q] += df[q, 1] * df[q, 1] * m_arr[1]
                old = prop[1]
                prop[1] = (r_arr[1] + n_f * m_arr[1]) * counts[1]
                lamv[0] += prop[1] - old
            old = prop[0]
            prop[0] = (r_arr[0] + m_arr[0]) * counts[0]
            lamv[0] += prop[0] - old
        elif j_sel == n - 1:
            # death of a mature cell
            int_x[n - 1] += counts[n - 1] * (t - last_touch[n - 1])
            last_touch[n - 1] = t
            counts[n - 1] -= 1
            counters[5] += 1
            total[0] -= 1
            z = counts[n - 1] * inv_n
            old = prop[n - 1]
            prop[n - 1] = death_rate * counts[n - 1]
            lamv[0] += prop[n - 1] - old
            if z_dependent:
                _ssa_rates(r_code, r_params, m_code, m_params, z,
                           r_arr, m_arr, inv_n)
                _ssa_rebuild(counts, r_arr, m_arr, f_values, df, fm1sq,
                             prop, s_f, s_fr, s_dfm, s_f3, s_f4,
                             srv, lamv, death_rate)
        else:
            int_x[j_sel] += counts[j_sel] * (t - last_touch[j_sel])
            last_touch[j_sel] = t
            if rem < r_arr[j_sel] * counts[j_sel]:
                counts[j_sel] += 1
                counters[1] += 1
                total[0] += 1
                if total[0] > max_total[0]:
                    max_total[0] = total[0]
                srv[0] += r_arr[j_sel]
                for q in range(nf):
                    s_f[q] += f_values[q, j_sel]
                    s_fr[q] += f_values[q, j_sel] * r_arr[j_sel]
                    s_dfm[q] += df[q, j_sel] * m_arr[j_sel]
                    s_f3[q] += fm1sq[q, j_sel] * r_arr[j_sel]
                    s_f4[q] += df[q, j_sel] * df[q, j_sel] * m_arr[j_sel]
                old = prop[j_sel]
                prop[j_sel] = (r_arr[j_sel] + n_f * m_arr[j_sel]) * counts[j_sel]
                lamv[0] += prop[j_sel] - old
            else:
                jd = j_sel + 1
                int_x[jd] += counts[jd] * (t - last_touch[jd])
                last_touch[jd] = t
                counts[j_sel] -= 1
                counts[jd] += 1
                if counts[jd] == 1 and first_entry[jd] != first_entry[jd]:
                    first_entry[jd] = t
                srv[0] -= r_arr[j_sel]
                for q in range(nf):
                    s_f[q] -= f_values[q, j_sel]
                    s_fr[q] -= f_values[q, j_sel] * r_arr[j_sel]
                    s_dfm[q] -= df[q, j_sel] * m_arr[j_sel]
                    s_f3[q] -= fm1sq[q, j_sel] * r_arr[j_sel]
                    s_f4[q] -= df[q, j_sel] * df[q, j_sel] * m_arr[j_sel]
                old = prop[j_sel]
                prop[j_sel] = (r_arr[j_sel] + n_f * m_arr[j_sel]) * counts[j_sel]
                lamv[0] += prop[j_sel] - old
                if jd == n - 1:
                    counters[4] += 1
                    z = counts[n - 1] * inv_n
                    old = prop[n - 1]
                    prop[n - 1] = death_rate * counts[n - 1]
                    lamv[0] += prop[n - 1] - old
                    if z_dependent:
                        _ssa_rates(r_code, r_params, m_code, m_params, z,
                                   r_arr, m_arr, inv_n)
                        _ssa_rebuild(counts, r_arr, m_arr, f_values, df,
                                     fm1sq, prop, s_f, s_fr, s_dfm, s_f3,
                                     s_f4, srv, lamv, death_rate)
                else:
                    counters[3] += 1
                    srv[0] += r_arr[jd]
                    for q in range(nf):
                        s_f[q] += f_values[q, jd]
                        s_fr[q] += f_values[q, jd] * r_arr[jd]
                        s_dfm[q] += df[q, jd] * m_arr[jd]
                        s_f3[q] += fm1sq[q, jd] * r_arr[jd]
                        s_f4[q] += df[q, jd] * df[q, jd] * m_arr[jd]
                    old = prop[jd]
                    prop[jd] = (r_arr[jd] + n_f * m_arr[jd]) * counts[jd]
                    lamv[0] += prop[jd] - old

        n_events += 1
        esr[0] += 1
        if esr[0] >= rebuild_every:
            _ssa_rebuild(counts, r_arr, m_arr, f_values, df, fm1sq, prop,
                         s_f, s_fr, s_dfm, s_f3, s_f4, srv, lamv, death_rate)
            esr[0] = 0

        # an output time exactly at the event time reports the new state
        while out_idx[0] < n_out and out_times[out_idx[0]] == t:
            _ssa_snapshot(out_idx[0], counts, acc, acc_c, facc, facc_c,
                          counters, x1_out, belt_out, xn_out, acc_out,
                          f_out, counter_out, inv_n)
            out_idx[0] += 1

    for j in range(n):
        int_x[j] += counts[j] * (horizon - last_touch[j])
        final_counts[j] = counts[j]
    return absorption, n_events, max_total[0]


@njit(cache=True)
def upwind_kernel(r_code, r_params, m_code, m_params, death_rate,
                  n_cells, dt, n_steps, z_dependent, hold_stem,
                  a0, z0, u_init, save_steps,
                  u_out, a_out, z_out, uright_out, ledger_out, clip_tol):
    """First-order upwind stepper for the limit density.

    Per-step mass ledger (checked before clipping):
    delta(a + dx*sum(u) + z) == dt * (r(0,z)a + dx*sum(r u) - d z), exact up
    to rounding by construction.  Returns (max_resid, n_clipped, fail) with
    fail 0 ok, 1 negative value beyond tolerance, 2 non-finite state.
    """
    J = n_cells
    dx = 1.0 / J
    u = u_init.copy()
    a = a0
    z = z0
    u[0] = a
    r_nd = np.empty(J + 1)
    m_nd = np.empty(J + 1)
    for j in range(J + 1):
        xj = j * dx
        r_nd[j] = rate_scalar(r_code, r_params, xj, z)
        m_nd[j] = rate_scalar(m_code, m_params, xj, z)

    n_save = save_steps.shape[0]
    k = 0
    if n_save > 0 and save_steps[0] == 0:
        for j in range(J + 1):
            u_out[0, j] = u[j]
        a_out[0] = a
        z_out[0] = z
        uright_out[0] = u[J]
        ledger_out[0] = 0.0
        k = 1

    max_resid = 0.0
    window_max = 0.0
    n_clip = 0
    fail = 0
    umax = 0.0
    for j in range(J + 1):
        if u[j] > umax:
            umax = u[j]

    for step in range(1, n_steps + 1):
        if z_dependent:
            for j in range(J + 1):
                xj = j * dx
                r_nd[j] = rate_scalar(r_code, r_params, xj, z)
                m_nd[j] = rate_scalar(m_code, m_params, xj, z)
        mass_old = 0.0
        ru_sum = 0.0
        for j in range(1, J + 1):
            mass_old += u[j]
            ru_sum += r_nd[j] * u[j]
        mass_old *= dx
        ru_sum *= dx
        uj_old = u[J]
        a_old = a
        z_old = z

        for j in range(J, 0, -1):
            u[j] = u[j] - (dt / dx) * (m_nd[j] * u[j] - m_nd[j - 1] * u[j - 1]) \
                + dt * r_nd[j] * u[j]
        if not hold_stem:
            a = a + dt * (r_nd[0] - m_nd[0]) * a
        z = z + dt * (m_nd[J] * uj_old - death_rate * z_old)
        u[0] = a

        mass_new = 0.0
        for j in range(1, J + 1):
            mass_new += u[j]
        mass_new *= dx
        if not math.isfinite(mass_new) or not math.isfinite(a) or not math.isfinite(z):
            fail = 2
            break

        if hold_stem:
            source = m_nd[0] * a_old + ru_sum - death_rate * z_old
            led_old = mass_old + z_old
            led_new = mass_new + z
        else:
            source = r_nd[0] * a_old + ru_sum - death_rate * z_old
            led_old = a_old + mass_old + z_old
            led_new = a + mass_new + z
        scale = abs(led_new)
        if scale < 1.0:
            scale = 1.0
        resid = abs((led_new - led_old) - dt * source) / scale
        if resid > max_resid:
            max_resid = resid
        if resid > window_max:
            window_max = resid

        for j in range(1, J + 1):
            if u[j] > umax:
                umax = u[j]
        thr = clip_tol * (umax if umax > 1.0 else 1.0)
        for j in range(1, J + 1):
            if u[j] < 0.0:
                if u[j] < -thr:
                    fail = 1
                u[j] = 0.0
                n_clip += 1
        if fail == 1:
            break

        if k < n_save and save_steps[k] == step:
            for j in range(J + 1):
                u_out[k, j] = u[j]
            a_out[k] = a
            z_out[k] = z
            # integral-form boundary readout, equals the pre-step last cell
            uright_out[k] = (m_nd[0] * a_old + ru_sum
                             - (mass_new - mass_old) / dt) / m_nd[J]
            ledger_out[k] = window_max
            window_max = 0.0
            k += 1

    return max_resid, n_clip, fail


@njit(cache=True)
def flow_rk4_kernel(m_code, m_params, z_times, z_vals, t0, span, n, x0):
    """Classical RK4 for dx/du = m(x, z(u)) over [t0, t0 + span]."""
    y = x0.copy()
    h = span / n
    for i in range(n):
        u = t0 + i * h
        zu = np.interp(u, z_times, z_vals)
        zm = np.interp(u + 0.5 * h, z_times, z_vals)
        ze = np.interp(u + h, z_times, z_vals)
        for j in range(y.shape[0]):
            k1 = rate_scalar(m_code, m_params, y[j], zu)
            k2 = rate_scalar(m_code, m_params, y[j] + 0.5 * h * k1, zm)
            k3 = rate_scalar(m_code, m_params, y[j] + 0.5 * h * k2, zm)
            k4 = rate_scalar(m_code, m_params, y[j] + h * k3, ze)
            y[j] = y[j] + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return y


@njit(cache=True)
def bl_chain_dp(w, dx, lam, witness, want_witness):
    """Inner maximization of sum(w_j g_j) over the chain polytope.

    Constraints: |g_j| <= 1 - lam and |g_{j+1} - g_j| <= lam * dx.  The
    value function in g is concave piecewise-linear; it is propagated as a
    breakpoint list through window-max (apex spread), box clipping, and the
    linear node term.  Witness extraction walks the stored apex intervals
    backward.
    """
    G = w.shape[0]
    S = 1.0 - lam
    c = lam * dx
    if S <= 0.0:
        if want_witness:
            for j in range(G):
                witness[j] = 0.0
        return 0.0

    cap = 4 * G + 16
    xs = np.empty(cap)
    vs = np.empty(cap)
    xs_t = np.empty(cap)
    vs_t = np.empty(cap)
    apex_lo = np.empty(G)
    apex_hi = np.empty(G)

    xs[0] = -S
    vs[0] = -S * w[0]
    xs[1] = S
    vs[1] = S * w[0]
    m = 2

    # apex of the current function
    vmax = vs[0]
    for i in range(1, m):
        if vs[i] > vmax:
            vmax = vs[i]
    i1 = 0
    while vs[i1] != vmax:
        i1 += 1
    i2 = i1
    while i2 + 1 < m and vs[i2 + 1] == vmax:
        i2 += 1
    apex_lo[0] = xs[i1]
    apex_hi[0] = xs[i2]

    for j in range(1, G):
        if c > 0.0:
            # window max: spread the apex by +-c
            mt = 0
            for i in range(i1):
                xs_t[mt] = xs[i] - c
                vs_t[mt] = vs[i]
                mt += 1
            xs_t[mt] = xs[i1] - c
            vs_t[mt] = vmax
            mt += 1
            xs_t[mt] = xs[i2] + c
            vs_t[mt] = vmax
            mt += 1
            for i in range(i2 + 1, m):
                xs_t[mt] = xs[i] + c
                vs_t[mt] = vs[i]
                mt += 1
            # clip to [-S, S]; the spread domain always covers it
            mo = 0
            p = 0
            while xs_t[p + 1] <= -S:
                p += 1
            if xs_t[p] == -S:
                xs[mo] = -S
                vs[mo] = vs_t[p]
            else:
                frac = (-S - xs_t[p]) / (xs_t[p + 1] - xs_t[p])
                xs[mo] = -S
                vs[mo] = vs_t[p] + frac * (vs_t[p + 1] - vs_t[p])
            mo += 1
            while p + 1 < mt and xs_t[p + 1] < S:
                p += 1
                xs[mo] = xs_t[p]
                vs[mo] = vs_t[p]
                mo += 1
            if xs_t[p] == S:
                m = mo
            else:
                frac = (S - xs_t[p]) / (xs_t[p + 1] - xs_t[p])
                xs[mo] = S
                vs[mo] = vs_t[p] + frac * (vs_t[p + 1] - vs_t[p])
                m = mo + 1
        # add the linear node term
        for i in range(m):
            vs[i] += w[j] * xs[i]
        vmax = vs[0]
        for i in range(1, m):
            if vs[i] > vmax:
                vmax = vs[i]
        i1 = 0
        while vs[i1] != vmax:
            i1 += 1
        i2 = i1
        while i2 + 1 < m and vs[i2 + 1] == vmax:
            i2 += 1
        apex_lo[j] = xs[i1]
        apex_hi[j] = xs[i2]

    if want_witness:
        g = 0.5 * (apex_lo[G - 1] + apex_hi[G - 1])
        witness[G - 1] = g
        for j in range(G - 2, -1, -1):
            lo = g - c
            hi = g + c
            if apex_lo[j] > hi:
                g = hi
            elif apex_hi[j] < lo:
                g = lo
            else:
                g = apex_lo[j] if apex_lo[j] > lo else lo
            witness[j] = g
    return vmax
