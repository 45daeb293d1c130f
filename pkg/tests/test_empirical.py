from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hemaflow import (
    AtomicMeasure,
    ModelConfig,
    drift_terms,
    empirical_measure,
    ensemble,
    hat,
    identity,
    moment_bound_constants,
    parse_test_function,
    pathwise_identity_residual,
    qv_predicted,
    simulate,
    square,
    stem_only_counts,
)
from hemaflow.empirical import constant, discrete_derivative
from hemaflow.errors import ConfigError


def _config(model, n, horizon, seed=1, stem=None):
    counts = stem_only_counts(n, n if stem is None else stem)
    return ModelConfig(n, horizon, counts, model, seed=seed)


def test_measure_atoms_from_counts():
    # four compartments, counts (7,3,5,2): belt atoms at 1/2 and 3/4
    mu = empirical_measure(np.array([7, 3, 5, 2]))
    assert mu.locations.tolist() == [0.5, 0.75]
    assert mu.weights.tolist() == [3 / 4, 5 / 4]
    assert mu.mass == pytest.approx(2.0)
    assert mu.pair(lambda x: x) == pytest.approx(0.5 * 0.75 + 0.75 * 1.25)


def test_measure_validation():
    with pytest.raises(ValueError):
        AtomicMeasure(np.array([0.5]), np.array([-1.0]))
    with pytest.raises(ValueError):
        AtomicMeasure(np.array([1.5]), np.array([1.0]))
    with pytest.raises(ValueError):
        empirical_measure(np.array([1, 2]))


@given(a=st.floats(-3, 3), b=st.floats(-3, 3))
@settings(max_examples=50, deadline=None)
def test_pairing_is_linear(a, b):
    mu = empirical_measure(np.array([0, 1, 2, 3, 0]))
    lhs = mu.pair(lambda x: a * x + b * x * x)
    rhs = a * mu.pair(lambda x: x) + b * mu.pair(lambda x: x * x)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_discrete_derivative_value():
    dfh = discrete_derivative(lambda x: np.asarray(x) ** 2, 0.01)
    # ((0.31)^2 - (0.30)^2) / 0.01
    assert float(dfh(0.30)) == pytest.approx(0.61, rel=1e-12)
    with pytest.raises(ValueError):
        discrete_derivative(lambda x: x, 0.0)


def test_riemann_sum_approaches_integral():
    """<mu, x^2> for the all-ones state is a Riemann sum of x^2 missing
    both boundary compartments; the defect shrinks like 1/N."""
    errs = []
    for n in (100, 1000):
        mu = empirical_measure(np.ones(n, dtype=np.int64))
        errs.append(abs(mu.pair(lambda x: x * x) - 1.0 / 3.0))
    assert errs[0] < 5.05e-3
    assert errs[1] < 5.05e-4
    assert errs[0] / errs[1] == pytest.approx(10.0, rel=0.05)


def test_constant_function_closes_exactly(baseline_model):
    """For f = 1 the measure drift telescopes against the belt mass, so the
    residual is pure rounding noise."""
    cfg = _config(baseline_model, n=30, horizon=40.0, seed=6)
    traj = simulate(cfg, test_functions=(constant(1.0),))
    panel = drift_terms(traj, "constant")
    assert np.max(np.abs(panel.mf)) < 1e-12


def test_residuals_start_at_zero(feedback_model):
    cfg = _config(feedback_model, n=20, horizon=10.0, seed=8)
    traj = simulate(cfg, test_functions=(identity(),))
    panel = drift_terms(traj, "identity")
    assert panel.m1[0] == 0.0 and panel.mf[0] == 0.0 and panel.mn[0] == 0.0


def _mf_values(traj):
    return drift_terms(traj, "identity").mf


def test_mean_residuals_vanish(baseline_model):
    """Martingale residuals have zero mean at every time; checked at five
    times with a 3.5 standard-error band, 400 replicates."""
    n = 25
    cfg = ModelConfig(n, 30.0, stem_only_counts(n, n), baseline_model,
                      out_times=np.array([0.0, 5.0, 12.0, 20.0, 30.0]),
                      seed=40)
    res = ensemble(cfg, 400, test_functions=(identity(),),
                   reducers={"mf": _mf_values})
    mean = res.mean("mf")
    sem = res.sem("mf")
    for k in range(1, 5):
        assert abs(mean[k]) <= 3.5 * sem[k], (k, mean[k], sem[k])


def _mf_final(traj):
    return drift_terms(traj, "identity").mf[-1]


def _qv_final(traj):
    return qv_predicted(traj, "identity")["f"][-1]


def test_variance_matches_predicted_bracket(baseline_model):
    """Var M^f(T) should equal the mean predicted bracket; 20 percent
    agreement at 500 replicates."""
    n = 50
    cfg = ModelConfig(n, 30.0, stem_only_counts(n, n), baseline_model,
                      out_times=np.array([0.0, 30.0]), seed=41)
    res = ensemble(cfg, 500, test_functions=(identity(),),
                   reducers={"mfT": _mf_final, "qvT": _qv_final})
    var = float(res.var("mfT"))
    qv = float(res.mean("qvT"))
    assert qv > 0.0
    assert abs(var - qv) < 0.2 * qv


def test_cross_bracket_identities(baseline_model):
    cfg = _config(baseline_model, n=16, horizon=25.0, seed=11)
    traj = simulate(cfg, test_functions=(identity(), square()))
    qv = qv_predicted(traj, "square")
    acc = traj.accumulators
    n = traj.n_compartments
    # stem-vs-mature bracket is the belt-transit term, verbatim
    assert np.array_equal(qv["m1_mN"], -acc["I_m1"] / n)
    values = traj.test_values["square"]
    f1, f2 = values[n - 1], values[1]
    assert np.allclose(qv["m1_f"], (f1 - f2) * acc["I_m1"] / n,
                       rtol=0, atol=1e-15)
    # diagonal brackets are nonnegative and nondecreasing
    for key in ("m1", "mN", "f"):
        assert qv[key][0] == 0.0
        assert np.all(np.diff(qv[key]) >= -1e-15)


def test_pathwise_identity_small_sample(feedback_model, baseline_model):
    for model, seed in ((feedback_model, 1), (baseline_model, 2)):
        cfg = _config(model, n=24, horizon=35.0, seed=seed)
        traj = simulate(cfg)
        assert np.max(np.abs(pathwise_identity_residual(traj))) < 1e-9


def test_moment_bound_constants_formulas(baseline_model):
    n = 20
    cfg = _config(baseline_model, n, horizon=10.0)
    consts = moment_bound_constants(baseline_model, cfg)
    y0 = 1.0  # n stem cells, scaled
    assert consts["sup_mass"] == pytest.approx(y0 * math.exp(0.015 * 10.0))
    want = (y0 * math.exp(0.15) + (0.02 / 0.015) * math.exp(0.15)) / 0.02
    assert consts["int_compartment"] == pytest.approx(want)
    # with divisions off the stem term degrades to m_hat * X1(0) * T
    from hemaflow import constant_rate, make_model
    pure = make_model(constant_rate(0.0), constant_rate(0.02), 0.0)
    consts = moment_bound_constants(pure, _config(pure, n, horizon=10.0))
    assert consts["sup_mass"] == pytest.approx(1.0)
    assert consts["int_compartment"] == pytest.approx(
        (1.0 + 0.02 * 1.0 * 10.0) / 0.02)


def test_function_registry_errors(baseline_model):
    cfg = _config(baseline_model, n=10, horizon=5.0)
    traj = simulate(cfg, test_functions=(identity(),))
    with pytest.raises(KeyError):
        drift_terms(traj, "square")
    from hemaflow import TestFunction
    bad = TestFunction("identity",
                       lambda x: np.full_like(np.asarray(x, dtype=float),
                                              np.nan), 1.0, 1.0)
    with pytest.raises(ValueError):
        drift_terms(traj, bad)


def test_hat_function_and_parsing():
    f = hat(0.25)
    assert float(f(np.array([0.0]))[0]) == 1.0
    assert float(f(np.array([0.25]))[0]) == 0.0
    assert float(f(np.array([0.9]))[0]) == 0.0
    assert f.verify_bounds() == []
    assert parse_test_function("hat:0.5").lip_bound == pytest.approx(2.0)
    with pytest.raises(ConfigError):
        parse_test_function("hat:0")
    with pytest.raises(ConfigError):
        parse_test_function("wavelet")


def test_declared_bounds_are_spot_checked():
    from hemaflow import TestFunction
    lying = TestFunction("identity", lambda x: x, 0.1, 1.0)
    assert any("sup bound" in msg for msg in lying.verify_bounds())
