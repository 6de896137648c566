import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from cyclofeat.errors import DegenerateGroupingError, InvalidParameterError, RankDeficientError
from cyclofeat.regression import (
    INTERCEPT,
    DesignMatrix,
    TableRow,
    TableSection,
    backward_eliminate,
    fit,
    fit_lmm,
    fit_ols,
    intercept_report,
    reml_profile,
    render_table,
    table_section,
    write_intercept_csv,
    write_intercept_plot_data,
    write_model_json,
)
from oracles import best_subset_aic, gls_beta, ols_aic


def design(P, y, groups=None, names=None):
    P = np.asarray(P, float)
    names = names or [f"x{i + 1}" for i in range(P.shape[1] if P.ndim == 2 else 1)]
    return DesignMatrix.from_predictors(P, names, y, groups)


def grouped_data(rng, n_groups=7, per=100, sigma_b=1.0, shifts=None, beta=(0.5, 1.0, -0.5)):
    g = np.repeat(np.arange(n_groups), per)
    P = rng.normal(size=(g.size, len(beta) - 1))
    b = rng.normal(0, sigma_b, n_groups) if shifts is None else np.asarray(shifts, float)
    y = beta[0] + P @ np.asarray(beta[1:]) + b[g] + rng.normal(size=g.size)
    return P, y, g


# -- DesignMatrix -------------------------------------------------------------

def test_design_validation():
    with pytest.raises(InvalidParameterError):
        design(np.zeros((3, 3)), np.zeros(3))
    with pytest.raises(InvalidParameterError):
        design(np.zeros((5, 1)), np.zeros(4))
    with pytest.raises(InvalidParameterError):
        design([[np.nan], [1], [2]], [1, 2, 3])
    with pytest.raises(InvalidParameterError):
        design(np.zeros((4, 1)), np.zeros(4)).drop(INTERCEPT)


def test_group_relabelling():
    d = design(np.arange(6.0)[:, None], np.arange(6.0), groups=[7, 3, 7, 5, 3, 5])
    assert d.group_labels == (3, 5, 7)
    assert d.group_ids.tolist() == [2, 0, 2, 1, 0, 1]
    assert d.without_groups().group_ids is None


# -- OLS ----------------------------------------------------------------------

def test_noiseless_recovery():
    rng = np.random.default_rng(0)
    P = rng.normal(size=(50, 2))
    m = fit_ols(design(P, 1 + 2 * P[:, 0] - 3 * P[:, 1]))
    assert np.allclose(m.coefficients, [1, 2, -3], atol=1e-8)
    assert m.rss <= 1e-16
    assert np.all((0 <= m.p_values) & (m.p_values <= 1))
    assert math.isfinite(m.aic)


def test_duplicate_column_names_offender():
    x = np.arange(10.0)
    with pytest.raises(RankDeficientError) as exc:
        fit_ols(design(np.column_stack([x, x]), x ** 2))
    assert exc.value.column == "x2"


def test_ols_matches_scipy_linregress():
    rng = np.random.default_rng(1)
    x = rng.normal(size=40)
    y = 0.3 + 0.8 * x + rng.normal(size=40)
    m = fit_ols(design(x[:, None], y))
    ref = stats.linregress(x, y)
    assert m.coef("x1") == pytest.approx(ref.slope, rel=1e-12)
    assert m.p_value("x1") == pytest.approx(ref.pvalue, rel=1e-8)
    assert m.standard_errors[1] == pytest.approx(ref.stderr, rel=1e-10)
    assert m.aic == pytest.approx(ols_aic(np.column_stack([np.ones(40), x]), y), rel=1e-12)
    assert m.sigma2_resid == pytest.approx(m.rss / 38)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.floats(1e-3, 1e3))
def test_residual_orthogonality(seed, p, spread):
    rng = np.random.default_rng(seed)
    P = rng.normal(size=(60, p)) * spread
    y = rng.normal(size=60)
    d = design(P, y)
    m = fit_ols(d)
    r = y - d.X @ m.coefficients
    assert np.max(np.abs(d.X.T @ r)) <= 1e-8 * np.linalg.norm(d.X) * np.linalg.norm(y)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3), st.integers(0, 2))
def test_column_rescaling_invariance(seed, c, j):
    rng = np.random.default_rng(seed)
    P = rng.normal(size=(80, 3))
    y = 1 + P[:, 0] + 0.2 * P[:, 1] + rng.normal(size=80)
    Q = P.copy()
    Q[:, j] *= c
    a, b = fit_ols(design(P, y)), fit_ols(design(Q, y))
    assert b.coefficients[j + 1] == pytest.approx(a.coefficients[j + 1] / c, rel=1e-9)
    assert b.p_values[j + 1] == pytest.approx(a.p_values[j + 1], rel=1e-9, abs=1e-12)
    assert b.aic == pytest.approx(a.aic, rel=1e-9)
    ea, eb = backward_eliminate(design(P, y)), backward_eliminate(design(Q, y))
    assert [s.variable for s in ea.eliminated] == [s.variable for s in eb.eliminated]


def test_exact_fit_with_zero_spread():
    x = np.arange(5.0)
    m = fit_ols(design(x[:, None], 2 * x))
    assert m.p_value("x1") < 1e-12
    assert np.all((0 <= m.p_values) & (m.p_values <= 1))


def test_model_json_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    P, y, g = grouped_data(rng, n_groups=3, per=20)
    models = {"ols": fit_ols(design(P, y)), "lmm": fit_lmm(design(P, y, g))}
    write_model_json(models, tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    assert set(doc) == {"ols", "lmm"}
    assert doc["lmm"]["kind"] == "lmm" and len(doc["lmm"]["intercepts"]) == 3
    assert doc["ols"]["coefficients"]["x1"] == pytest.approx(models["ols"].coef("x1"))


# -- LMM ----------------------------------------------------------------------

def test_lmm_without_group_effect_reduces_to_ols():
    rng = np.random.default_rng(4)
    g = np.repeat(np.arange(7), 100)
    P = rng.normal(size=(700, 2))
    e = rng.normal(size=700)
    # no between-group spread at all, so the variance ratio estimate sits on zero
    e -= (np.bincount(g, e) / 100)[g]
    y = 0.5 + P @ [1.0, -0.5] + e
    lmm, ols = fit_lmm(design(P, y, g)), fit_ols(design(P, y))
    assert lmm.boundary == "lower" and lmm.lam == 0.0
    assert np.allclose(lmm.coefficients, ols.coefficients, atol=1e-6)
    assert np.all(np.abs(lmm.blup_intercepts) <= 1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pinned_tiny_ratio_matches_ols(seed):
    rng = np.random.default_rng(seed)
    P, y, g = grouped_data(rng, n_groups=4, per=15)
    lmm = fit_lmm(design(P, y, g), lam=1e-12)
    assert np.allclose(lmm.coefficients, fit_ols(design(P, y)).coefficients, atol=1e-6)


def test_profiled_beta_matches_direct_gls():
    rng = np.random.default_rng(5)
    P, y, g = grouped_data(rng, n_groups=5, per=12)
    d = design(P, y, g)
    for lam in rng.uniform(0.01, 20, 5):
        prof = reml_profile(d, lam)
        assert np.allclose(prof.beta, gls_beta(d.X, y, g, lam), rtol=1e-8, atol=1e-10)


def test_reml_objective_against_dense_formula():
    rng = np.random.default_rng(6)
    P, y, g = grouped_data(rng, n_groups=4, per=8)
    d = design(P, y, g)
    n, p = d.X.shape
    Z = (g[:, None] == np.arange(4)[None, :]).astype(float)

    def dense(lam):
        V = np.eye(n) + lam * Z @ Z.T
        Vi = np.linalg.inv(V)
        XtViX = d.X.T @ Vi @ d.X
        beta = np.linalg.solve(XtViX, d.X.T @ Vi @ y)
        r = y - d.X @ beta
        return ((n - p) * np.log(r @ Vi @ r) + np.linalg.slogdet(V)[1] + np.linalg.slogdet(XtViX)[1])

    base = dense(1.0) - reml_profile(d, 1.0).objective
    for lam in (0.1, 0.5, 3.0, 10.0):
        assert reml_profile(d, lam).objective + base == pytest.approx(dense(lam), abs=1e-8)


def test_unbalanced_lmm_agrees_with_brute_force_grid():
    rng = np.random.default_rng(7)
    g = np.concatenate([np.full(k, i) for i, k in enumerate([5, 9, 14, 20, 7])])
    P = rng.normal(size=(g.size, 1))
    y = P[:, 0] + rng.normal(0, 1.2, 5)[g] + rng.normal(size=g.size)
    d = design(P, y, g)
    m = fit_lmm(d)
    grid = np.exp(np.linspace(-12, 12, 4001))
    best = grid[np.argmin([reml_profile(d, lam).objective for lam in grid])]
    assert math.log(m.lam) == pytest.approx(math.log(best), abs=0.01)
    assert m.boundary is None


def test_blup_closed_form_on_toy():
    rng = np.random.default_rng(8)
    P, y, g = grouped_data(rng, n_groups=3, per=6)
    d = design(P, y, g)
    m = fit_lmm(d)
    Z = (g[:, None] == np.arange(3)[None, :]).astype(float)
    V = np.eye(len(y)) + m.lam * Z @ Z.T
    ref = m.lam * Z.T @ np.linalg.solve(V, y - d.X @ m.coefficients)
    assert np.allclose(m.blup_intercepts, ref, atol=1e-10)
    assert abs(m.blup_intercepts.sum()) <= 1e-8


def test_shifted_groups_are_ordered():
    rng = np.random.default_rng(9)
    P, y, g = grouped_data(rng, n_groups=3, per=60, shifts=[1.0, 0.0, -1.0])
    rep = intercept_report(fit_lmm(design(P, y, g)))
    assert [lab for lab, _ in rep] == [0, 1, 2]
    vals = [b for _, b in rep]
    assert vals[0] > vals[1] > vals[2]


def test_lmm_errors():
    rng = np.random.default_rng(10)
    P = rng.normal(size=(20, 1))
    with pytest.raises(DegenerateGroupingError):
        fit_lmm(design(P, P[:, 0], np.zeros(20)))
    with pytest.raises(DegenerateGroupingError):
        fit_lmm(design(P, P[:, 0]))
    with pytest.raises(InvalidParameterError):
        intercept_report(fit_ols(design(P, P[:, 0])))
    with pytest.raises(InvalidParameterError):
        fit(design(P, P[:, 0]), "glm")


def test_lmm_invariants():
    rng = np.random.default_rng(11)
    P, y, g = grouped_data(rng)
    m = fit_lmm(design(P, y, g))
    assert m.sigma2_group >= 0 and m.sigma2_resid >= 0
    assert np.all((0 <= m.p_values) & (m.p_values <= 1))
    assert m.df_resid == len(y) - 3


def test_intercept_outputs(tmp_path):
    rng = np.random.default_rng(12)
    P, y, g = grouped_data(rng, n_groups=3, per=10)
    d = DesignMatrix.from_predictors(P, ["x1", "x2"], y, g + 1, group_name="listen_order")
    m = fit_lmm(d)
    write_intercept_csv(m, tmp_path / "i.csv")
    write_intercept_plot_data(m, tmp_path / "i.dat")
    lines = (tmp_path / "i.csv").read_text().splitlines()
    assert lines[0] == "listen_order,intercept" and [l.split(",")[0] for l in lines[1:]] == ["1", "2", "3"]
    dat = np.loadtxt(tmp_path / "i.dat")
    assert dat.shape == (3, 2) and np.allclose(dat[:, 1], m.blup_intercepts, rtol=1e-10)


# -- backward elimination -----------------------------------------------------

def test_strong_predictors_survive():
    rng = np.random.default_rng(13)
    P = rng.normal(size=(200, 3))
    y = P @ [3.0, -2.0, 1.5] + rng.normal(size=200)
    m = backward_eliminate(design(P, y))
    assert m.eliminated == () and len(m.aic_trace) == 1
    assert best_subset_aic(P, y, ["x1", "x2", "x3"])[0][1] == ("x1", "x2", "x3")


def test_single_predictor_is_a_no_op():
    rng = np.random.default_rng(14)
    P = rng.normal(size=(30, 1))
    m = backward_eliminate(design(P, rng.normal(size=30)))
    assert m.predictors == ("x1",) and m.eliminated == ()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["ols", "lmm"]))
def test_trace_strictly_decreases(seed, kind):
    rng = np.random.default_rng(seed)
    P, y, g = grouped_data(rng, n_groups=4, per=15, beta=(0.0, 0.4, 0.0, 0.0, 0.1))
    m = backward_eliminate(design(P, y, g), kind)
    assert all(b < a for a, b in zip(m.aic_trace, m.aic_trace[1:]))
    assert len(m.aic_trace) == 1 + sum(s.reason == "aic" for s in m.eliminated)
    assert m.kind == kind


def test_aliased_columns_are_dropped_first():
    rng = np.random.default_rng(15)
    # seven distinct predictor rows, as with per-clip features
    base = rng.normal(size=(7, 8))
    P = np.repeat(base, 20, axis=0)
    y = P[:, 0] + rng.normal(size=P.shape[0])
    m = backward_eliminate(design(P, y))
    aliased = [s.variable for s in m.eliminated if s.reason == "aliased"]
    assert len(aliased) == 2
    assert np.linalg.matrix_rank(np.column_stack([np.ones(len(y)), P])) == 7


def test_unknown_criterion():
    rng = np.random.default_rng(16)
    P = rng.normal(size=(20, 2))
    with pytest.raises(InvalidParameterError):
        backward_eliminate(design(P, P[:, 0]), criterion="bic")


# -- tables -------------------------------------------------------------------

def test_table_section_uses_ols_p_values():
    rng = np.random.default_rng(17)
    P, y, g = grouped_data(rng, n_groups=3, per=20)
    ols, lmm = fit_ols(design(P, y)), fit_lmm(design(P, y, g))
    sec = table_section("Physical", ols, lmm)
    assert [r.variable for r in sec.rows] == ["X1", "X2"]
    assert sec.rows[0].p_value == ols.p_value("x1") and sec.rows[0].coef_lmm == lmm.coef("x1")


def test_render_table_layout():
    text = render_table([TableSection("A", (TableRow("X1", 0.0123, 1.5, -2e7),)),
                         TableSection("B", (TableRow("X2", 0.5, 1e-5, 0.25),))])
    lines = text.splitlines()
    assert lines[0].split() == ["A", "P-value", "Coef.", "OLS", "Coef.", "LMM"]
    assert lines[2].split() == ["X1", "0.012", "1.500", "-2.000e+07"]
    assert lines[3] == ""
    assert lines[6].split() == ["X2", "0.500", "1.000e-05", "0.250"]
    assert len({len(l) for l in lines if l}) == 1
