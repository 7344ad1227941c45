import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssotr.data_model import Dataset, augment, standardize
from ssotr.errors import DataError, RankDeficientError
from ssotr.estimators import (
    DecisionRule,
    RegimeFit,
    decide,
    estimate,
    fit_np,
    fit_ss,
    fit_tr,
    normal_equation_residual,
    normal_quantile,
    refit_theta,
    ss_q,
    transformed_response,
    wald_ci,
)
from ssotr.kernel_regression import QSurface, fit_folded, fit_surface, held_out_predictions
from ssotr.propensity import PropensityFit, fit_propensity
from ssotr.simulation import SimConfig, compute_truth, generate_replication


def _half(k):
    """Propensity model that is 0.5 everywhere."""
    return PropensityFit(gamma=np.zeros(k))


def _cofactor_inverse3(m):
    # adjugate / determinant, written out entry by entry
    a, b, c = m[0]
    d, e, f = m[1]
    g, h, i = m[2]
    cof = np.array([
        [e * i - f * h, -(d * i - f * g), d * h - e * g],
        [-(b * i - c * h), a * i - c * g, -(a * h - b * g)],
        [b * f - c * e, -(a * f - c * d), a * e - b * d],
    ])
    det = a * cof[0, 0] + b * cof[0, 1] + c * cof[0, 2]
    return cof.T / det


# --------------------------------------------------------------------------
# transformed response and TR
# --------------------------------------------------------------------------


@pytest.mark.parametrize("y,a,pi,expected", [(3, 1, 0.5, 6.0), (3, 0, 0.5, -6.0), (2, 1, 0.2, 10.0)])
def test_transformed_response(y, a, pi, expected):
    assert transformed_response(y, a, pi) == pytest.approx(expected, rel=1e-14)


def test_tr_interpolates_noise_free(rng):
    n = 40
    x = rng.standard_normal((n, 2))
    a = np.array([1, 0] * 20)
    c = np.array([0.3, -1.2, 2.0])
    # with pi = 0.5, Ytilde = 2Y(2A - 1); pick Y so that Ytilde = c'x~ exactly
    y = (augment(x) @ c) / (2 * (2 * a - 1))
    fit = fit_tr(Dataset(x, a, y, np.empty((0, 2))), _half(3))
    np.testing.assert_allclose(fit.beta, c, atol=1e-10)


def test_tr_matches_cofactor_oracle(rng):
    x = rng.standard_normal((10, 2))
    a = np.array([1, 0, 1, 1, 0, 0, 1, 0, 1, 0])
    y = rng.standard_normal(10)
    ds = Dataset(x, a, y, np.empty((0, 2)))
    prop = fit_propensity(ds)
    ytil = transformed_response(y, a, prop(x))
    design = np.column_stack([np.ones(10), x])
    xtx = np.zeros((3, 3))
    xty = np.zeros(3)
    for row, t in zip(design, ytil):
        xtx += np.outer(row, row)
        xty += row * t
    oracle = _cofactor_inverse3(xtx) @ xty
    np.testing.assert_allclose(fit_tr(ds, prop).beta, oracle, atol=1e-8)


def test_tr_influence_columns_sum_to_zero(sim_ds):
    ds = standardize(sim_ds)
    prop = fit_propensity(ds)
    for adjust in (True, False):
        fit = fit_tr(ds, prop, adjust_propensity=adjust)
        assert np.max(np.abs(fit.influence.sum(axis=0))) <= 1e-8 * ds.n


def test_tr_normal_equations(sim_ds):
    ds = standardize(sim_ds)
    prop = fit_propensity(ds)
    fit = fit_tr(ds, prop)
    ytil = transformed_response(ds.y, ds.a, prop(ds.x))
    assert normal_equation_residual(augment(ds.x), ytil, fit.beta) <= 1e-8 * ds.n


def test_tr_rank_deficient_names_column(rng):
    x = rng.standard_normal((20, 1))
    x = np.column_stack([x, 2 * x])
    ds = Dataset(x, np.array([1, 0] * 10), rng.standard_normal(20), np.empty((0, 2)))
    with pytest.raises(RankDeficientError, match="x[12] is linearly dependent"):
        fit_tr(ds, _half(3))


def test_tr_too_few_labeled():
    ds = Dataset(np.array([[0.0, 1.0], [1.0, 0.0], [2.0, 2.0]]), np.array([1, 0, 1]), np.ones(3), np.empty((0, 2)))
    with pytest.raises(DataError, match="p\\+2"):
        fit_tr(ds, _half(3))


def test_covariance_symmetric_psd(sim_ds):
    ds = standardize(sim_ds)
    for method in ("tr", "np", "ss"):
        fit = estimate(ds, method, seed=1, bandwidth=0.5)
        assert np.array_equal(fit.cov, fit.cov.T)
        assert np.linalg.eigvalsh(fit.cov).min() >= -1e-15


def test_duplicated_observation_changes_tr_continuously(sim_ds):
    ds = standardize(sim_ds)
    prop = fit_propensity(ds)
    base = fit_tr(ds, prop).beta
    dup = Dataset(
        np.vstack([ds.x, ds.x[:1]]), np.r_[ds.a, ds.a[:1]], np.r_[ds.y, ds.y[:1]], ds.x_unlabeled,
    )
    moved = fit_tr(dup, prop).beta
    assert np.all(np.isfinite(moved))
    assert np.max(np.abs(moved - base)) < 0.1


@pytest.mark.slow
def test_tr_monte_carlo_bias_and_coverage():
    """Linear contrast, cubic baseline, n=500, 500 replications."""
    cfg = SimConfig(model="linear", baseline="b1", n=500, N=0, replications=500, seed=2, mc_truth_size=500_000)
    truth = compute_truth(cfg)
    z = normal_quantile(0.975)
    betas, covers = [], []
    for r in range(cfg.replications):
        ds = standardize(generate_replication(cfg, r))
        beta, cov = fit_tr(ds, fit_propensity(ds)).raw_scale()
        betas.append(beta)
        covers.append(np.abs(beta - truth.beta_star) <= z * np.sqrt(np.diag(cov)))
    bias = np.mean(betas, axis=0) - truth.beta_star
    cp = np.mean(covers, axis=0)
    assert np.all(np.abs(bias - np.array([-0.010, -0.021, -0.020])) <= 0.03), bias
    assert np.all((cp >= 0.94 - 0.02) & (cp <= 0.98 + 0.01)), cp


# --------------------------------------------------------------------------
# NP
# --------------------------------------------------------------------------


def test_np_constant_contrast(rng):
    x = rng.standard_normal((30, 2))
    a = np.array([1, 0] * 15)
    y = np.where(a == 1, 5.0, 2.0)
    ds = Dataset(x, a, y, rng.standard_normal((40, 2)))
    fit = fit_np(ds, fit_surface(ds, 0.6), _half(3))
    np.testing.assert_allclose(fit.beta, [3.0, 0.0, 0.0], atol=1e-12)


def test_np_normal_equation_oracle(small_ds):
    u = small_ds.x_unlabeled[:50]
    ds = Dataset(small_ds.x, small_ds.a, small_ds.y, u)
    surface = fit_surface(ds, 0.6)
    fit = fit_np(ds, surface, fit_propensity(ds))
    c_hat = surface.contrast(u)
    xtx = np.zeros((3, 3))
    xtc = np.zeros(3)
    for xj, cj in zip(u, c_hat):
        row = np.r_[1.0, xj]
        xtx += np.outer(row, row)
        xtc += row * cj
    np.testing.assert_allclose(fit.beta, np.linalg.solve(xtx, xtc), atol=1e-10)


def test_np_requires_unlabeled(small_ds):
    ds = Dataset(small_ds.x, small_ds.a, small_ds.y, np.empty((0, 2)))
    with pytest.raises(DataError, match="use the tr estimator"):
        fit_np(ds, fit_surface(ds, 0.5), _half(3))
    with pytest.raises(DataError, match="unlabeled"):
        estimate(ds, "ss")


def test_duplicating_unlabeled_leaves_beta_unchanged(small_ds):
    ds2 = Dataset(small_ds.x, small_ds.a, small_ds.y, np.vstack([small_ds.x_unlabeled] * 2))
    prop = fit_propensity(small_ds)
    for fitter in ("np", "ss"):
        folded1 = fit_folded(small_ds, 0.6, 3, 0)
        folded2 = fit_folded(ds2, 0.6, 3, 0)
        if fitter == "np":
            b1 = fit_np(small_ds, fit_surface(small_ds, 0.6), prop, folded1).beta
            b2 = fit_np(ds2, fit_surface(ds2, 0.6), prop, folded2).beta
        else:
            b1 = fit_ss(small_ds, folded1, prop).beta
            b2 = fit_ss(ds2, folded2, prop).beta
        np.testing.assert_allclose(b2, b1, atol=1e-12)


# --------------------------------------------------------------------------
# refit and SS
# --------------------------------------------------------------------------


def test_refit_zero_residuals(rng):
    x = rng.standard_normal((24, 2))
    a = np.array([1, 0] * 12)
    ds = Dataset(x, a, np.zeros(24), np.empty((0, 2)))
    folded = fit_folded(ds, 0.7, 3, 0)
    for arm in (0, 1):
        assert np.all(refit_theta(ds, folded, _half(3), arm) == 0.0)
    const = Dataset(x, a, np.full(24, 3.0), np.empty((0, 2)))
    folded = fit_folded(const, 0.7, 3, 0)
    for arm in (0, 1):
        np.testing.assert_allclose(refit_theta(const, folded, _half(3), arm), 0.0, atol=1e-12)


def test_refit_constant_weight_cancels(small_ds):
    folded = fit_folded(small_ds, 0.6, 5, 1)
    theta = refit_theta(small_ds, folded, _half(3), 1)
    q = held_out_predictions(folded)
    sel = small_ds.a == 1
    ols = np.linalg.lstsq(augment(small_ds.x[sel]), (small_ds.y - q)[sel], rcond=None)[0]
    np.testing.assert_allclose(theta, ols, atol=1e-10)


def test_refit_weighted_objective_grid():
    x = np.array([-1.5, -0.9, -0.3, 0.0, 0.4, 0.8, 1.3, 1.9])[:, None]
    a = np.array([1, 0, 1, 1, 0, 1, 0, 1])
    y = np.array([0.2, 1.0, -0.7, 0.5, 2.0, 1.4, -0.3, 2.2])
    ds = Dataset(x, a, y, np.empty((0, 1)))
    prop = PropensityFit(gamma=np.array([0.3, 0.8]))
    folded = fit_folded(ds, 0.8, 2, 3)
    theta = refit_theta(ds, folded, prop, 1)

    resid = y - held_out_predictions(folded)
    sel = a == 1
    w = 1.0 / prop(x)[sel]
    r, xs = resid[sel], x[sel, 0]

    def objective(t0, t1):
        return np.sum(w * (r - t0[..., None] - t1[..., None] * xs) ** 2, axis=-1)

    center, step = np.zeros(2), 0.05
    for _ in range(4):
        g0 = center[0] + step * np.arange(-100, 101)
        g1 = center[1] + step * np.arange(-100, 101)
        t0, t1 = np.meshgrid(g0, g1, indexing="ij")
        k = np.unravel_index(np.argmin(objective(t0, t1)), t0.shape)
        center = np.array([t0[k], t1[k]])
        step /= 20
    np.testing.assert_allclose(theta, center, atol=1e-3)


def _identical_folded(ds, h, K):
    surface = fit_surface(ds, h)
    folds = np.arange(ds.n) % K
    return surface, [
        QSurface(ds.x, ds.a, ds.y, surface.config, np.ones(ds.n, dtype=bool), folds, k) for k in range(K)
    ]


def test_ss_reduces_to_np(small_ds):
    surface, folded = _identical_folded(small_ds, 0.6, 4)
    zero = np.zeros(3)
    contrast = ss_q(folded, zero, small_ds.x_unlabeled, 1) - ss_q(folded, zero, small_ds.x_unlabeled, 0)
    from ssotr.linalg import least_squares

    beta_ss = least_squares(augment(small_ds.x_unlabeled), contrast)
    beta_np = fit_np(small_ds, surface, _half(3)).beta
    np.testing.assert_allclose(beta_ss, beta_np, rtol=0, atol=1e-13)


def test_ss_influence_residual_structure(small_ds):
    prop = fit_propensity(small_ds)
    folded = fit_folded(small_ds, 0.6, 5, 2)
    fit = fit_ss(small_ds, folded, prop)
    q = held_out_predictions(folded)
    design = augment(small_ds.x)
    corr = np.where(small_ds.a == 1, design @ fit.theta1, design @ fit.theta0)
    resid = small_ds.y - q - corr
    pi = prop(small_ds.x)
    sign = small_ds.a / pi - (1 - small_ds.a) / (1 - pi)
    lam = augment(small_ds.x_unlabeled).T @ augment(small_ds.x_unlabeled) / small_ds.N
    expected = (design * (sign * resid)[:, None]) @ np.linalg.inv(lam).T
    np.testing.assert_allclose(fit.influence, expected, rtol=1e-9, atol=1e-9)


def test_relabel_antisymmetry(sim_ds):
    ds = standardize(sim_ds)
    flipped = ds.with_treatment(1 - ds.a)
    fit = estimate(ds, "ss", seed=3)
    fit_f = estimate(flipped, "ss", seed=3)
    np.testing.assert_allclose(fit_f.beta, -fit.beta, atol=1e-8)
    folded = fit_folded(ds, fit.bandwidth, 5, 3)
    folded_f = fit_folded(flipped, fit.bandwidth, 5, 3)
    u = ds.x_unlabeled
    c = ss_q(folded, fit.theta1, u, 1) - ss_q(folded, fit.theta0, u, 0)
    c_f = ss_q(folded_f, fit_f.theta1, u, 1) - ss_q(folded_f, fit_f.theta0, u, 0)
    np.testing.assert_allclose(c_f, -c, atol=1e-8)


def test_estimate_records_diagnostics(sim_ds):
    fit = estimate(standardize(sim_ds), "ss", seed=0)
    assert fit.K == 5 and fit.bandwidth > 0
    assert set(fit.diagnostics) >= {"bandwidth_rule_flags", "propensity_gamma", "propensity_converged"}
    with pytest.raises(ValueError, match="unknown method"):
        estimate(standardize(sim_ds), "ipw")


# --------------------------------------------------------------------------
# decisions and intervals
# --------------------------------------------------------------------------


def test_decide_examples():
    rule = DecisionRule(np.array([0.0, 1.0, 1.0]))
    assert decide(rule, [1.0, 1.0]) == 1
    assert decide(rule, [1.0, -1.0]) == 0


def test_decide_applies_standardization():
    rule = DecisionRule(np.array([0.0, 1.0]), center=np.array([10.0]), scale=np.array([2.0]))
    assert decide(rule, [10.5]) == 1
    assert decide(rule, [10.0]) == 0
    assert decide(rule, [9.0]) == 0


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(-10, 10), min_size=3, max_size=3),
    st.lists(st.floats(-10, 10), min_size=2, max_size=2),
    st.floats(1e-3, 1e3),
)
def test_decide_positive_scale_invariant(beta, x, c):
    beta = np.array(beta)
    base = decide(DecisionRule(beta), x)
    assert decide(DecisionRule(c * beta), x) == base
    assert decide(DecisionRule(7 * beta), x) == base


def _std_normal_cdf(t):
    return 0.5 * (1 + math.erf(t / math.sqrt(2)))


def test_normal_quantile_against_bisection():
    lo, hi = 0.0, 5.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if _std_normal_cdf(mid) < 0.975 else (lo, mid)
    assert abs(normal_quantile(0.975) - 1.959964) <= 1e-5
    assert abs(normal_quantile(0.975) - lo) <= 1e-8


def _fit_with(beta, se):
    k = len(beta)
    return RegimeFit("tr", np.array(beta, float), np.diag(np.square(se)), np.zeros((1, k)), np.zeros(k - 1), np.ones(k - 1))


def test_wald_ci():
    ci = wald_ci(_fit_with([1.0, 2.0], [0.1, 0.0]), 0.95)
    np.testing.assert_allclose(ci[0], [0.8040, 1.1960], atol=1e-4)
    assert ci[1, 0] == ci[1, 1] == 2.0


def test_raw_scale_rule_matches_standardized(sim_ds):
    ds = standardize(sim_ds)
    fit = estimate(ds, "tr")
    beta_raw, cov_raw = fit.raw_scale()
    raw_rule = DecisionRule(beta_raw)
    x = sim_ds.x[:200]
    assert np.array_equal(raw_rule(x), fit.rule()(x))
    assert np.allclose(cov_raw, cov_raw.T)
