import warnings

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from nawt.errors import NonConvergence, RankDeficientDesign, SeparationWarning
from nawt.model import Dataset, WeightingScheme
from nawt.numerics import finite_diff_gradient
from nawt.solver import (
    fit_gmm,
    fit_nawt,
    pseudo_loglik,
    score_jacobian,
    unit_scores,
    weighted_score,
)

from conftest import irls_logistic, random_logit_data

ALL_SCHEMES = [
    WeightingScheme.mle(),
    WeightingScheme.power(1),
    WeightingScheme.power(2),
    WeightingScheme.power(2.5),
    WeightingScheme.power(4),
    WeightingScheme.power_rev(2),
    WeightingScheme.combined(2),
    WeightingScheme.cbps_att(),
    WeightingScheme.cbps_ate(),
]


def test_score_two_unit_hand_value():
    ds = Dataset(np.ones((2, 1)), [1, 0])
    assert weighted_score(np.zeros(1), ds, WeightingScheme.power(1))[0] == 0.0


def test_power_zero_same_score_as_mle():
    ds = random_logit_data(3)
    b = np.array([0.2, -0.3, 0.5, 0.1])
    np.testing.assert_array_equal(
        weighted_score(b, ds, WeightingScheme.power(0)), weighted_score(b, ds, WeightingScheme.mle())
    )


def test_pseudo_loglik_unit_values():
    one_t = Dataset(np.zeros((2, 1)), [1, 0])
    s = WeightingScheme.power(2)
    per_unit = pseudo_loglik(np.zeros(1), one_t, s)
    assert per_unit == pytest.approx(0.125 + 0.625 + np.log(0.5), abs=1e-14)


@pytest.mark.parametrize("scheme", ALL_SCHEMES, ids=lambda s: s.label)
def test_pseudo_loglik_gradient_is_scaled_score(scheme):
    ds = random_logit_data(11)
    g = np.random.default_rng(5)
    for _ in range(5):
        b = g.normal(0, 0.5, ds.k)
        num = finite_diff_gradient(lambda v: pseudo_loglik(v, ds, scheme), b)
        ana = ds.n * weighted_score(b, ds, scheme)
        np.testing.assert_allclose(num, ana, rtol=1e-6, atol=1e-6 * np.abs(ana).max())


@pytest.mark.parametrize("scheme", ALL_SCHEMES, ids=lambda s: s.label)
def test_jacobian_matches_difference_of_score(scheme):
    ds = random_logit_data(12)
    b = np.array([0.1, 0.4, -0.2, 0.3])
    num = np.column_stack(
        [(weighted_score(b + e, ds, scheme) - weighted_score(b - e, ds, scheme)) / 2e-6 for e in 1e-6 * np.eye(ds.k)]
    )
    np.testing.assert_allclose(score_jacobian(b, ds, scheme), num, rtol=1e-5, atol=1e-8)


def test_unit_scores_average_to_score():
    ds = random_logit_data(13)
    b = np.array([0.1, 0.4, -0.2, 0.3])
    s = WeightingScheme.power(2)
    np.testing.assert_allclose(unit_scores(b, ds, s).mean(axis=0), weighted_score(b, ds, s), atol=1e-16)


@pytest.mark.parametrize("seed", range(10))
def test_mle_matches_irls(seed):
    ds = random_logit_data(seed)
    ref = irls_logistic(ds.x, ds.t)
    for scheme in (WeightingScheme.mle(), WeightingScheme.power(0)):
        fit = fit_nawt(ds, scheme)
        np.testing.assert_allclose(fit.beta, ref, atol=1e-8, rtol=0)


@pytest.mark.parametrize("scheme", ALL_SCHEMES, ids=lambda s: s.label)
def test_fit_solves_score(scheme, scen_a):
    fit = fit_nawt(scen_a, scheme)
    assert fit.converged
    assert np.max(np.abs(weighted_score(fit.beta, scen_a, scheme))) <= 1e-9
    assert fit.n_clamped == 0


@pytest.mark.parametrize("scheme", [WeightingScheme.power(2), WeightingScheme.power(4), WeightingScheme.cbps_att()])
def test_fit_misspecified_design(scheme, scen_b):
    fit = fit_nawt(scen_b, scheme)
    assert fit.score_norm <= 1e-9


def test_fit_is_a_local_max_of_pseudo_loglik(scen_a):
    s = WeightingScheme.power(2)
    fit = fit_nawt(scen_a, s)
    h = -score_jacobian(fit.beta, scen_a, s)
    assert np.all(np.linalg.eigvalsh(0.5 * (h + h.T)) > 0)


def test_rank_deficient_design_names_column():
    ds = random_logit_data(1)
    x = np.column_stack([ds.x, 2 * ds.x[:, 1]])
    bad = Dataset(x, ds.t, ds.y, ("c", "a", "b", "d", "a2"))
    with pytest.raises(RankDeficientDesign) as err:
        fit_nawt(bad, WeightingScheme.mle())
    assert err.value.details["columns"]


def test_nonconvergence_reports_norm():
    ds = random_logit_data(2)
    with pytest.raises(NonConvergence) as err:
        fit_nawt(ds, WeightingScheme.power(2), max_iter=1)
    assert err.value.score_norm > 0


def test_no_finite_root_is_flagged():
    # Strongly separated small sample: the power(2) root escapes to infinity
    # (the interior branch folds near alpha = 1.87), so most fitted
    # probabilities hit the clamp.
    ds = random_logit_data(6)
    with pytest.warns(SeparationWarning):
        fit = fit_nawt(ds, WeightingScheme.power(2))
    assert fit.n_clamped > 0.01 * ds.n
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert fit_nawt(ds, WeightingScheme.power(1.5)).n_clamped == 0


# ---- CBPS identity and GMM


def test_cbps_att_balances_covariates(scen_a):
    fit = fit_nawt(scen_a, WeightingScheme.cbps_att())
    t, pi, x = scen_a.t, fit.pi_hat, scen_a.x
    balance = ((t - (1 - t) * pi / (1 - pi))[:, None] * x).mean(axis=0)
    assert np.max(np.abs(balance)) <= 1e-6


def test_cbps_att_equals_balance_only_gmm(scen_a):
    fit = fit_nawt(scen_a, WeightingScheme.cbps_att())
    gmm = fit_gmm(scen_a, None, None, "identity", score_moments=False)
    np.testing.assert_allclose(gmm.beta, fit.beta, atol=1e-6)
    assert np.max(np.abs(gmm.moment_values)) <= 1e-6


def test_overidentified_gmm_objective(scen_a):
    gmm = fit_gmm(scen_a, WeightingScheme.power(2), ["x1", "x2"], "cu")
    assert gmm.objective > 0
    trace = np.array(gmm.objective_trace)
    assert np.all(np.diff(trace) <= 1e-12 * np.abs(trace[:-1]))
    assert gmm.vcov_beta.shape == (scen_a.k, scen_a.k)
    assert np.all(np.linalg.eigvalsh(gmm.vcov_beta) > 0)


# ---- properties


def _interior_fit(ds, scheme):
    """Fit, or reject the example when the root is not interior."""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fit = fit_nawt(ds, scheme)
    assume(not any(issubclass(w.category, SeparationWarning) for w in caught))
    return fit


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.2, 5.0))
def test_mle_equivariant_to_column_scaling(seed, scale):
    ds = random_logit_data(seed)
    assume(20 <= ds.n1 <= 180)
    scaled = Dataset(ds.x * np.r_[1.0, scale, 1.0, 1.0], ds.t, ds.y)
    b = fit_nawt(ds, WeightingScheme.mle()).beta
    bs = fit_nawt(scaled, WeightingScheme.mle()).beta
    np.testing.assert_allclose(bs * np.r_[1.0, scale, 1.0, 1.0], b, atol=1e-7)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1.0, 2.0, 2.5, 3.0]))
def test_power_fit_score_zero_on_random_data(seed, alpha):
    ds = random_logit_data(seed)
    assume(20 <= ds.n1 <= 180)
    fit = _interior_fit(ds, WeightingScheme.power(alpha))
    assert fit.score_norm <= 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_relabel_swaps_power_and_reversed_power(seed):
    ds = random_logit_data(seed)
    assume(20 <= ds.n1 <= 180)
    a = _interior_fit(ds, WeightingScheme.power(2)).beta
    b = _interior_fit(ds.relabeled(), WeightingScheme.power_rev(2)).beta
    np.testing.assert_allclose(b, -a, atol=1e-7)
