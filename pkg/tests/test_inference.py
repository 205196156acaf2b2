import math

import numpy as np
import pytest
from scipy.special import expit

from nawt.errors import DataError, DomainError, TooManyFailures
from nawt.estimands import Recipe, estimate_ate, estimate_att
from nawt.inference import (
    adaptive_select,
    bootstrap_se,
    sandwich,
    sandwich_ate_separate,
    sandwich_att,
)
from nawt.model import Dataset, WeightingScheme
from nawt.numerics import RngStream
from nawt.simulation import generate_main
from nawt.solver import fit_nawt, score_jacobian, unit_scores


def numeric_jacobian(f, theta, h=1e-6):
    cols = []
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        cols.append((f(theta + e) - f(theta - e)) / (2 * h))
    return np.column_stack(cols)


def att_psi(theta, ds, scheme):
    """Stacked ATT estimating functions written out directly."""
    k = ds.k
    beta, mu1, mu0, tau = theta[:k], theta[k], theta[k + 1], theta[k + 2]
    p = expit(ds.x @ beta)
    s = ((ds.t - p) * p**scheme.alpha)[:, None] * ds.x
    m1 = ds.t * (ds.y - mu1)
    m0 = (1 - ds.t) * p / (1 - p) * (ds.y - mu0)
    return np.column_stack([s, m1, m0, np.full(ds.n, mu1 - mu0 - tau)])


def test_att_sandwich_matches_numeric_stack(scen_a):
    scheme = WeightingScheme.power(2)
    fit = fit_nawt(scen_a, scheme)
    e = estimate_att(scen_a, fit)
    rep = sandwich_att(scen_a, fit, e)
    theta = np.r_[fit.beta, e.means["mu1"], e.means["mu0"], e.tau]
    psi = att_psi(theta, scen_a, scheme)
    assert np.max(np.abs(psi.mean(axis=0))) < 1e-9
    H = numeric_jacobian(lambda th: att_psi(th, scen_a, scheme).mean(axis=0), theta)
    Hi = np.linalg.inv(H)
    V = Hi @ (psi.T @ psi / scen_a.n) @ Hi.T / scen_a.n
    assert rep.se_tau == pytest.approx(math.sqrt(V[-1, -1]), rel=1e-6)
    assert rep.ci95[0] < e.tau < rep.ci95[1]


def test_beta_block_matches_direct_formula(scen_a):
    scheme = WeightingScheme.power(2)
    fit = fit_nawt(scen_a, scheme)
    rep = sandwich(estimate_att(scen_a, fit))
    s = unit_scores(fit.beta, scen_a, scheme)
    Hi = np.linalg.inv(score_jacobian(fit.beta, scen_a, scheme))
    direct = Hi @ (s.T @ s / scen_a.n) @ Hi.T / scen_a.n
    k = scen_a.k
    np.testing.assert_allclose(rep.vcov[:k, :k], direct, rtol=1e-10, atol=1e-14)


def test_constant_half_gives_two_sample_se():
    g = np.random.default_rng(4)
    n = 10_000
    t = np.r_[np.ones(n // 2), np.zeros(n // 2)]
    y = 1.0 + 0.5 * t + g.normal(0, 1 + t, n)
    ds = Dataset(np.ones((n, 1)), t, y)
    fit = fit_nawt(ds, WeightingScheme.mle())
    assert fit.pi_hat[0] == pytest.approx(0.5)
    rep = sandwich(estimate_att(ds, fit))
    ref = math.sqrt(y[t == 1].var(ddof=1) / (n // 2) + y[t == 0].var(ddof=1) / (n // 2))
    assert rep.se_tau == pytest.approx(ref, rel=0.10)


def test_ate_independent_arms():
    g = np.random.default_rng(5)
    n = 10_000
    t = (g.random(n) < 0.3).astype(float)
    y = 2.0 * t + g.normal(0, 1.5, n)
    ds = Dataset(np.ones((n, 1)), t, y)
    fit = fit_nawt(ds, WeightingScheme.mle())
    e = estimate_ate(ds, fit, fit, mode="separate")
    rep = sandwich_ate_separate(ds, fit, fit, e)
    n1 = t.sum()
    ref = math.sqrt(y[t == 1].var() / n1 + y[t == 0].var() / (n - n1))
    assert rep.se_tau == pytest.approx(ref, rel=0.10)


def test_constant_treated_arm_has_no_variance():
    g = np.random.default_rng(6)
    n = 4000
    x = np.column_stack([np.ones(n), g.standard_normal(n)])
    t = (g.random(n) < expit(x[:, 1])).astype(float)
    y = np.where(t == 1, 3.0, x[:, 1] + g.standard_normal(n))
    ds = Dataset(x, t, y)
    rep = sandwich(Recipe("ate-separate", WeightingScheme.power(2)).run(ds))
    i1 = rep.labels.index("mu1")
    i0 = rep.labels.index("mu0")
    assert rep.vcov[i1, i1] < 1e-20
    assert rep.se_tau == pytest.approx(math.sqrt(rep.vcov[i0, i0]), rel=1e-6)


def test_sandwich_rejects_gmm_fit(scen_a):
    e = Recipe("att", WeightingScheme.power(2), balance=["x1"]).run(scen_a)
    with pytest.raises(DomainError):
        sandwich(e)


def test_atc_sandwich_sign_convention(scen_a):
    e = Recipe("atc", WeightingScheme.power(2)).run(scen_a)
    rep = sandwich(e)
    assert rep.tau == e.tau
    assert rep.ci95[0] < e.tau < rep.ci95[1]


# ---- bootstrap


def _constant(_):
    return 1.5


class _Fragile:
    """Fails on roughly half of the resamples, never on the original data."""

    def __init__(self, ds):
        self.cut = float(np.mean(ds.y))

    def __call__(self, ds):
        m = float(np.mean(ds.y))
        if m < self.cut:
            raise DataError("synthetic failure")
        return m


@pytest.fixture(scope="module")
def small_a():
    ds, _ = generate_main("a", 300, RngStream(77, 0))
    return ds


def test_bootstrap_constant_pipeline(small_a):
    rep = bootstrap_se(small_a, _constant, 100, seed=1)
    assert rep.se_tau == 0.0


def test_bootstrap_is_deterministic_across_workers(small_a):
    recipe = Recipe("att", WeightingScheme.power(2))
    a = bootstrap_se(small_a, recipe, 120, seed=9)
    b = bootstrap_se(small_a, recipe, 120, seed=9)
    c = bootstrap_se(small_a, recipe, 120, seed=9, parallelism=3)
    assert a.se_tau == b.se_tau == c.se_tau
    assert np.array_equal(a.replicates, c.replicates, equal_nan=True)
    d = bootstrap_se(small_a, recipe, 120, seed=10)
    assert d.se_tau != a.se_tau


def test_bootstrap_percentile_interval(small_a):
    rep = bootstrap_se(small_a, Recipe("att", WeightingScheme.mle()), 200, seed=2, ci="percentile")
    lo, hi = np.quantile(rep.replicates, [0.025, 0.975])
    assert rep.ci95 == (lo, hi)


def test_bootstrap_failure_budget(small_a):
    with pytest.raises(TooManyFailures):
        bootstrap_se(small_a, _Fragile(small_a), 100, seed=3)


def test_bootstrap_validation(small_a):
    with pytest.raises(DomainError):
        bootstrap_se(small_a, _constant, 50, seed=1)
    with pytest.raises(DomainError):
        bootstrap_se(small_a, _constant, 100, seed=1, ci="bca")


# ---- adaptive choice


def test_singleton_grid_picks_it(scen_a):
    res = adaptive_select(scen_a, "att", [0])
    assert res.alpha == 0 and res.index == 0
    scheme, table = res
    assert scheme.alpha == 0 and table[0]["chosen"]


def test_duplicate_grid_entry_ties_to_first(scen_a):
    res = adaptive_select(scen_a, "att", [2, 2])
    assert res.index == 0
    assert res.table[0]["variance"] == res.table[1]["variance"]


def test_adaptive_picks_minimum_variance(scen_a):
    res = adaptive_select(scen_a, "att", [0, 2, 4])
    v = [r["variance"] for r in res.table]
    assert res.index == int(np.argmin(v))


def test_adaptive_grid_validation(scen_a):
    with pytest.raises(DomainError):
        adaptive_select(scen_a, "att", [])
    with pytest.raises(DomainError):
        adaptive_select(scen_a, "att", [-1])


def test_adaptive_ate_combined(scen_a):
    res = adaptive_select(scen_a, "ate-combined", [0, 2])
    assert res.scheme.kind == "combined"
