"""Standard errors for weighted effect estimates and adaptive choice of alpha.

The sandwich stacks, per unit, the score of every propensity fit, one
estimating function per weighted arm mean and the contrast defining tau:

    psi_i = (s_i(beta_1), ..., m_i(mu_1, beta), ..., sum_m c_m mu_m - tau)

and returns ``H^-1 Sigma H^-T / n`` with ``H`` the mean Jacobian and
``Sigma`` the mean outer product of ``psi_i``.  A Hajek mean contributes
``mask * w(pi) * (y - mu)``; a Horvitz-Thompson mean contributes
``mask * w(pi) * y - mu * d_i`` with ``sum d_i`` its fixed denominator.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DataError, DomainError, NawtError, SingularHessian, TooManyFailures
from .estimands import _WEIGHTS, EffectEstimate, Recipe
from .model import Dataset, WeightingScheme
from .numerics import RngStream
from .solver import PropensityFit, score_jacobian, unit_scores

Z95 = 1.959963984540054


@dataclass(frozen=True, eq=False)
class VarianceReport:
    tau: float
    se_tau: float
    vcov: np.ndarray
    method: str
    ci95: tuple
    labels: tuple = ()
    n_boot: int = 0
    n_failed: int = 0
    ci_kind: str = "wald"
    replicates: Optional[np.ndarray] = field(default=None, repr=False)


def _wald(tau, se):
    return (tau - Z95 * se, tau + Z95 * se)


def _stack(effect: EffectEstimate):
    ds = effect.dataset
    fits = effect.fits
    for f in fits:
        if not isinstance(f, PropensityFit):
            raise DomainError("sandwich variance needs weighted-score fits; use the bootstrap after GMM")
    n, k = ds.n, ds.k
    y = np.where(np.isfinite(ds.y), ds.y, 0.0)
    comps = effect.components
    nf, nm = len(fits), len(comps)
    p = nf * k + nm + 1
    psi = np.zeros((n, p))
    H = np.zeros((p, p))
    labels = []
    for j, f in enumerate(fits):
        sl = slice(j * k, (j + 1) * k)
        psi[:, sl] = unit_scores(f.beta, ds, f.scheme)
        H[sl, sl] = score_jacobian(f.beta, ds, f.scheme)
        labels += [f"beta{j}[{name}]" for name in ds.names]
    for m, comp in enumerate(comps):
        row = nf * k + m
        labels.append(comp.name)
        w_fn, dw_fn = _WEIGHTS[comp.weight]
        pi = fits[comp.fit].pi_hat if comp.fit is not None else np.full(n, 0.5)
        w, dw = w_fn(pi), dw_fn(pi)
        mu = comp.value
        if effect.estimator == "hajek":
            d = comp.mask * w
            resid = comp.mask * (y - mu)
        else:
            d = comp.ht_norm
            resid = comp.mask * y
        psi[:, row] = comp.mask * w * y - mu * d
        H[row, row] = -np.mean(d)
        if comp.fit is not None:
            sl = slice(comp.fit * k, (comp.fit + 1) * k)
            H[row, sl] += (resid * dw) @ ds.x / n
    labels.append("tau")
    for m, c in enumerate(effect.contrast):
        H[p - 1, nf * k + m] = c
    H[p - 1, p - 1] = -1.0
    return psi, H, tuple(labels)


def sandwich(effect: EffectEstimate) -> VarianceReport:
    """Joint M-estimation sandwich for the fits, arm means and tau."""
    psi, H, labels = _stack(effect)
    n = psi.shape[0]
    cond = np.linalg.cond(H)
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularHessian(f"stacked Jacobian is singular (condition number {cond:.3g})", condition_number=float(cond))
    sigma = psi.T @ psi / n
    h_inv = np.linalg.inv(H)
    vcov = h_inv @ sigma @ h_inv.T / n
    vcov = 0.5 * (vcov + vcov.T)
    se = math.sqrt(max(vcov[-1, -1], 0.0))
    return VarianceReport(
        tau=effect.tau,
        se_tau=se,
        vcov=vcov,
        method="sandwich",
        ci95=_wald(effect.tau, se),
        labels=labels,
    )


def sandwich_att(dataset: Dataset, fit: PropensityFit, effect: EffectEstimate) -> VarianceReport:
    """Sandwich for the ATT over (beta, mu1, mu0, tau)."""
    if effect.estimand.kind not in ("att", "atc"):
        raise DomainError(f"expected an ATT estimate, got {effect.estimand.kind}")
    if effect.fits[0] is not fit:
        raise DomainError("effect was not computed from this fit")
    return sandwich(effect)


def sandwich_ate_separate(dataset: Dataset, fit0, fit1, effect: EffectEstimate) -> VarianceReport:
    """Sandwich for the separate ATE over (beta0, beta1, mu1, mu0, tau)."""
    if effect.estimand.kind != "ate-separate":
        raise DomainError(f"expected a separate ATE estimate, got {effect.estimand.kind}")
    return sandwich(effect)


# ---------------------------------------------------------------- bootstrap


def _tau_of(result) -> float:
    return float(result.tau) if isinstance(result, EffectEstimate) else float(result)


def _boot_one(dataset: Dataset, pipeline, seed: int, b: int):
    rng = RngStream(seed, b)
    idx = rng.integers(0, dataset.n, size=dataset.n)
    try:
        return _tau_of(pipeline(dataset.subset(idx)))
    except (NawtError, np.linalg.LinAlgError, FloatingPointError):
        return math.nan


def _boot_chunk(args):
    dataset, pipeline, seed, indices = args
    return [_boot_one(dataset, pipeline, seed, b) for b in indices]


def bootstrap_draws(dataset: Dataset, pipeline, n_boot: int, seed: int, parallelism: int = 1) -> np.ndarray:
    """Replicate estimates ordered by replicate index; failures are NaN."""
    indices = list(range(n_boot))
    if parallelism <= 1:
        return np.array(_boot_chunk((dataset, pipeline, seed, indices)))
    chunks = [indices[i::parallelism] for i in range(parallelism)]
    out = np.empty(n_boot)
    with ProcessPoolExecutor(max_workers=parallelism) as pool:
        for chunk, vals in zip(chunks, pool.map(_boot_chunk, [(dataset, pipeline, seed, c) for c in chunks])):
            out[chunk] = vals
    return out


def bootstrap_se(
    dataset: Dataset,
    pipeline: Callable,
    n_boot: int,
    seed: int,
    parallelism: int = 1,
    ci: str = "wald",
    max_failure_rate: float = 0.05,
) -> VarianceReport:
    """Nonparametric bootstrap of a full estimation recipe.

    ``pipeline`` maps a dataset to an :class:`EffectEstimate` (or a float) and
    must be picklable when ``parallelism > 1``; :class:`Recipe` is.  Replicate
    ``b`` resamples with ``RngStream(seed, b)``, so results do not depend on
    ``parallelism``.
    """
    if n_boot < 100:
        raise DomainError("n_boot must be at least 100", n_boot=n_boot)
    if ci not in ("wald", "percentile"):
        raise DomainError(f"unknown interval kind {ci!r}")
    tau = _tau_of(pipeline(dataset))
    draws = bootstrap_draws(dataset, pipeline, n_boot, seed, parallelism)
    ok = np.isfinite(draws)
    n_failed = int(n_boot - ok.sum())
    if n_failed > max_failure_rate * n_boot:
        raise TooManyFailures(
            f"{n_failed} of {n_boot} bootstrap replicates failed", n_failed=n_failed, n_boot=n_boot
        )
    good = draws[ok]
    se = float(np.std(good, ddof=1))
    if ci == "wald":
        interval = _wald(tau, se)
    else:
        lo, hi = np.quantile(good, [0.025, 0.975])
        interval = (float(lo), float(hi))
    return VarianceReport(
        tau=tau,
        se_tau=se,
        vcov=np.array([[se * se]]),
        method="bootstrap",
        ci95=interval,
        labels=("tau",),
        n_boot=n_boot,
        n_failed=n_failed,
        ci_kind=ci,
        replicates=draws,
    )


# ---------------------------------------------------------------- adaptive alpha


@dataclass(frozen=True, eq=False)
class AdaptiveResult:
    scheme: WeightingScheme
    alpha: float
    index: int
    table: list
    effect: EffectEstimate
    report: VarianceReport

    def __iter__(self):
        return iter((self.scheme, self.table))


def recipe_for_alpha(estimand: str, alpha: float, estimator: str = "hajek") -> Recipe:
    """The power-weight recipe an estimand uses at exponent ``alpha``."""
    if estimand == "ate-combined":
        scheme = WeightingScheme.combined(alpha)
    else:
        scheme = WeightingScheme.power(alpha)
    return Recipe(estimand, scheme, estimator)


def adaptive_select(dataset: Dataset, estimand: str, alpha_grid: Sequence[float] = (0, 2, 4)) -> AdaptiveResult:
    """Pick the exponent with the smallest sandwich variance of tau.

    Exponents whose fit or variance fails are recorded in the table and never
    chosen; ties go to the earlier grid entry.
    """
    grid = [float(a) for a in alpha_grid]
    if not grid or any(not math.isfinite(a) or a < 0 for a in grid):
        raise DomainError("alpha grid must be a non-empty list of non-negative numbers")
    table = []
    best = None
    first_error = None
    for i, a in enumerate(grid):
        recipe = recipe_for_alpha(estimand, a)
        try:
            effect = recipe.run(dataset)
            report = sandwich(effect)
        except NawtError as exc:
            first_error = first_error or exc
            table.append({"alpha": a, "tau": math.nan, "se": math.nan, "variance": math.nan, "status": exc.code})
            continue
        var = report.se_tau**2
        table.append({"alpha": a, "tau": effect.tau, "se": report.se_tau, "variance": var, "status": "ok"})
        if best is None or var < best[0]:
            best = (var, i, recipe, effect, report)
    if best is None:
        raise first_error
    _, i, recipe, effect, report = best
    for j, row in enumerate(table):
        row["chosen"] = j == i
    return AdaptiveResult(recipe.scheme, grid[i], i, table, effect, report)
