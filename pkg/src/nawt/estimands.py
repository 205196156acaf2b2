"""Inverse probability weights and weighted-mean effect estimates.

Every estimate here is a contrast of weighted arm means.  Each arm mean is
described by a :class:`MeanComponent` (which units it averages, which
propensity fit drives its weights, and how the weight moves with the linear
predictor), so the variance code can rebuild the stacked estimating
equations from the same description instead of re-deriving them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import DomainError, ZeroDenominator
from .model import Dataset, EstimandSpec, WeightingScheme
from .solver import GmmFit, PropensityFit, fit_gmm, fit_nawt

Fit = Union[PropensityFit, GmmFit]

# weight kinds: name -> (w(pi), dw/deta)
_WEIGHTS = {
    "one": (lambda p: np.ones_like(p), lambda p: np.zeros_like(p)),
    "odds": (lambda p: p / (1.0 - p), lambda p: p / (1.0 - p)),
    "inv_pi": (lambda p: 1.0 / p, lambda p: -(1.0 - p) / p),
    "inv_one_minus_pi": (lambda p: 1.0 / (1.0 - p), lambda p: p / (1.0 - p)),
}


@dataclass(frozen=True, eq=False)
class MeanComponent:
    """One weighted arm mean: units with ``mask == 1`` weighted by ``weight(pi)``.

    ``fit`` indexes ``EffectEstimate.fits`` (None when the weights are constant).
    ``ht_norm`` is the per-unit count whose sum is the Horvitz-Thompson
    denominator (treated indicator for ATT-type means, ones otherwise).
    """

    name: str
    mask: np.ndarray
    weight: str
    fit: Optional[int]
    ht_norm: np.ndarray
    value: float


@dataclass(frozen=True, eq=False)
class EffectEstimate:
    tau: float
    weights: np.ndarray
    estimand: EstimandSpec
    fits: tuple
    estimator: str = "hajek"
    components: tuple = field(default=(), repr=False)
    contrast: tuple = field(default=(), repr=False)
    dataset: Optional[Dataset] = field(default=None, repr=False)

    @property
    def means(self) -> dict:
        return {c.name: c.value for c in self.components}


def _pi_of(fit) -> np.ndarray:
    if isinstance(fit, (PropensityFit, GmmFit)):
        return fit.pi_hat
    p = np.asarray(fit, dtype=float)
    if np.any(~(p > 0)) or np.any(~(p < 1)):
        raise DomainError("propensity scores must lie in (0, 1)")
    return p


def _weighted_mean(mask, w, y, ht_norm, estimator, name):
    mw = mask * w
    # y may hold NaN on units the mean never reads.
    yy = np.where(mask > 0, y, 0.0)
    denom = mw.sum() if estimator == "hajek" else ht_norm.sum()
    if not denom > 0:
        raise ZeroDenominator(f"weights for {name} sum to zero", component=name)
    return float(np.sum(mw * yy) / denom)


def _check_estimator(estimator):
    if estimator not in ("hajek", "ht"):
        raise DomainError(f"estimator must be 'hajek' or 'ht', got {estimator!r}")


def _build(dataset, parts, contrast, estimand, fits, estimator, y):
    comps = []
    weights = np.zeros(dataset.n)
    for name, mask, wkind, fit_idx, ht_norm in parts:
        pi = _pi_of(fits[fit_idx]) if fit_idx is not None else np.full(dataset.n, 0.5)
        w = _WEIGHTS[wkind][0](pi)
        value = _weighted_mean(mask, w, y, ht_norm, estimator, name)
        weights = np.where(mask > 0, w, weights)
        comps.append(MeanComponent(name, mask, wkind, fit_idx, ht_norm, value))
    tau = float(sum(c * comp.value for c, comp in zip(contrast, comps)))
    return EffectEstimate(
        tau=tau,
        weights=weights,
        estimand=EstimandSpec(estimand),
        fits=tuple(fits),
        estimator=estimator,
        components=tuple(comps),
        contrast=tuple(contrast),
        dataset=dataset,
    )


def estimate_att(dataset: Dataset, fit, estimator: str = "hajek") -> EffectEstimate:
    """Treated mean minus the odds-weighted control mean.

    ``fit`` is a propensity fit or an array of fitted probabilities.
    """
    _check_estimator(estimator)
    y = dataset.require_outcome()
    t = dataset.t
    parts = [
        ("mu1", t, "one", None, t),
        ("mu0", 1.0 - t, "odds", 0, t),
    ]
    return _build(dataset, parts, (1.0, -1.0), "att", [fit], estimator, y)


def estimate_atc(dataset: Dataset, fit_on_relabeled, estimator: str = "hajek") -> EffectEstimate:
    """Effect on the controls via the treated effect of the flipped indicator.

    ``fit_on_relabeled`` models ``Pr(t = 0 | x)``.  The returned components
    live on the relabeled data; ``tau`` and ``weights`` are in original terms.
    """
    flipped = dataset.relabeled()
    inner = estimate_att(flipped, fit_on_relabeled, estimator)
    return EffectEstimate(
        tau=-inner.tau,
        weights=inner.weights,
        estimand=EstimandSpec("atc"),
        fits=inner.fits,
        estimator=estimator,
        components=inner.components,
        contrast=tuple(-c for c in inner.contrast),
        dataset=flipped,
    )


def estimate_ate(dataset: Dataset, fit0, fit1=None, mode: str = "separate", estimator: str = "hajek") -> EffectEstimate:
    """Difference of inverse-probability weighted arm means.

    In ``separate`` mode ``fit0`` (tuned for the controls, e.g. power weights)
    drives the control mean through ``1/(1 - pi0)`` and ``fit1`` (e.g. reversed
    power weights) drives the treated mean through ``1/pi1``.  In ``combined``
    mode a single fit serves both arms and ``fit1`` must be None or ``fit0``.
    """
    _check_estimator(estimator)
    if mode not in ("separate", "combined"):
        raise DomainError(f"mode must be 'separate' or 'combined', got {mode!r}")
    y = dataset.require_outcome()
    t = dataset.t
    ones = np.ones(dataset.n)
    if mode == "combined" or fit1 is None or fit1 is fit0:
        if mode == "separate" and fit1 is None:
            raise DomainError("separate mode needs both fits")
        fits = [fit0]
        i0 = i1 = 0
    else:
        fits = [fit0, fit1]
        i0, i1 = 0, 1
    parts = [
        ("mu1", t, "inv_pi", i1, ones),
        ("mu0", 1.0 - t, "inv_one_minus_pi", i0, ones),
    ]
    kind = "ate-separate" if mode == "separate" else "ate-combined"
    return _build(dataset, parts, (1.0, -1.0), kind, fits, estimator, y)


def estimate_ao(dataset: Dataset, fit, estimator: str = "hajek") -> EffectEstimate:
    """Average outcome when ``t`` flags missing outcomes.

    Observed units carry weight ``1/(1 - pi)``; missing units carry zero.
    """
    _check_estimator(estimator)
    y = dataset.require_outcome(where="observed")
    parts = [("mu", 1.0 - dataset.t, "inv_one_minus_pi", 0, np.ones(dataset.n))]
    return _build(dataset, parts, (1.0,), "ao", [fit], estimator, y)


def relative_impact_profile(dataset: Dataset, fit, n_bins: int = 10) -> list:
    """Binned sample analogue of each control unit's pull on the ATT.

    For control units with fitted probability in each equal-width bin,
    reports ``-mean((y - mu0) / (1 - pi)**2)`` where ``mu0`` is the weighted
    control mean.  Bins without controls are returned with ``value = nan``.
    """
    if n_bins < 1:
        raise DomainError("n_bins must be positive")
    effect = estimate_att(dataset, fit)
    mu0 = effect.means["mu0"]
    pi = _pi_of(fit)
    y = dataset.y
    control = dataset.t == 0
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip(np.digitize(pi, edges[1:-1]), 0, n_bins - 1)
    rows = []
    for b in range(n_bins):
        sel = control & (idx == b)
        count = int(sel.sum())
        value = float(-np.mean((y[sel] - mu0) / (1.0 - pi[sel]) ** 2)) if count else float("nan")
        rows.append({"bin_lo": float(edges[b]), "bin_hi": float(edges[b + 1]), "n_control": count, "value": value})
    return rows


# ---------------------------------------------------------------- full recipes


@dataclass(frozen=True)
class Recipe:
    """Propensity fit(s) plus effect estimate, re-runnable on resampled data.

    ``scheme`` is interpreted per estimand: for ``ate-separate`` a power (or
    reversed power) scheme with exponent alpha yields the pair
    (power(alpha), power-rev(alpha)); ``mle`` uses one logistic fit for both
    arms.  A non-empty ``balance`` switches ATT/ATC/AO fits to the GMM with
    balance moments.
    """

    estimand: str
    scheme: WeightingScheme
    estimator: str = "hajek"
    balance: Optional[Sequence[str]] = None
    weight_matrix_kind: str = "cu"

    def __post_init__(self):
        EstimandSpec(self.estimand)
        _check_estimator(self.estimator)
        if self.estimand == "ate-separate" and self.scheme.kind not in ("mle", "power", "power-rev"):
            raise DomainError(
                f"separate ATE needs a power, power-rev or mle scheme, got {self.scheme.kind!r}",
                scheme=self.scheme.kind,
            )
        if self.balance and self.estimand.startswith("ate"):
            raise DomainError("balance moments are implemented for ATT-type estimands (att, atc, ao)")

    def _fit(self, dataset: Dataset, scheme: WeightingScheme):
        if self.balance:
            balance = None if list(self.balance) == ["*"] else list(self.balance)
            return fit_gmm(dataset, scheme, balance, self.weight_matrix_kind)
        return fit_nawt(dataset, scheme)

    def run(self, dataset: Dataset) -> EffectEstimate:
        kind = self.estimand
        if kind == "att":
            return estimate_att(dataset, self._fit(dataset, self.scheme), self.estimator)
        if kind == "atc":
            flipped = dataset.relabeled()
            return estimate_atc(dataset, self._fit(flipped, self.scheme), self.estimator)
        if kind == "ao":
            return estimate_ao(dataset, self._fit(dataset, self.scheme), self.estimator)
        if kind == "ate-combined":
            return estimate_ate(dataset, fit_nawt(dataset, self.scheme), mode="combined", estimator=self.estimator)
        if self.scheme.kind == "mle" or self.scheme.alpha == 0:
            fit = fit_nawt(dataset, WeightingScheme.mle())
            return estimate_ate(dataset, fit, fit, mode="separate", estimator=self.estimator)
        a = self.scheme.alpha
        fit0 = fit_nawt(dataset, WeightingScheme.power(a))
        fit1 = fit_nawt(dataset, WeightingScheme.power_rev(a))
        return estimate_ate(dataset, fit0, fit1, mode="separate", estimator=self.estimator)

    __call__ = run
