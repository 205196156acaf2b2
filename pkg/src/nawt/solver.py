"""Propensity fitting: weighted score equations and covariate-balance GMM.

The weighted score for a logistic model is

    s(beta) = (1/n) * sum_i (t_i - pi_i) * omega(pi_i) * x_i

and ``fit_nawt`` finds its root by Newton iterations with the analytic
Jacobian.  Every scheme's score integrates to a pseudo-log-likelihood (closed
form, or a hypergeometric term for power weights); it is used only to accept
or shorten line-search steps.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from . import numerics
from .errors import (
    DataError,
    DomainError,
    NonConvergence,
    NonFiniteScore,
    RankDeficientDesign,
    SeparationWarning,
    SingularWeightMatrix,
)
from .model import EPS, Dataset, WeightingScheme, clamp_count, logistic_pi, omega, omega_prime

DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITER = 100


@dataclass(frozen=True, eq=False)
class PropensityFit:
    beta: np.ndarray
    pi_hat: np.ndarray
    score_norm: float
    iterations: int
    pseudo_loglik: float
    scheme: WeightingScheme
    converged: bool
    n_clamped: int = 0
    start: str = "zero"


@dataclass(frozen=True, eq=False)
class GmmFit:
    beta: np.ndarray
    pi_hat: np.ndarray
    objective: float
    moment_values: np.ndarray
    weight_matrix_kind: str
    balance_cols: tuple
    scheme: Optional[WeightingScheme]
    converged: bool
    iterations: int
    objective_trace: tuple = field(default=())
    vcov_beta: Optional[np.ndarray] = None
    start: str = "zero"


# ---------------------------------------------------------------- scores


def unit_scores(beta, dataset: Dataset, scheme: WeightingScheme) -> np.ndarray:
    """Per-unit score contributions, an n x k matrix."""
    pi = logistic_pi(beta, dataset.x)
    r = (dataset.t - pi) * omega(scheme, pi)
    return r[:, None] * dataset.x


def weighted_score(beta, dataset: Dataset, scheme: WeightingScheme) -> np.ndarray:
    """Mean weighted score ``(1/n) sum (t - pi) omega(pi) x``."""
    contrib = unit_scores(beta, dataset, scheme)
    s = contrib.mean(axis=0)
    if not np.all(np.isfinite(s)):
        bad = np.flatnonzero(~np.all(np.isfinite(contrib), axis=1))
        unit = int(bad[0]) if bad.size else -1
        raise NonFiniteScore(f"non-finite score contribution at unit {unit}", unit=unit)
    return s


def score_jacobian(beta, dataset: Dataset, scheme: WeightingScheme) -> np.ndarray:
    """``d s / d beta^T`` for the logistic link (symmetric k x k)."""
    pi = logistic_pi(beta, dataset.x)
    dpi = pi * (1.0 - pi)
    d = (-omega(scheme, pi) + (dataset.t - pi) * omega_prime(scheme, pi)) * dpi
    x = dataset.x
    return (x * d[:, None]).T @ x / dataset.n


def _unit_pseudo_loglik(pi, eta, t, scheme: WeightingScheme) -> np.ndarray:
    kind, a = scheme.kind, scheme.alpha
    if kind == "mle" or (kind == "power" and a == 0):
        return t * np.log(pi) + (1 - t) * np.log1p(-pi)
    if kind == "power":
        out = np.empty_like(pi)
        treated = t == 1
        out[treated] = numerics.treated_loglik_term(pi[treated], a)
        if np.any(~treated):
            out[~treated] = numerics.control_loglik_term(pi[~treated], a)
        return out
    if kind == "power-rev":
        # (1 - pi)^a weighting is the power scheme on the flipped indicator.
        return _unit_pseudo_loglik(1.0 - pi, -eta, 1.0 - t, WeightingScheme.power(a))
    if kind == "combined":
        return _unit_pseudo_loglik(pi, eta, t, WeightingScheme.power(a)) + _unit_pseudo_loglik(
            pi, eta, t, WeightingScheme.power_rev(a)
        )
    if kind == "cbps-att":
        return t * eta - (1 - t) * np.exp(eta)
    return t * (eta - np.exp(-eta)) - (1 - t) * (eta + np.exp(eta))


def pseudo_loglik(beta, dataset: Dataset, scheme: WeightingScheme) -> float:
    """Pseudo-log-likelihood whose gradient in beta is ``n * weighted_score``.

    Power weights use the hypergeometric control term; the other schemes
    integrate in closed form.  ``power(0)`` is the binomial log-likelihood.
    """
    beta = np.asarray(beta, dtype=float)
    eta = dataset.x @ beta
    pi = logistic_pi(beta, dataset.x)
    return float(np.sum(_unit_pseudo_loglik(pi, eta, dataset.t, scheme)))


# ---------------------------------------------------------------- design checks


def check_rank(x: np.ndarray, names: Sequence[str] = ()) -> None:
    """Raise :class:`RankDeficientDesign` unless ``x`` has full column rank."""
    _, r, piv = scipy.linalg.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0:
        raise RankDeficientDesign("design matrix is zero", columns=list(range(x.shape[1])))
    rank = int(np.sum(diag > 1e-10 * diag[0]))
    if rank < x.shape[1]:
        cols = sorted(int(c) for c in piv[rank:])
        labels = [names[c] for c in cols] if names else cols
        raise RankDeficientDesign(f"design is rank deficient; dependent columns {labels}", columns=cols)


# ---------------------------------------------------------------- Newton on the score


def _ascent_direction(jac, s):
    # Newton step when -J is positive definite, otherwise shift -J until it is.
    neg = -0.5 * (jac + jac.T)
    try:
        chol = scipy.linalg.cho_factor(neg)
        step = scipy.linalg.cho_solve(chol, s)
        if np.all(np.isfinite(step)):
            return step
    except (np.linalg.LinAlgError, ValueError):
        pass
    eig = np.linalg.eigvalsh(neg)
    shift = max(-eig[0], 0.0) + 1e-8 * max(abs(eig[-1]), 1.0)
    return np.linalg.solve(neg + shift * np.eye(len(s)), s)


def _mean_pseudo_loglik(beta, dataset, scheme):
    return pseudo_loglik(beta, dataset, scheme) / dataset.n


def _solve_newton(beta0, dataset, scheme, tol, max_iter):
    """Maximize the pseudo-log-likelihood by safeguarded Newton steps.

    Steps must raise the objective (Armijo), or, once changes in the
    objective are at rounding level, leave it unchanged while shrinking the
    score.  Merit on the score norm alone is not enough: power weights make
    the score vanish as every probability goes to zero.
    """
    beta = np.array(beta0, dtype=float)
    s = weighted_score(beta, dataset, scheme)
    obj = _mean_pseudo_loglik(beta, dataset, scheme)
    norm = float(np.linalg.norm(s))
    it = 0
    while it < max_iter:
        if np.max(np.abs(s)) <= tol:
            beta, s = _polish(beta, s, dataset, scheme)
            return beta, s, it, True
        it += 1
        jac = score_jacobian(beta, dataset, scheme)
        direction = _ascent_direction(jac, s)
        slope = float(s @ direction)
        flat = 1e-13 * (1.0 + abs(obj))
        accepted = False
        t = 1.0
        while t >= 1e-12:
            cand = beta + t * direction
            try:
                s_c = weighted_score(cand, dataset, scheme)
                obj_c = _mean_pseudo_loglik(cand, dataset, scheme)
            except (DomainError, NonFiniteScore):
                t *= 0.5
                continue
            n_c = float(np.linalg.norm(s_c))
            if not np.isfinite(obj_c):
                t *= 0.5
                continue
            if obj_c >= obj + 1e-4 * t * slope or (obj_c >= obj - flat and n_c <= (1.0 - 1e-4 * t) * norm):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            return beta, s, it, bool(np.max(np.abs(s)) <= tol)
        beta, s, obj, norm = cand, s_c, obj_c, n_c
    return beta, s, it, bool(np.max(np.abs(s)) <= tol)


def _polish(beta, s, dataset, scheme):
    # one extra full Newton step: the score tolerance leaves ~1e-8 in beta
    try:
        cand = beta - np.linalg.solve(score_jacobian(beta, dataset, scheme), s)
        s_c = weighted_score(cand, dataset, scheme)
    except (np.linalg.LinAlgError, DomainError, NonFiniteScore):
        return beta, s
    if np.all(np.isfinite(s_c)) and np.max(np.abs(s_c)) <= np.max(np.abs(s)):
        return cand, s_c
    return beta, s


def _mle_start(dataset, tol, max_iter):
    beta, _, _, ok = _solve_newton(np.zeros(dataset.k), dataset, WeightingScheme.mle(), tol, max_iter)
    return beta if ok else None


def fit_nawt(
    dataset: Dataset,
    scheme: WeightingScheme,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    init=None,
    check_design: bool = True,
) -> PropensityFit:
    """Solve the weighted score equation for ``scheme``.

    Starts from ``init`` (zeros by default) and restarts from the maximum
    likelihood fit if the first attempt stalls.
    """
    if check_design:
        check_rank(dataset.x, dataset.names)
    start = np.zeros(dataset.k) if init is None else np.asarray(init, dtype=float)
    beta, s, iters, ok = _solve_newton(start, dataset, scheme, tol, max_iter)
    label = "zero" if init is None else "init"
    total = iters
    if not ok and scheme.kind != "mle":
        mle = _mle_start(dataset, tol, max_iter)
        if mle is not None:
            b2, s2, it2, ok2 = _solve_newton(mle, dataset, scheme, tol, max_iter)
            total += it2
            if ok2 or np.max(np.abs(s2)) < np.max(np.abs(s)):
                beta, s, ok, label = b2, s2, ok2, "mle"
    score_norm = float(np.max(np.abs(s)))
    if not ok:
        raise NonConvergence(
            f"weighted score did not reach {tol:g} (last norm {score_norm:.3g})",
            score_norm=score_norm,
            iterations=total,
            scheme=scheme.label,
        )
    pi_hat = logistic_pi(beta, dataset.x)
    n_clamped = clamp_count(beta, dataset.x)
    if n_clamped > 0.01 * dataset.n:
        warnings.warn(
            f"{n_clamped} of {dataset.n} fitted probabilities clamped at {EPS:g}; check overlap",
            SeparationWarning,
            stacklevel=2,
        )
    ll = pseudo_loglik(beta, dataset, scheme)
    return PropensityFit(
        beta=beta,
        pi_hat=pi_hat,
        score_norm=score_norm,
        iterations=total,
        pseudo_loglik=ll,
        scheme=scheme,
        converged=True,
        n_clamped=n_clamped,
        start=label,
    )


# ---------------------------------------------------------------- GMM with balance moments


def _resolve_balance(dataset: Dataset, balance):
    if balance is None:
        return dataset.x, tuple(dataset.names)
    if isinstance(balance, np.ndarray):
        xt = balance.reshape(dataset.n, -1).astype(float)
        return xt, tuple(f"b{j}" for j in range(xt.shape[1]))
    cols = []
    for name in balance:
        if name not in dataset.names:
            raise DataError(f"balance column {name!r} is not a covariate", column=name)
        cols.append(dataset.names.index(name))
    return dataset.x[:, cols], tuple(balance)


class _GmmProblem:
    def __init__(self, dataset, scheme, xt, use_score, kind):
        self.ds = dataset
        self.scheme = scheme
        self.xt = xt
        self.use_score = use_score
        self.kind = kind
        self.k = dataset.k
        self.p = xt.shape[1]

    def pieces(self, beta):
        ds = self.ds
        x, t, xt = ds.x, ds.t, self.xt
        pi = logistic_pi(beta, x)
        q = 1.0 - pi
        odds = pi / q
        c_res = t - (1.0 - t) * odds
        g_cols = []
        jac_rows = []
        if self.use_score:
            w = omega(self.scheme, pi)
            g_cols.append(((t - pi) * w)[:, None] * x)
            d = (-w + (t - pi) * omega_prime(self.scheme, pi)) * pi * q
            jac_rows.append((x * d[:, None]).T @ x / ds.n)
        g_cols.append(c_res[:, None] * xt)
        jac_rows.append(-((xt * ((1.0 - t) * odds)[:, None]).T @ x) / ds.n)
        g = np.hstack(g_cols)
        return pi, g, g.mean(axis=0), np.vstack(jac_rows)

    def cu_sigma(self, pi):
        ds = self.ds
        x, xt, n = ds.x, self.xt, ds.n
        q = 1.0 - pi
        cc = (xt * (pi / q)[:, None]).T @ xt / n
        if not self.use_score:
            return cc
        w = omega(self.scheme, pi)
        ss = (x * (w * pi * q)[:, None]).T @ x / n
        sc = (x * (w * pi)[:, None]).T @ xt / n
        return np.block([[ss, sc], [sc.T, cc]])

    def cu_sigma_grad_term(self, pi, v):
        # v' (d Sigma / d beta_j) v for every j, using dpi/deta = pi (1 - pi).
        ds = self.ds
        q = 1.0 - pi
        dpi = pi * q
        if self.use_score:
            vs, vc = v[: self.k], v[self.k :]
        else:
            vc = v
        b = self.xt @ vc
        quad = (1.0 / q**2) * b**2
        if self.use_score:
            w = omega(self.scheme, pi)
            wp = omega_prime(self.scheme, pi)
            a = ds.x @ vs
            d_ss = wp * pi * q + w * (1.0 - 2.0 * pi)
            d_sc = wp * pi + w
            quad = quad + d_ss * a**2 + 2.0 * d_sc * a * b
        return ds.x.T @ (dpi * quad) / ds.n

    def evaluate(self, beta):
        pi, g, gbar, G = self.pieces(beta)
        if self.kind == "identity":
            a_mat = np.eye(gbar.size)
            v = gbar
            f = float(gbar @ gbar)
            grad = 2.0 * G.T @ gbar
        else:
            sigma = self.cu_sigma(pi)
            cond = np.linalg.cond(sigma)
            if not np.isfinite(cond) or cond > 1e14:
                raise SingularWeightMatrix(
                    f"continuously-updating covariance is singular (condition number {cond:.3g})",
                    condition_number=float(cond),
                )
            a_mat = np.linalg.inv(sigma)
            a_mat = 0.5 * (a_mat + a_mat.T)
            v = a_mat @ gbar
            f = float(gbar @ v)
            grad = 2.0 * G.T @ v - self.cu_sigma_grad_term(pi, v)
        return f, grad, G, a_mat, g, gbar, pi


def _minimize_gmm(problem: _GmmProblem, beta0, tol, max_iter):
    beta = np.array(beta0, dtype=float)
    f, grad, G, A, *_ = problem.evaluate(beta)
    trace = [f]
    it = 0
    converged = False
    while it < max_iter:
        if np.max(np.abs(grad)) <= tol or f <= 1e-28:
            converged = True
            break
        it += 1
        hess = 2.0 * G.T @ A @ G
        diag = np.diag(hess).copy()
        diag[diag <= 0] = 1.0
        accepted = False
        for lam in (0.0, 1e-6, 1e-3, 1e-1, 10.0):
            try:
                d = np.linalg.solve(hess + lam * np.diag(diag), -grad)
            except np.linalg.LinAlgError:
                continue
            slope = float(grad @ d)
            if not np.isfinite(slope) or slope >= 0:
                continue
            t = 1.0
            while t >= 1e-12:
                cand = beta + t * d
                try:
                    res = problem.evaluate(cand)
                except (DomainError, SingularWeightMatrix):
                    t *= 0.5
                    continue
                if res[0] <= f + 1e-4 * t * slope:
                    accepted = True
                    break
                t *= 0.5
            if accepted:
                break
        if not accepted:
            # No descent available at working precision: stationary point.
            converged = bool(np.max(np.abs(grad)) <= 1e3 * tol)
            break
        f_old = f
        beta = cand
        f, grad, G, A, *_ = res
        trace.append(f)
        if f_old - f <= 1e-15 * max(f_old, 1e-300) and np.max(np.abs(grad)) <= 1e3 * tol:
            converged = True
            break
    return beta, f, it, converged, trace


def fit_gmm(
    dataset: Dataset,
    scheme: Optional[WeightingScheme],
    balance=None,
    weight_matrix_kind: str = "cu",
    score_moments: bool = True,
    tol: float = DEFAULT_TOL,
    max_iter: int = 200,
) -> GmmFit:
    """Over-identified GMM on weighted-score plus covariate-balance moments.

    ``balance`` is a list of covariate names, an explicit n x p array of
    balancing functions, or None for all design columns.  With
    ``score_moments=False`` only the balance conditions enter, which for
    ``balance=None`` and the identity weight is the just-identified balancing
    fit.  ``weight_matrix_kind`` is ``cu`` (continuously updated inverse
    covariance, t integrated out given x) or ``identity``.
    """
    if weight_matrix_kind not in ("cu", "identity"):
        raise DomainError(f"unknown weight matrix kind {weight_matrix_kind!r}")
    if score_moments and scheme is None:
        raise DomainError("score moments need a weighting scheme")
    check_rank(dataset.x, dataset.names)
    xt, labels = _resolve_balance(dataset, balance)
    problem = _GmmProblem(dataset, scheme, xt, score_moments, weight_matrix_kind)
    starts = [("zero", np.zeros(dataset.k))]
    mle = _mle_start(dataset, DEFAULT_TOL, DEFAULT_MAX_ITER)
    if mle is not None:
        starts.append(("mle", mle))
    best = None
    first_error = None
    for label, b0 in starts:
        try:
            beta, f, it, ok, trace = _minimize_gmm(problem, b0, tol, max_iter)
        except SingularWeightMatrix as exc:
            first_error = first_error or exc
            continue
        if best is None or (ok and not best[3]) or (ok == best[3] and f < best[1]):
            best = (beta, f, it, ok, trace, label)
    if best is None:
        raise first_error
    beta, f, it, ok, trace, label = best
    if not ok:
        raise NonConvergence("GMM objective did not converge", score_norm=f, iterations=it)
    _, grad, G, A, g, gbar, pi = problem.evaluate(beta)
    omega_hat = g.T @ g / dataset.n
    bread = np.linalg.inv(G.T @ A @ G)
    vcov = bread @ G.T @ A @ omega_hat @ A @ G @ bread / dataset.n
    return GmmFit(
        beta=beta,
        pi_hat=pi,
        objective=f,
        moment_values=gbar,
        weight_matrix_kind=weight_matrix_kind,
        balance_cols=labels,
        scheme=scheme if score_moments else None,
        converged=ok,
        iterations=it,
        objective_trace=tuple(trace),
        vcov_beta=0.5 * (vcov + vcov.T),
        start=label,
    )
