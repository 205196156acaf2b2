"""Special functions, difference quotients and keyed random streams.

The only special function needed is the Gauss series
``2F1(1, 1 + a, 2 + a, z)``, which appears in the control-unit part of the
power-weighted pseudo-log-likelihood.  It is never needed while fitting; the
solvers work on the score directly.

Writing ``I_a(z) = int_0^z u**a / (1 - u) du`` we have

    2F1(1, 1 + a, 2 + a, z) = (1 + a) * I_a(z) / z**(1 + a)

and the control-unit term is ``-I_a(z)``.  ``I_a`` is evaluated by its power
series below z = 1/2, by the exact polynomial-plus-log antiderivative for
integer ``a``, and otherwise by splitting off the logarithmic part and
integrating the bounded remainder with Gauss-Legendre nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

_SERIES_CUTOFF = 0.5
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(48)


def _series_sum(z: np.ndarray, alpha: float) -> np.ndarray:
    # sum_n z^n / (n + 1 + a); z <= 1/2 keeps 64 terms well below eps.
    n = np.arange(64, dtype=float)
    return np.sum(z[..., None] ** n / (n + 1.0 + alpha), axis=-1)


def _series_tail(z: np.ndarray, alpha: float) -> np.ndarray:
    # sum_{n>=1} z^(n-1) / (n + 1 + a)
    n = np.arange(1, 64, dtype=float)
    return np.sum(z[..., None] ** (n - 1.0) / (n + 1.0 + alpha), axis=-1)


def _series_integral(z: np.ndarray, alpha: float) -> np.ndarray:
    # I_a(z) = z^(1+a) * sum_n z^n / (n + 1 + a)
    return z ** (1.0 + alpha) * _series_sum(z, alpha)


def _integer_integral(z: np.ndarray, m: int) -> np.ndarray:
    j = np.arange(1, m + 1, dtype=float)
    poly = np.sum(z[..., None] ** j / j, axis=-1) if m > 0 else 0.0
    return -np.log1p(-z) - poly


def _bounded_remainder(z: np.ndarray, alpha: float) -> np.ndarray:
    # int_{1/2}^z (1 - u^a) / (1 - u) du; integrand is analytic on [1/2, 1].
    lo = _SERIES_CUTOFF
    half = 0.5 * (z - lo)
    u = lo + half[..., None] * (_GL_NODES + 1.0)
    f = -np.expm1(alpha * np.log(u)) / (1.0 - u)
    return half * np.sum(f * _GL_WEIGHTS, axis=-1)


def _power_log_integral(z, alpha: float) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = z <= _SERIES_CUTOFF
    if np.any(small):
        out[small] = _series_integral(z[small], alpha)
    big = ~small
    if np.any(big):
        zb = z[big]
        if float(alpha).is_integer():
            out[big] = _integer_integral(zb, int(alpha))
        else:
            head = _series_integral(np.array([_SERIES_CUTOFF]), alpha)[0]
            log_part = np.log(_SERIES_CUTOFF) - np.log1p(-zb)
            out[big] = head + log_part - _bounded_remainder(zb, alpha)
    return out


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not np.isfinite(alpha) or alpha < 0:
        raise DomainError(f"alpha must be a finite non-negative number, got {alpha}", alpha=alpha)
    return alpha


def hyp2f1_1b(alpha: float, z):
    """Evaluate ``2F1(1, 1 + alpha, 2 + alpha, z)`` for ``0 <= z < 1``.

    Scalar input gives a float, array input an array.
    """
    alpha = _check_alpha(alpha)
    arr = np.asarray(z, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0) or np.any(arr >= 1):
        raise DomainError("hyp2f1_1b requires 0 <= z < 1", alpha=alpha)
    out = np.ones_like(arr)
    pos = arr > 0
    if np.any(pos):
        zp = arr[pos]
        small = zp <= _SERIES_CUTOFF
        vals = np.empty_like(zp)
        # Direct Gauss series: coefficients (1 + a) / (n + 1 + a).
        if np.any(small):
            zs = zp[small]
            # leading term is exactly 1; summing only the tail keeps F >= 1
            vals[small] = 1.0 + (1.0 + alpha) * zs * _series_tail(zs, alpha)
        if np.any(~small):
            zb = zp[~small]
            vals[~small] = (1.0 + alpha) * _power_log_integral(zb, alpha) / zb ** (1.0 + alpha)
        out[pos] = vals
    return float(out) if out.ndim == 0 else out


def control_loglik_term(pi, alpha: float):
    """Control-unit pseudo-log-likelihood ``-int_0^pi u**alpha / (1 - u) du``.

    With ``alpha = 0`` this is ``log(1 - pi)``, the binomial control term.
    """
    alpha = _check_alpha(alpha)
    arr = np.asarray(pi, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr <= 0) or np.any(arr >= 1):
        raise DomainError("control_loglik_term requires 0 < pi < 1", alpha=alpha)
    out = -_power_log_integral(arr, alpha)
    return float(out) if out.ndim == 0 else out


def treated_loglik_term(pi, alpha: float):
    """Treated-unit pseudo-log-likelihood ``pi**alpha / alpha`` (``log(pi)`` at alpha 0)."""
    alpha = _check_alpha(alpha)
    arr = np.asarray(pi, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr <= 0) or np.any(arr >= 1):
        raise DomainError("treated_loglik_term requires 0 < pi < 1", alpha=alpha)
    out = np.log(arr) if alpha == 0 else arr**alpha / alpha
    return float(out) if np.ndim(out) == 0 else out


def finite_diff_gradient(f, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function ``f`` at ``x``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    grad = np.empty_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = h
        grad[i] = (f(x + step) - f(x - step)) / (2.0 * h)
    return grad


@dataclass(frozen=True)
class RngStream:
    """Random stream keyed by ``(seed, stream_id)``.

    The key feeds ``numpy.random.SeedSequence`` as entropy plus spawn key, so a
    replicate's draws depend only on its own index and never on which worker
    produced them or in what order.
    """

    seed: int
    stream_id: int = 0
    generator: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.seed < 0 or self.stream_id < 0:
            raise DomainError("seed and stream_id must be non-negative", seed=self.seed, stream_id=self.stream_id)
        seq = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id),))
        object.__setattr__(self, "generator", np.random.Generator(np.random.PCG64(seq)))

    def normal(self, size=None):
        return self.generator.standard_normal(size)

    def uniform(self, size=None):
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def bernoulli(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return (self.generator.random(p.shape) < p).astype(float)
