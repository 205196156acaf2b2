"""Exception hierarchy shared by the library and the command-line front end.

Every error carries a stable ``code`` string and the process exit status the
CLI maps it to (2 validation, 3 convergence, 4 I/O).
"""

from __future__ import annotations


class NawtError(Exception):
    code = "nawt_error"
    exit_code = 1

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.details = details

    def to_dict(self) -> dict:
        out = {"code": self.code, "message": str(self)}
        out.update({k: _jsonable(v) for k, v in self.details.items()})
        return out


def _jsonable(value):
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if hasattr(value, "item"):
        return value.item()
    return value


class DomainError(NawtError, ValueError):
    code = "domain_error"
    exit_code = 2


class DataError(NawtError, ValueError):
    """Malformed or inconsistent input data (CSV parse, labels, non-finite)."""

    code = "data_error"
    exit_code = 2


class ConfigError(NawtError, ValueError):
    code = "config_error"
    exit_code = 2


class RankDeficientDesign(NawtError):
    code = "rank_deficient_design"
    exit_code = 2


class NonConvergence(NawtError):
    code = "non_convergence"
    exit_code = 3

    def __init__(self, message: str, score_norm: float = float("nan"), iterations: int = 0, **details):
        super().__init__(message, score_norm=score_norm, iterations=iterations, **details)
        self.score_norm = score_norm
        self.iterations = iterations


class SingularHessian(NawtError):
    code = "singular_hessian"
    exit_code = 3


class SingularWeightMatrix(NawtError):
    code = "singular_weight_matrix"
    exit_code = 3


class ZeroDenominator(NawtError):
    code = "zero_denominator"
    exit_code = 3


class TooManyFailures(NawtError):
    code = "too_many_failures"
    exit_code = 3


class NonFiniteScore(NawtError):
    code = "non_finite_score"
    exit_code = 3


class SeparationWarning(UserWarning):
    """More than 1% of fitted probabilities hit the clamp (positivity concern)."""
