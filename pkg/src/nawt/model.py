"""Datasets, the logistic propensity model and the score-weighting family."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import DataError, DomainError

EPS = 1e-12

SCHEME_KINDS = ("mle", "power", "power-rev", "combined", "cbps-att", "cbps-ate")
ESTIMAND_KINDS = ("att", "atc", "ate-separate", "ate-combined", "ao")


@dataclass(frozen=True)
class WeightingScheme:
    """Weight ``omega(pi)`` multiplying each unit's logistic score contribution.

    ``kind`` is one of ``mle`` (1), ``power`` (pi**alpha), ``power-rev``
    ((1-pi)**alpha), ``combined`` (pi**alpha + (1-pi)**alpha), ``cbps-att``
    (1/(1-pi)) and ``cbps-ate`` (1/(pi(1-pi))).
    """

    kind: str
    alpha: float = 0.0

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise DomainError(f"unknown weighting scheme {self.kind!r}", kind=self.kind)
        alpha = float(self.alpha)
        if not math.isfinite(alpha) or alpha < 0:
            raise DomainError(f"alpha must be finite and >= 0, got {self.alpha}", alpha=self.alpha)
        object.__setattr__(self, "alpha", alpha)

    @classmethod
    def mle(cls):
        return cls("mle")

    @classmethod
    def power(cls, alpha):
        return cls("power", alpha)

    @classmethod
    def power_rev(cls, alpha):
        return cls("power-rev", alpha)

    @classmethod
    def combined(cls, alpha):
        return cls("combined", alpha)

    @classmethod
    def cbps_att(cls):
        return cls("cbps-att")

    @classmethod
    def cbps_ate(cls):
        return cls("cbps-ate")

    @property
    def label(self) -> str:
        if self.kind in ("power", "power-rev", "combined"):
            return f"{self.kind}({self.alpha:g})"
        return self.kind


@dataclass(frozen=True)
class EstimandSpec:
    kind: str

    def __post_init__(self):
        if self.kind not in ESTIMAND_KINDS:
            raise DomainError(f"unknown estimand {self.kind!r}", kind=self.kind)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Covariates ``x`` (n x k), 0/1 indicator ``t`` and optional outcome ``y``.

    For the average-outcome problem ``t`` is the missingness indicator and
    ``y`` holds NaN on the missing rows.
    """

    x: np.ndarray
    t: np.ndarray
    y: Optional[np.ndarray] = None
    names: tuple = field(default=())

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        t = np.array(self.t, dtype=float).ravel()
        if x.ndim != 2 or x.shape[0] != t.size:
            raise DataError("x must be n x k with one row per entry of t", x_shape=list(x.shape), n=int(t.size))
        n, k = x.shape
        if n < 2:
            raise DataError("a dataset needs at least two units", n=n)
        if not np.all((t == 0) | (t == 1)):
            bad = int(np.flatnonzero((t != 0) & (t != 1))[0])
            raise DataError(f"indicator must be 0/1; row {bad} has {t[bad]!r}", row=bad)
        n1 = int(t.sum())
        if n1 == 0 or n1 == n:
            raise DataError("both indicator classes must be non-empty", n=n, n1=n1)
        if not np.all(np.isfinite(x)):
            row, col = (int(v) for v in np.argwhere(~np.isfinite(x))[0])
            raise DataError(f"non-finite covariate at row {row}, column {col}", row=row, column=col)
        y = None
        if self.y is not None:
            y = np.array(self.y, dtype=float).ravel()
            if y.size != n:
                raise DataError("y must have one entry per unit", n=n, y_size=int(y.size))
            if np.any(np.isinf(y)):
                raise DataError("outcome contains infinite values")
            y.setflags(write=False)
        names = tuple(self.names) if self.names else tuple(f"x{j}" for j in range(k))
        if len(names) != k:
            raise DataError("one covariate name per column required", k=k, names=len(names))
        x.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "names", names)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def k(self) -> int:
        return self.x.shape[1]

    @property
    def n1(self) -> int:
        return int(self.t.sum())

    def relabeled(self) -> "Dataset":
        """Copy with the indicator flipped, ``t -> 1 - t``."""
        return Dataset(self.x, 1.0 - self.t, self.y, self.names)

    def subset(self, idx) -> "Dataset":
        y = None if self.y is None else self.y[idx]
        return Dataset(self.x[idx], self.t[idx], y, self.names)

    def with_columns(self, x: np.ndarray, names: Sequence[str]) -> "Dataset":
        return Dataset(x, self.t, self.y, tuple(names))

    def require_outcome(self, where: str = "all") -> np.ndarray:
        """Return ``y`` after checking it is finite where the estimand reads it.

        ``where`` is ``all`` or ``observed`` (rows with t == 0, as in the
        average-outcome problem).
        """
        if self.y is None:
            raise DataError("this estimand needs an outcome column")
        mask = np.ones(self.n, bool) if where == "all" else self.t == 0
        if not np.all(np.isfinite(self.y[mask])):
            row = int(np.flatnonzero(mask & ~np.isfinite(self.y))[0])
            raise DataError(f"missing outcome at row {row}", row=row)
        return self.y


def logistic_pi(beta, x) -> np.ndarray:
    """Clamped logistic probability ``expit(x @ beta)``; ``x`` may be a row or a matrix."""
    beta = np.asarray(beta, dtype=float)
    x = np.asarray(x, dtype=float)
    eta = x @ beta
    if not np.all(np.isfinite(eta)):
        raise DomainError("non-finite linear predictor")
    p = np.clip(expit(eta), EPS, 1.0 - EPS)
    return float(p) if np.ndim(p) == 0 else p


def clamp_count(beta, x) -> int:
    """Number of units whose probability saturates the clamp."""
    eta = np.asarray(x, dtype=float) @ np.asarray(beta, dtype=float)
    p = expit(eta)
    return int(np.sum((p <= EPS) | (p >= 1.0 - EPS)))


def _check_pi(pi) -> np.ndarray:
    p = np.asarray(pi, dtype=float)
    if np.any(~(p > 0)) or np.any(~(p < 1)):
        raise DomainError("propensity score must lie strictly inside (0, 1)")
    return p


def omega(scheme: WeightingScheme, pi):
    """Score weight ``omega(pi)`` for ``scheme``."""
    p = _check_pi(pi)
    a = scheme.alpha
    kind = scheme.kind
    if kind == "mle":
        out = np.ones_like(p)
    elif kind == "power":
        out = p**a
    elif kind == "power-rev":
        out = (1.0 - p) ** a
    elif kind == "combined":
        out = p**a + (1.0 - p) ** a
    elif kind == "cbps-att":
        out = 1.0 / (1.0 - p)
    else:
        out = 1.0 / (p * (1.0 - p))
    return float(out) if out.ndim == 0 else out


def omega_prime(scheme: WeightingScheme, pi):
    """Derivative of ``omega`` with respect to ``pi``."""
    p = _check_pi(pi)
    a = scheme.alpha
    kind = scheme.kind
    if kind == "mle" or (kind in ("power", "power-rev") and a == 0):
        out = np.zeros_like(p)
    elif kind == "power":
        out = a * p ** (a - 1.0)
    elif kind == "power-rev":
        out = -a * (1.0 - p) ** (a - 1.0)
    elif kind == "combined":
        out = np.zeros_like(p) if a == 0 else a * (p ** (a - 1.0) - (1.0 - p) ** (a - 1.0))
    elif kind == "cbps-att":
        out = 1.0 / (1.0 - p) ** 2
    else:
        out = -(1.0 - 2.0 * p) / (p * (1.0 - p)) ** 2
    return float(out) if out.ndim == 0 else out


def _parse_float(text: str, line: int, col: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataError(f"line {line}, column {col!r}: cannot parse {text!r} as a number", line=line, column=col) from None


def load_csv(
    path,
    treatment_col: str,
    covariate_cols: Sequence[str],
    outcome_col: Optional[str] = None,
    intercept: bool = True,
    missing_outcomes: bool = False,
    treatment_labels: tuple = ("0", "1"),
) -> Dataset:
    """Read a headed UTF-8 CSV into a :class:`Dataset`.

    ``treatment_labels`` gives the (control, treated) spellings accepted in the
    indicator column.  An empty outcome cell is accepted only when
    ``missing_outcomes`` is set and the row has indicator 1 (missing outcome).
    Line numbers in error messages count the header as line 1.
    """
    path = Path(path)
    try:
        handle = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc.strerror}", path=str(path)) from exc
    with handle:
        reader = csv.reader(handle)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty", path=str(path)) from None
        needed = [treatment_col, *covariate_cols] + ([outcome_col] if outcome_col else [])
        for col in needed:
            if col not in header:
                raise DataError(f"column {col!r} not found in {path}", column=col, path=str(path))
        pos = {name: header.index(name) for name in needed}
        control_label, treated_label = (str(v) for v in treatment_labels)
        xs, ts, ys = [], [], []
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                raise DataError(f"line {line}: expected {len(header)} fields, got {len(row)}", line=line)
            raw_t = row[pos[treatment_col]].strip()
            if raw_t == treated_label:
                ti = 1.0
            elif raw_t == control_label:
                ti = 0.0
            else:
                try:
                    num = float(raw_t)
                except ValueError:
                    num = None
                if num is not None and num in (0.0, 1.0) and (control_label, treated_label) == ("0", "1"):
                    ti = num
                else:
                    raise DataError(
                        f"line {line}: treatment column {treatment_col!r} has {raw_t!r}; expected "
                        f"{control_label!r} or {treated_label!r}",
                        line=line,
                        column=treatment_col,
                    )
            xi = []
            for col in covariate_cols:
                v = _parse_float(row[pos[col]].strip(), line, col)
                if not math.isfinite(v):
                    raise DataError(f"line {line}, column {col!r}: non-finite covariate", line=line, column=col)
                xi.append(v)
            if outcome_col:
                raw_y = row[pos[outcome_col]].strip()
                if raw_y == "":
                    if not (missing_outcomes and ti == 1.0):
                        raise DataError(f"line {line}: empty outcome", line=line, column=outcome_col)
                    ys.append(math.nan)
                else:
                    ys.append(_parse_float(raw_y, line, outcome_col))
            xs.append(xi)
            ts.append(ti)
    if not xs:
        raise DataError(f"{path} has no data rows", path=str(path))
    x = np.array(xs, dtype=float).reshape(len(xs), len(covariate_cols))
    names = list(covariate_cols)
    if intercept:
        x = np.column_stack([np.ones(x.shape[0]), x])
        names = ["(intercept)", *names]
    return Dataset(x, np.array(ts), np.array(ys) if outcome_col else None, tuple(names))


def write_csv(dataset: Dataset, path, treatment_col: str = "t", outcome_col: str = "y") -> None:
    """Write ``dataset`` as CSV with round-trip precision; NaN outcomes become empty cells."""
    names = [n for n in dataset.names]
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        header = [treatment_col, *names] + ([outcome_col] if dataset.y is not None else [])
        writer.writerow(header)
        for i in range(dataset.n):
            row = [str(int(dataset.t[i]))] + [repr(float(v)) for v in dataset.x[i]]
            if dataset.y is not None:
                yi = dataset.y[i]
                row.append("" if math.isnan(yi) else repr(float(yi)))
            writer.writerow(row)
