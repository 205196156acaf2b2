"""Command-line front end.

Four commands share one flag set:

``fit``         estimate propensity scores and an effect from a CSV file
``simulate``    Monte Carlo table for a built-in scenario
``scan-alpha``  compare power exponents, by Monte Carlo or on one dataset
``illustrate``  discrete-covariate table and expected log-likelihood curves

Settings come from ``--config`` (``key = value`` lines, ``#`` comments) and
are overridden by flags.  Reports carry the seed and a hash of the resolved
settings.  Errors print a JSON object on stderr; exit status is 2 for
configuration or data problems, 3 for numerical failures and 4 for I/O.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError, NawtError
from .estimands import _WEIGHTS, Recipe
from .inference import adaptive_select, bootstrap_se, sandwich
from .model import Dataset, WeightingScheme, clamp_count, load_csv, logistic_pi
from .numerics import RngStream, control_loglik_term, treated_loglik_term
from .simulation import (
    CubicSpec,
    ScenarioSpec,
    generate_discrete_illustration,
    make_method,
    run_monte_carlo,
)
from .solver import GmmFit, fit_nawt

COMMANDS = ("fit", "simulate", "scan-alpha", "illustrate")
ESTIMANDS = ("att", "atc", "ate-separate", "ate-combined", "ao")
SCHEMES = ("mle", "power", "power-rev", "combined", "cbps-att", "cbps-ate")
SCENARIOS = ("a", "b", "c", "cubic", "discrete")


@dataclass
class RunConfig:
    command: str
    input: Optional[str] = None
    treatment: str = "t"
    outcome: str = "y"
    covariates: Optional[list] = None
    estimand: str = "att"
    scheme: str = "power"
    alpha: float = 2.0
    balance: Optional[list] = None
    variance: str = "sandwich"
    n_boot: int = 500
    scenario: str = "a"
    n: Optional[int] = None
    replicates: Optional[int] = None
    seed: Optional[int] = None
    methods: Optional[list] = None
    alphas: list = field(default_factory=lambda: [0.0, 1.0, 2.0, 3.0])
    b0: tuple = (1.0, 0.0, 0.0)
    treated_model: int = 1
    ps_model: str = "true"
    jobs: int = 1
    out: Optional[str] = None
    format: str = "json"

    def provenance(self) -> dict:
        """Settings that determine the numbers (output location excluded)."""
        keep = {k: v for k, v in vars(self).items() if k not in ("out", "format", "jobs")}
        return json.loads(json.dumps(keep, default=list))

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.provenance(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def scheme_obj(self) -> WeightingScheme:
        if self.scheme in ("power", "power-rev", "combined"):
            return WeightingScheme(self.scheme, self.alpha)
        return WeightingScheme(self.scheme)


# ---------------------------------------------------------------- settings


def _list(value: str) -> list:
    return [v.strip() for v in str(value).split(",") if v.strip()]


def _int(key):
    def conv(v):
        try:
            return int(v)
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got {v!r}", key=key) from None
    return conv


def _float(key):
    def conv(v):
        try:
            out = float(v)
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {v!r}", key=key) from None
        if not math.isfinite(out):
            raise ConfigError(f"{key} must be finite", key=key)
        return out
    return conv


def _floats(key):
    one = _float(key)
    return lambda v: [one(s) for s in _list(v)]


def _choice(key, options):
    def conv(v):
        if v not in options:
            raise ConfigError(f"{key} must be one of {', '.join(options)}; got {v!r}", key=key)
        return v
    return conv


CONVERTERS = {
    "command": _choice("command", COMMANDS),
    "input": str,
    "treatment": str,
    "outcome": str,
    "covariates": _list,
    "estimand": _choice("estimand", ESTIMANDS),
    "scheme": _choice("scheme", SCHEMES),
    "alpha": _float("alpha"),
    "balance": _list,
    "variance": _choice("variance", ("sandwich", "bootstrap")),
    "n_boot": _int("n_boot"),
    "scenario": _choice("scenario", SCENARIOS),
    "n": _int("n"),
    "replicates": _int("replicates"),
    "seed": _int("seed"),
    "methods": _list,
    "alphas": _floats("alphas"),
    "b0": lambda v: tuple(_floats("b0")(v)),
    "treated_model": _int("treated_model"),
    "ps_model": _choice("ps_model", ("true", "mis1", "mis2")),
    "jobs": _int("jobs"),
    "out": str,
    "format": _choice("format", ("json", "csv")),
}


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment; dashes in keys read as underscores."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in CONVERTERS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}", key=key, line=lineno)
        out[key] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nawt", description="Navigated weighting estimation and simulation.")
    p.add_argument("--config", metavar="PATH")
    p.add_argument("--command", choices=COMMANDS)
    p.add_argument("--input", metavar="PATH")
    p.add_argument("--treatment", metavar="COL", help="treatment (or missingness) column, default t")
    p.add_argument("--outcome", metavar="COL", help="outcome column, default y")
    p.add_argument("--covariates", metavar="COLS", help="comma-separated; default all other columns")
    p.add_argument("--estimand", choices=ESTIMANDS)
    p.add_argument("--scheme", choices=SCHEMES)
    p.add_argument("--alpha", metavar="REAL")
    p.add_argument("--balance", metavar="COLS", help="balance these covariates by GMM ('*' for all)")
    p.add_argument("--variance", choices=("sandwich", "bootstrap"))
    p.add_argument("--n-boot", metavar="INT")
    p.add_argument("--scenario", choices=SCENARIOS)
    p.add_argument("--n", metavar="INT")
    p.add_argument("--replicates", metavar="INT")
    p.add_argument("--seed", metavar="INT")
    p.add_argument("--methods", metavar="NAMES", help="nawt, ipw, cbps, combined, adaptive, alpha=<a>")
    p.add_argument("--alphas", metavar="GRID", help="comma-separated exponent grid")
    p.add_argument("--b0", metavar="B1,B2,B3")
    p.add_argument("--treated-model", metavar="1|2|3")
    p.add_argument("--ps-model", choices=("true", "mis1", "mis2"))
    p.add_argument("--jobs", metavar="INT", help="worker processes")
    p.add_argument("--out", metavar="PATH")
    p.add_argument("--format", choices=("json", "csv"))
    return p


def resolve_config(argv) -> RunConfig:
    args = build_parser().parse_args(argv)
    raw = read_config_file(args.config) if args.config else {}
    for key, value in vars(args).items():
        if key != "config" and value is not None:
            raw[key] = value
    if "command" not in raw:
        raise ConfigError("no command given (use --command or a 'command' key)")
    values = {k: CONVERTERS[k](v) if isinstance(v, str) else v for k, v in raw.items()}
    cfg = RunConfig(**values)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    stochastic = (
        cfg.command in ("simulate", "illustrate")
        or cfg.variance == "bootstrap" and cfg.command == "fit"
        or cfg.command == "scan-alpha" and cfg.input is None
    )
    if stochastic and cfg.seed is None:
        raise ConfigError(f"a seed is required for {cfg.command}", key="seed")
    if cfg.seed is not None and not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed must be a non-negative 64-bit integer", key="seed")
    if cfg.command == "fit" and not cfg.input:
        raise ConfigError("fit needs --input", key="input")
    if cfg.replicates is not None and cfg.replicates < 1:
        raise ConfigError("replicates must be at least 1", key="replicates", value=cfg.replicates)
    if cfg.n is not None and cfg.n < 10:
        raise ConfigError("n must be at least 10", key="n", value=cfg.n)
    if cfg.n_boot < 100:
        raise ConfigError("n_boot must be at least 100", key="n_boot", value=cfg.n_boot)
    if cfg.jobs < 1:
        raise ConfigError("jobs must be positive", key="jobs")
    if cfg.alpha < 0 or any(a < 0 for a in cfg.alphas):
        raise ConfigError("exponents must be non-negative", key="alpha")
    if not cfg.alphas:
        raise ConfigError("alpha grid is empty", key="alphas")
    if cfg.treated_model not in (1, 2, 3):
        raise ConfigError("treated_model must be 1, 2 or 3", key="treated_model")
    if len(cfg.b0) != 3:
        raise ConfigError("b0 needs three comma-separated numbers", key="b0")


# ---------------------------------------------------------------- output


def _num(v):
    if isinstance(v, (np.floating, float)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def _flatten(obj, prefix=""):
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield from _flatten(v, f"{prefix}.{k}" if prefix else str(k))
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            yield from _flatten(v, f"{prefix}[{i}]")
    else:
        yield prefix, obj


def _cell(v):
    v = _num(v)
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render_json(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, default=_num) + "\n"


def render_csv(payload: dict, table_key: Optional[str] = None) -> str:
    """``table_key`` (a list of flat dicts) becomes the table; everything else
    goes to ``# key = value`` header lines.  Without a table, key/value rows."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    meta = {k: v for k, v in payload.items() if k != table_key}
    if table_key is None:
        w.writerow(["key", "value"])
        for k, v in _flatten(meta):
            w.writerow([k, _cell(v)])
        return buf.getvalue()
    for k, v in _flatten(meta):
        buf.write(f"# {k} = {_cell(v)}\n")
    rows = payload[table_key]
    cols = list(rows[0]) if rows else []
    w.writerow(cols)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in cols])
    return buf.getvalue()


def emit(text: str, path: Optional[str]) -> None:
    if path is None:
        sys.stdout.write(text)
        return
    Path(path).write_text(text, encoding="utf-8")


def _write(cfg: RunConfig, payload: dict, table_key: Optional[str] = None, path: Optional[str] = None):
    text = render_json(payload) if cfg.format == "json" else render_csv(payload, table_key)
    emit(text, path if path is not None else cfg.out)


def _header(cfg: RunConfig) -> dict:
    return {"command": cfg.command, "seed": cfg.seed, "config_hash": cfg.config_hash, "settings": cfg.provenance()}


# ---------------------------------------------------------------- fit


def _read_header(path) -> list:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return [h.strip() for h in next(csv.reader(fh), [])]
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from exc


def load_input(cfg: RunConfig) -> Dataset:
    header = _read_header(cfg.input)
    for col in (cfg.treatment, cfg.outcome, *(cfg.covariates or ()), *(c for c in cfg.balance or () if c != "*")):
        if col not in header:
            raise DataError(f"column {col!r} not found in {cfg.input}", column=col, path=cfg.input)
    covs = cfg.covariates or [h for h in header if h not in (cfg.treatment, cfg.outcome)]
    return load_csv(cfg.input, cfg.treatment, covs, cfg.outcome, missing_outcomes=cfg.estimand == "ao")


def _fit_diag(fit, x) -> dict:
    out = {"scheme": fit.scheme.label, "converged": bool(fit.converged), "iterations": int(fit.iterations)}
    if isinstance(fit, GmmFit):
        out["objective"] = float(fit.objective)
        out["weight_matrix"] = fit.weight_matrix_kind
        out["balance_columns"] = list(fit.balance_cols)
    else:
        out["score_norm"] = float(fit.score_norm)
    pi = fit.pi_hat
    out["pi_hat"] = {
        "min": float(pi.min()),
        "mean": float(pi.mean()),
        "max": float(pi.max()),
        "n_clamped": clamp_count(fit.beta, x),
    }
    return out


def balance_table(effect) -> list:
    """Weighted covariate means under each arm mean's weights, next to raw arm means."""
    ds = effect.dataset
    rows = []
    for j, name in enumerate(ds.names):
        if name == "(intercept)":
            continue
        row = {"covariate": name}
        for comp in effect.components:
            pi = effect.fits[comp.fit].pi_hat if comp.fit is not None else np.full(ds.n, 0.5)
            w = comp.mask * _WEIGHTS[comp.weight][0](pi)
            row[f"{comp.name}_weighted"] = float(w @ ds.x[:, j] / w.sum())
        row["treated_raw"] = float(ds.x[ds.t == 1, j].mean()) if ds.n1 else math.nan
        row["control_raw"] = float(ds.x[ds.t == 0, j].mean()) if ds.n1 < ds.n else math.nan
        rows.append(row)
    return rows


def cmd_fit(cfg: RunConfig) -> dict:
    dataset = load_input(cfg)
    recipe = Recipe(cfg.estimand, cfg.scheme_obj(), balance=cfg.balance)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        effect = recipe.run(dataset)
    if cfg.variance == "bootstrap":
        report = bootstrap_se(dataset, recipe, cfg.n_boot, cfg.seed, cfg.jobs)
    else:
        report = sandwich(effect)
    names = effect.dataset.names
    payload = _header(cfg)
    payload.update(
        {
            "estimand": cfg.estimand,
            "n": dataset.n,
            "n_treated": dataset.n1,
            "tau": effect.tau,
            "se": report.se_tau,
            "ci95": list(report.ci95),
            "variance_method": report.method,
            "means": effect.means,
            "fits": [
                dict(_fit_diag(f, dataset.x), beta={nm: float(b) for nm, b in zip(names, f.beta)}) for f in effect.fits
            ],
            "balance": balance_table(effect),
            "warnings": sorted({str(w.message) for w in caught}),
        }
    )
    if report.method == "bootstrap":
        payload["n_boot"] = report.n_boot
        payload["n_failed"] = report.n_failed
    _write(cfg, payload)
    return payload


# ---------------------------------------------------------------- simulate / scan-alpha


def _scenario(cfg: RunConfig, default_n: int) -> ScenarioSpec:
    if cfg.scenario == "discrete":
        raise ConfigError("the discrete scenario is only used by illustrate", key="scenario")
    est = cfg.estimand
    if est == "ao":
        raise ConfigError("simulation scenarios have no missing-outcome variant", key="estimand")
    cubic = CubicSpec(cfg.b0, cfg.treated_model, cfg.ps_model) if cfg.scenario == "cubic" else None
    return ScenarioSpec(cfg.scenario, cfg.n or default_n, est, cubic)


def _default_methods(estimand: str) -> list:
    if estimand.startswith("ate"):
        return ["nawt", "ipw", "cbps", "combined"]
    return ["nawt", "ipw", "cbps"]


def _mc_payload(cfg, report) -> dict:
    payload = _header(cfg)
    d = report.to_dict()
    payload.update({"scenario": d["scenario"], "replicates": d["replicates"], "true_tau": d["true_tau"]})
    payload["rows"] = d["rows"]
    payload["reference"] = d["reference"]
    return payload


def cmd_simulate(cfg: RunConfig) -> dict:
    if cfg.replicates is None:
        raise ConfigError("simulate needs --replicates", key="replicates")
    scenario = _scenario(cfg, 1000)
    names = cfg.methods or _default_methods(cfg.estimand)
    methods = [make_method(m, cfg.estimand, cfg.alpha, cfg.alphas) for m in names]
    report = run_monte_carlo(scenario, methods, cfg.replicates, cfg.seed, cfg.jobs)
    payload = _mc_payload(cfg, report)
    _write(cfg, payload, "rows")
    return payload


def cmd_scan_alpha(cfg: RunConfig) -> dict:
    grid = [float(a) for a in cfg.alphas]
    est = cfg.estimand
    if cfg.replicates is not None:
        scenario = _scenario(cfg, 1000)
        methods = [make_method(f"alpha={a!r}", est) for a in grid]
        report = run_monte_carlo(scenario, methods, cfg.replicates, cfg.seed, cfg.jobs)
        payload = _mc_payload(cfg, report)
        best = min(range(len(grid)), key=lambda i: (report.rows[i].rmse, i))
        for i, row in enumerate(payload["rows"]):
            row["alpha"] = grid[i]
            row["chosen"] = i == best
        payload["mode"] = "monte-carlo"
        payload["chosen_alpha"] = grid[best]
        _write(cfg, payload, "rows")
        return payload
    if cfg.input:
        dataset = load_input(cfg)
        source = {"input": cfg.input}
    else:
        scenario = _scenario(cfg, 1000)
        dataset, _ = scenario.draw(RngStream(cfg.seed, 0))
        source = {"scenario": scenario.describe()}
    result = adaptive_select(dataset, est, grid)
    payload = _header(cfg)
    payload.update(
        {
            "mode": "adaptive",
            "source": source,
            "chosen_alpha": result.alpha,
            "tau": result.effect.tau,
            "se": result.report.se_tau,
            "rows": result.table,
        }
    )
    _write(cfg, payload, "rows")
    return payload


# ---------------------------------------------------------------- illustrate


PI_GRID = tuple(round(0.01 * i, 2) for i in range(1, 100))
TRUE_PI_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))


def loglik_curves(alpha: float) -> list:
    """Rows of treated/control terms and expected values on the pi grid.

    ``expected`` at true probability p is ``p * l1(pi) + (1 - p) * l0(pi)``.
    """
    pi = np.array(PI_GRID)
    terms = {
        "att": (treated_loglik_term(pi, alpha), control_loglik_term(pi, alpha)),
        "mle": (np.log(pi), np.log1p(-pi)),
    }
    rows = []
    for kind, (l1, l0) in terms.items():
        for j, p in enumerate(pi):
            row = {"kind": kind, "alpha": alpha if kind == "att" else 0.0, "pi_hat": float(p)}
            row["l1"] = float(l1[j])
            row["l0"] = float(l0[j])
            for tp in TRUE_PI_GRID:
                row[f"expected_p{tp:.1f}"] = float(tp * l1[j] + (1 - tp) * l0[j])
            rows.append(row)
    return rows


def discrete_table(n: int, seed: int, alpha: float) -> list:
    ill = generate_discrete_illustration(n, RngStream(seed, 0))
    ds = ill.dataset
    x = ds.x[:, 1]
    fits = {"mle": fit_nawt(ds, WeightingScheme.mle()), "nawt": fit_nawt(ds, WeightingScheme.power(alpha))}
    rows = []
    for i, level in enumerate(ill.levels):
        unit = np.array([1.0, level])
        row = {"x": int(level), "count": int(ill.counts[i]), "true_pi": float(ill.true_pi[i]), "np_pi": float(ill.np_pi[i])}
        for name, f in fits.items():
            row[f"{name}_pi"] = float(logistic_pi(f.beta, unit[None, :])[0])
        for name in ("np", "mle", "nawt"):
            p = row[f"{name}_pi"]
            row[f"{name}_att_weight"] = p / (1.0 - p) if p < 1 else math.inf
        rows.append(row)
    return rows


def illustration_summary(rows: list) -> dict:
    sel = [r for r in rows if r["np_pi"] > 0.5]
    out = {"levels_above_half": len(sel)}
    for name in ("mle", "nawt"):
        out[f"{name}_mean_abs_pi_gap"] = float(np.mean([abs(r[f"{name}_pi"] - r["np_pi"]) for r in sel])) if sel else math.nan
        out[f"{name}_mean_abs_weight_gap"] = (
            float(np.mean([abs(r[f"{name}_att_weight"] - r["np_att_weight"]) for r in sel])) if sel else math.nan
        )
    return out


def _sibling(path: Optional[str], suffix: str) -> Optional[str]:
    if path is None:
        return None
    p = Path(path)
    return str(p.with_name(f"{p.stem}{suffix}{p.suffix}"))


def cmd_illustrate(cfg: RunConfig) -> dict:
    if cfg.scenario not in ("discrete", "a"):
        raise ConfigError("illustrate uses the discrete scenario", key="scenario")
    n = cfg.n or 200_000
    if n < 1000:
        raise ConfigError("illustrate needs n >= 1000", key="n", value=n)
    rows = discrete_table(n, cfg.seed, cfg.alpha)
    table = _header(cfg)
    table.update({"n": n, "alpha": cfg.alpha, "summary": illustration_summary(rows), "rows": rows})
    curves = _header(cfg)
    curves.update({"alpha": cfg.alpha, "rows": loglik_curves(cfg.alpha)})
    _write(cfg, table, "rows")
    if cfg.out is None:
        sys.stdout.write("\n")
    _write(cfg, curves, "rows", _sibling(cfg.out, "_curves"))
    return {"table": table, "curves": curves}


# ---------------------------------------------------------------- entry point


HANDLERS = {"fit": cmd_fit, "simulate": cmd_simulate, "scan-alpha": cmd_scan_alpha, "illustrate": cmd_illustrate}


def _fail(payload: dict, status: int) -> int:
    sys.stderr.write(json.dumps({"error": payload}, sort_keys=True, default=_num) + "\n")
    return status


def main(argv=None) -> int:
    try:
        cfg = resolve_config(argv)
    except SystemExit as exc:  # argparse usage errors
        return 2 if exc.code else 0
    except NawtError as exc:
        return _fail(exc.to_dict(), exc.exit_code)
    except OSError as exc:
        return _fail({"code": "io_error", "message": str(exc)}, 4)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            HANDLERS[cfg.command](cfg)
    except NawtError as exc:
        return _fail(exc.to_dict(), exc.exit_code)
    except OSError as exc:
        return _fail({"code": "io_error", "message": str(exc)}, 4)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
