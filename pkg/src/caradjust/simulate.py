"""Data generators, replication runner, and report emission.

Three built-in outcome models cover light and heavy stratification with
hetero- and homoscedastic noise; a custom hook takes arbitrary generators.
Potential outcomes live in :class:`PotentialTrial` until an assignment
vector reveals one arm per unit, which keeps estimators structurally unable
to peek at the counterfactual.

Replication ``r`` of a run draws its data, assignment, and tuning streams
from ``(seed, r, channel)`` substreams, so reports are identical for any
worker count and scheduling order.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from io import StringIO

import numpy as np

from . import streams
from .data import TrialDataset
from .errors import DfExhaustedError, EstimationError, ValidationError
from .estimators import (
    ALL_ESTIMATORS,
    DIM,
    LASSO_COMMON,
    LASSO_SPECIFIC,
    OLS_COMMON,
    OLS_SPECIFIC,
    estimate,
)
from .inference import confidence_interval, df_adjust, variance_components
from .randomization import POCOCK_SIMON, RandomizationScheme, assign_all

MODEL1 = "model1"
MODEL2 = "model2"
MODEL3 = "model3"
BUILTIN_MODELS = (MODEL1, MODEL2, MODEL3)

REPORT_SCHEMA_VERSION = "1"


@dataclass(frozen=True)
class CustomModel:
    """Hooks for a user-defined generator.

    ``sample(rng, n)`` must return ``(x_base, strata_labels, margins)``;
    ``g0/g1/sigma0/sigma1`` map the base covariate matrix to vectors. Extra
    covariates are appended as iid standard normals up to the requested
    total dimension. ``truth`` may short-circuit the Monte Carlo average
    treatment effect when it is known in closed form.
    """

    sample: object
    g0: object
    g1: object
    sigma0: object
    sigma1: object
    base_covariates: int
    truth: float | None = None


@dataclass(frozen=True)
class ModelSpec:
    name: str = MODEL1
    mu0: float = 0.0
    mu1: float = 0.0
    total_covariates: int = 100
    include_strata_in_x: bool = True
    custom: CustomModel | None = None

    def __post_init__(self):
        if self.name not in BUILTIN_MODELS and self.custom is None:
            raise ValidationError(
                f"model must be one of {BUILTIN_MODELS} or carry custom hooks"
            )
        if self.total_covariates < self.base_covariates:
            raise ValidationError(
                f"total covariate dimension {self.total_covariates} is below the "
                f"model's base dimension {self.base_covariates}"
            )

    @property
    def base_covariates(self) -> int:
        if self.custom is not None:
            return self.custom.base_covariates
        return {MODEL1: 2, MODEL2: 4, MODEL3: 5}[self.name]


@dataclass(frozen=True)
class PotentialTrial:
    """A generated cohort before assignment: both potential outcomes, the
    full covariate matrix (base columns first), stratum labels, and the
    margin levels minimization uses."""

    y1: np.ndarray
    y0: np.ndarray
    x: np.ndarray
    strata_labels: np.ndarray
    margins: np.ndarray
    base_covariates: int

    @property
    def n(self) -> int:
        return self.y1.shape[0]

    def observe(self, assignment) -> TrialDataset:
        assignment = np.asarray(assignment)
        y = np.where(assignment == 1, self.y1, self.y0)
        return TrialDataset.from_arrays(
            y, assignment, self.strata_labels, self.x, y1=self.y1, y0=self.y0
        )


def _sample_base(model: ModelSpec, rng: np.random.Generator, n: int):
    """Draw base covariates, strata, margins, and the g/sigma vectors."""
    if model.custom is not None:
        x, strata, margins = model.custom.sample(rng, n)
        x = np.asarray(x, dtype=float)
        c = model.custom
        return x, np.asarray(strata), np.asarray(margins), c.g0(x), c.g1(x), c.sigma0(x), c.sigma1(x)
    if model.name == MODEL1:
        x1 = np.where(rng.random(n) < 0.4, 1.0, 2.0)
        x2 = rng.uniform(-2.0, 2.0, n)
        g = 10.0 * x1 + 20.0 * x1 * x2
        x = np.column_stack([x1, x2])
        strata = x1.astype(np.int64)
        margins = strata[:, None]
        return x, strata, margins, g, g, np.full(n, 3.0), np.full(n, 5.0)
    if model.name == MODEL2:
        x1 = rng.beta(3.0, 4.0, n)
        x2 = rng.uniform(-2.0, 2.0, n)
        x3 = x1 * x2
        x4 = np.where(rng.random(n) < 0.6, 3.0, 5.0)
        x2s = np.where(x2 > 1.0, 2, 1)
        x3s = np.where(x3 > 0.0, 2, 1)
        g0 = 15.0 * x1 + 7.0 * x2 + 5.0 * x3 + 6.0 * x4
        g1 = 15.0 * np.log(x1) * x4
        x = np.column_stack([x1, x2, x3, x4])
        strata = x2s * 10 + x4.astype(np.int64)
        margins = np.column_stack([x2s, x4.astype(np.int64)])
        return x, strata, margins, g0, g1, x3s.astype(float), 2.0 * x2s.astype(float)
    if model.name == MODEL3:
        x1 = rng.beta(2.0, 2.0, n)
        x2 = rng.integers(1, 5, n).astype(float)
        x3 = rng.uniform(-2.0, 2.0, n)
        u = rng.random(n)
        x4 = np.where(u < 0.3, 1.0, np.where(u < 0.9, 2.0, 3.0))
        x5 = rng.standard_normal(n)
        g = 2.0 * x1 + 8.0 * x2 + 10.0 * x3 + 3.0 * x4 + 6.0 * x5
        x = np.column_stack([x1, x2, x3, x4, x5])
        strata = x2.astype(np.int64) * 10 + x4.astype(np.int64)
        margins = np.column_stack([x2.astype(np.int64), x4.astype(np.int64)])
        return x, strata, margins, g, g, np.ones(n), np.full(n, 3.0)
    raise ValidationError(f"unknown model {model.name!r}")  # pragma: no cover


def _extra_covariates(model: ModelSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    q = model.total_covariates - model.base_covariates
    if q <= 0:
        return np.empty((n, 0))
    z = rng.standard_normal((n, q))
    if model.name == MODEL2 and model.custom is None:
        # geometric Toeplitz covariance with ratio 1/2 is AR(1): build the
        # chain exactly instead of factoring the matrix
        e = np.empty_like(z)
        e[:, 0] = z[:, 0]
        scale = math.sqrt(1.0 - 0.25)
        for j in range(1, q):
            e[:, j] = 0.5 * e[:, j - 1] + scale * z[:, j]
        return e
    return z


def generate(model: ModelSpec, n: int, rng: np.random.Generator) -> PotentialTrial:
    """Draw a cohort of ``n`` units with both potential outcomes."""
    if n < 2:
        raise ValidationError("need at least two units")
    x_base, strata, margins, g0, g1, s0, s1 = _sample_base(model, rng, n)
    eps0 = rng.standard_normal(n)
    eps1 = rng.standard_normal(n)
    y0 = model.mu0 + g0 + s0 * eps0
    y1 = model.mu1 + g1 + s1 * eps1
    extras = _extra_covariates(model, rng, n)
    x_full = np.hstack([x_base, extras])
    if not model.include_strata_in_x:
        keep = _nonstratification_columns(model)
        base_keep = [j for j in keep if j < model.base_covariates]
        x_full = np.hstack([x_base[:, base_keep], extras])
    return PotentialTrial(
        y1=y1,
        y0=y0,
        x=x_full,
        strata_labels=strata,
        margins=margins,
        base_covariates=model.base_covariates
        if model.include_strata_in_x
        else len(_nonstratification_columns(model)),
    )


def _nonstratification_columns(model: ModelSpec) -> list[int]:
    if model.custom is not None:
        return list(range(model.custom.base_covariates))
    if model.name == MODEL1:
        return [1]            # the first column defines the strata
    if model.name == MODEL2:
        return [0, 1, 2]      # the {3,5} factor is a stratification variable
    return [0, 2, 4]          # model 3 stratifies on columns 2 and 4


# Mean gap E[g1 - g0] for the heterogeneous built-in model, from a frozen
# 1e7-draw Monte Carlo evaluation (the value, its standard error, and the
# draw count). regenerate with `python -m caradjust.simulate`.
_MODEL2_GAP = (-83.38458770929122, 0.010996390432522379, 10_000_000)


def montecarlo_mean_gap(model: ModelSpec, draws: int = 10_000_000, seed: int = 1) -> tuple[float, float]:
    """Monte Carlo estimate (value, standard error) of ``E[g1 - g0]``."""
    rng = streams.substream(seed)
    total = 0.0
    total_sq = 0.0
    done = 0
    chunk = 1_000_000
    while done < draws:
        b = min(chunk, draws - done)
        _, _, _, g0, g1, _, _ = _sample_base(model, rng, b)
        gap = g1 - g0
        total += float(gap.sum())
        total_sq += float((gap**2).sum())
        done += b
    mean = total / draws
    var = total_sq / draws - mean**2
    return mean, math.sqrt(var / draws)


def true_tau(model: ModelSpec) -> float:
    """Population average treatment effect of ``model``."""
    if model.custom is not None:
        if model.custom.truth is not None:
            return model.mu1 - model.mu0 + model.custom.truth
        gap, _ = montecarlo_mean_gap(model, draws=2_000_000)
        return model.mu1 - model.mu0 + gap
    if model.name in (MODEL1, MODEL3):
        return model.mu1 - model.mu0  # identical g in both arms
    return model.mu1 - model.mu0 + _MODEL2_GAP[0]


def true_tau_detail(model: ModelSpec) -> tuple[float, float, int]:
    """(value, Monte Carlo standard error, draw count) of the stored truth."""
    if model.custom is None and model.name == MODEL2:
        gap, se, draws = _MODEL2_GAP
        return model.mu1 - model.mu0 + gap, se, draws
    return true_tau(model), 0.0, 0


@dataclass
class EstimatorRow:
    model: str
    estimator: str
    bias: float
    sd: float
    se_unadj: float
    se_adj: float | None
    cp_unadj: float
    cp_adj: float | None
    failures: int        # replications with no estimate at all
    successes: int
    adj_failures: int = 0  # estimate fine, df correction exhausted


@dataclass
class ReplicationReport:
    rows: list
    config: dict
    seed: int
    truth: dict


@dataclass
class _RepOutcome:
    estimate: float = math.nan
    se_unadj: float = math.nan
    se_adj: float | None = None
    covers_unadj: bool = False
    covers_adj: bool | None = None
    failed: str | None = None
    adj_failed: str | None = None


def _estimator_options(name, lambda_mode, folds, rate_constant, small_stratum, tuning_seed):
    if name in (OLS_COMMON, OLS_SPECIFIC):
        return {"small_stratum": small_stratum} if name == OLS_SPECIFIC else {}
    if name in (LASSO_COMMON, LASSO_SPECIFIC):
        lam = lambda_mode
        if isinstance(lambda_mode, str) and lambda_mode not in ("cv", "rate"):
            lam = float(lambda_mode)
        return {
            "lam": lam,
            "folds": folds,
            "rate_constant": rate_constant,
            "seed": tuning_seed,
        }
    return {}


def run_replications(
    model: ModelSpec,
    scheme: RandomizationScheme,
    n: int,
    reps: int,
    estimators=ALL_ESTIMATORS,
    seed: int = 0,
    level: float = 0.95,
    lambda_mode="cv",
    folds: int = 5,
    rate_constant: float = 1.0,
    small_stratum: str = "reduce",
    threads: int = 1,
) -> ReplicationReport:
    """Monte Carlo study of the requested estimators under one design.

    Per replication and estimator the point estimate, unadjusted and
    degrees-of-freedom-adjusted standard errors, and the coverage of both
    intervals are recorded. Replications where an estimator fails
    (degenerate stratum, rank deficiency, exhausted degrees of freedom) are
    excluded from that estimator's moments and counted in ``failures``.
    """
    if reps < 1:
        raise ValidationError("need at least one replication")
    estimators = tuple(estimators)
    for name in estimators:
        if name not in ALL_ESTIMATORS:
            raise ValidationError(f"unknown estimator {name!r}")
    tau0 = true_tau(model)

    def one_rep(r: int) -> dict:
        trial = generate(model, n, streams.substream(seed, r, streams.DATA))
        assignment = assign_all(
            scheme,
            strata=trial.strata_labels,
            margins=trial.margins if scheme.variant == POCOCK_SIMON else None,
            rng=streams.substream(seed, r, streams.ASSIGN),
        )
        ds_full = trial.observe(assignment)
        ds_base = ds_full.with_covariates(ds_full.x[:, : trial.base_covariates])
        tuning_seed = int(streams.substream(seed, r, streams.TUNING).integers(0, 2**62))
        out = {}
        for name in estimators:
            ds = ds_base if name in (OLS_COMMON, OLS_SPECIFIC) else ds_full
            options = _estimator_options(
                name, lambda_mode, folds, rate_constant, small_stratum, tuning_seed
            )
            res = _RepOutcome()
            try:
                est = estimate(ds, name, **options)
                ve = variance_components(est, pi=scheme.pi)
                ci = confidence_interval(est, ve, level)
                res.estimate = est.estimate
                res.se_unadj = ve.se
                res.covers_unadj = ci.covers(tau0)
                if name != DIM:
                    try:
                        ve_adj = df_adjust(ve, est)
                        ci_adj = confidence_interval(est, ve_adj, level)
                        res.se_adj = ve_adj.se
                        res.covers_adj = ci_adj.covers(tau0)
                    except DfExhaustedError as exc:
                        # the estimate stands; only the corrected interval
                        # is unavailable for this replication
                        res.adj_failed = str(exc)
            except EstimationError as exc:
                res = _RepOutcome(failed=f"{type(exc).__name__}: {exc}")
            out[name] = res
        return out

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(one_rep, range(reps)))
    else:
        outcomes = [one_rep(r) for r in range(reps)]

    rows = []
    for name in estimators:
        ok = [o[name] for o in outcomes if o[name].failed is None]
        failures = reps - len(ok)
        adj_ok = [o for o in ok if o.adj_failed is None]
        adj_failures = len(ok) - len(adj_ok)
        if ok:
            estimates = np.array([o.estimate for o in ok])
            bias = float(estimates.mean() - tau0)
            sd = float(estimates.std(ddof=1)) if len(ok) > 1 else 0.0
            se_unadj = float(np.mean([o.se_unadj for o in ok]))
            cp_unadj = float(np.mean([o.covers_unadj for o in ok]))
            if name == DIM:
                se_adj = cp_adj = None
            elif adj_ok:
                se_adj = float(np.mean([o.se_adj for o in adj_ok]))
                cp_adj = float(np.mean([o.covers_adj for o in adj_ok]))
            else:
                se_adj = cp_adj = math.nan
        else:
            bias = sd = se_unadj = cp_unadj = math.nan
            se_adj = cp_adj = None if name == DIM else math.nan
        rows.append(
            EstimatorRow(
                model=model.name,
                estimator=name,
                bias=bias,
                sd=sd,
                se_unadj=se_unadj,
                se_adj=se_adj,
                cp_unadj=cp_unadj,
                cp_adj=cp_adj,
                failures=failures,
                successes=len(ok),
                adj_failures=adj_failures,
            )
        )
    config = {
        "model": model.name,
        "mu0": model.mu0,
        "mu1": model.mu1,
        "p": model.total_covariates,
        "n": n,
        "reps": reps,
        "scheme": scheme.variant,
        "pi": scheme.pi,
        "block_size": scheme.block_size if scheme.variant == "stratified_block" else None,
        "bias_prob": scheme.bias_prob if scheme.variant in ("biased_coin", "pocock_simon") else None,
        "estimators": list(estimators),
        "lambda_mode": str(lambda_mode),
        "folds": folds,
        "rate_constant": rate_constant,
        "small_stratum": small_stratum,
        "level": level,
    }
    return ReplicationReport(rows=rows, config=config, seed=seed, truth={model.name: tau0})


def merge_reports(reports: list[ReplicationReport]) -> ReplicationReport:
    """Stack rows of per-model runs that share a seed and design."""
    if not reports:
        raise ValidationError("nothing to merge")
    rows = [row for rep in reports for row in rep.rows]
    truth = {}
    for rep in reports:
        truth.update(rep.truth)
    config = dict(reports[0].config)
    config["model"] = [rep.config["model"] for rep in reports]
    return ReplicationReport(rows=rows, config=config, seed=reports[0].seed, truth=truth)


_COLUMNS = (
    "Model", "Estimator", "Bias", "SD", "SE-unadj", "SE-adj", "CP-unadj", "CP-adj", "Failures",
)


def _row_cells(row: EstimatorRow) -> list[str]:
    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, float) and math.isnan(v):
            return "nan"
        return f"{v:.2f}"

    return [
        row.model,
        row.estimator,
        fmt(row.bias),
        fmt(row.sd),
        fmt(row.se_unadj),
        fmt(row.se_adj),
        fmt(row.cp_unadj),
        fmt(row.cp_adj),
        str(row.failures),
    ]


def emit_report(report: ReplicationReport, fmt: str = "markdown") -> str:
    """Render a report as csv, markdown, or json (stable column order)."""
    if fmt == "json":
        payload = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "config": report.config,
            "seed": report.seed,
            "truth": report.truth,
            "rows": [
                {
                    "model": r.model,
                    "estimator": r.estimator,
                    "bias": r.bias,
                    "sd": r.sd,
                    "se_unadj": r.se_unadj,
                    "se_adj": r.se_adj,
                    "cp_unadj": r.cp_unadj,
                    "cp_adj": r.cp_adj,
                    "failures": r.failures,
                    "successes": r.successes,
                    "adj_failures": r.adj_failures,
                }
                for r in report.rows
            ],
        }
        return json.dumps(payload, sort_keys=True, indent=2)
    if fmt == "csv":
        buf = StringIO()
        buf.write(",".join(_COLUMNS) + "\n")
        for row in report.rows:
            buf.write(",".join(_row_cells(row)) + "\n")
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(_COLUMNS) + " |", "|" + "|".join(["---"] * len(_COLUMNS)) + "|"]
        for row in report.rows:
            lines.append("| " + " | ".join(_row_cells(row)) + " |")
        return "\n".join(lines) + "\n"
    raise ValidationError(f"unknown format {fmt!r}; use csv, markdown, or json")


if __name__ == "__main__":  # regenerate the frozen mean-gap constant
    value, se = montecarlo_mean_gap(ModelSpec(name=MODEL2))
    print(f"_MODEL2_GAP = ({value!r}, {se!r}, 10_000_000)")
