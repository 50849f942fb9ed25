"""Treatment-effect estimators for stratified two-arm trials.

All estimators share one form: a stratum-share weighted sum of within-stratum
arm-mean differences, where each arm mean is corrected by the covariate
imbalance ``(mean_x_arm - mean_x)' beta`` for some adjustment vector. The
plain stratified difference in means uses zero vectors; the OLS and lasso
variants differ only in how the vectors are fitted and whether they are
shared across strata or fitted per stratum.

Functions return a :class:`TreatmentEffectEstimate`; thin sklearn-style
wrapper classes (``fit`` / ``get_params``) are provided for composition with
the wider ecosystem.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import streams
from .data import TrialDataset, stratum_summaries
from .errors import (
    DegenerateStratumError,
    EstimationError,
    NonConvergenceError,
    SingularDesignError,
    ValidationError,
)
from .inference import confidence_interval, df_adjust, variance_components
from .lasso import (
    LassoFit,
    SolverConfig,
    build_centered_design,
    cross_validate_penalties,
    fit_lasso,
    fit_ols,
    fit_ols_centered,
    fit_ols_reduced,
    lambda_rate,
)

DIM = "dim"
OLS_COMMON = "ols_common"
OLS_SPECIFIC = "ols_specific"
LASSO_COMMON = "lasso_common"
LASSO_SPECIFIC = "lasso_specific"
ALL_ESTIMATORS = (DIM, OLS_COMMON, OLS_SPECIFIC, LASSO_COMMON, LASSO_SPECIFIC)


@dataclass(frozen=True)
class AdjustedVectors:
    """Per-arm adjustment vectors, shared (``common``) or per-stratum
    (``specific``), plus the fitted-covariate counts the degrees-of-freedom
    correction needs."""

    mode: str
    beta1: np.ndarray            # (p,) in common mode, (K, p) in specific mode
    beta0: np.ndarray
    selected1: object            # int, or (K,) ints in specific mode
    selected0: object
    diagnostics: dict = field(default_factory=dict)

    def validate(self, p: int, n_strata: int) -> None:
        if self.mode not in ("common", "specific"):
            raise ValidationError(f"unknown adjustment mode {self.mode!r}")
        want = (p,) if self.mode == "common" else (n_strata, p)
        for name, b in (("beta1", self.beta1), ("beta0", self.beta0)):
            if np.asarray(b).shape != want:
                raise ValidationError(
                    f"{name} has shape {np.asarray(b).shape}, expected {want}"
                )

    def vectors_for(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        if self.mode == "common":
            return self.beta1, self.beta0
        return self.beta1[k - 1], self.beta0[k - 1]


@dataclass(frozen=True)
class TreatmentEffectEstimate:
    """A point estimate together with everything inference needs.

    ``residuals[i]`` is unit ``i``'s transformed outcome under its observed
    arm: the raw outcome minus ``x_i' beta_star`` for the stratum's mixed
    adjustment vector (raw outcome for the unadjusted estimator). ``pi`` is
    the realized pooled treated fraction, used as the default allocation by
    the variance estimator when no design value is supplied.
    """

    estimate: float
    kind: str
    residuals: np.ndarray
    data: TrialDataset
    summaries: list
    adjustment: AdjustedVectors | None
    pi: float


def _assemble(ds: TrialDataset, adj: AdjustedVectors | None, kind: str) -> TreatmentEffectEstimate:
    summaries = stratum_summaries(ds)
    tau = 0.0
    residuals = np.array(ds.y, dtype=float, copy=True)
    for s in summaries:
        if s.arm_empty:
            raise DegenerateStratumError(
                f"stratum {s.label!r} has an empty arm; the weighted arm-mean "
                "difference is undefined",
                stratum=s.label,
            )
        if adj is None:
            term = s.mean_y1 - s.mean_y0
        else:
            b1, b0 = adj.vectors_for(s.k)
            term = (s.mean_y1 - float((s.mean_x1 - s.mean_x) @ b1)) - (
                s.mean_y0 - float((s.mean_x0 - s.mean_x) @ b0)
            )
            beta_star = (1.0 - s.treated_fraction) * b1 + s.treated_fraction * b0
            in_k = ds.strata == s.k
            residuals[in_k] -= ds.x[in_k] @ beta_star
        tau += s.share * term
    if not np.isfinite(tau):
        raise EstimationError(f"estimator {kind!r} produced a non-finite value")
    return TreatmentEffectEstimate(
        estimate=float(tau),
        kind=kind,
        residuals=residuals,
        data=ds,
        summaries=summaries,
        adjustment=adj,
        pi=float((ds.assignment == 1).mean()),
    )


def difference_in_means(ds: TrialDataset) -> TreatmentEffectEstimate:
    """Stratified difference in means (identity adjustment)."""
    return _assemble(ds, None, DIM)


def regression_adjusted(ds: TrialDataset, adj: AdjustedVectors, kind: str = "custom") -> TreatmentEffectEstimate:
    """General covariate-adjusted estimator for caller-supplied vectors.

    Residual mixing uses each stratum's realized treated fraction, also in
    common mode where the vectors themselves are shared.
    """
    adj.validate(ds.p, ds.n_strata)
    return _assemble(ds, adj, kind)


def ols_adjusted(
    ds: TrialDataset,
    scope: str = "common",
    small_stratum: str = "reduce",
    stratum_centered: bool = False,
) -> TreatmentEffectEstimate:
    """Least-squares adjusted estimator.

    ``scope="common"`` regresses outcome on covariates (with intercept)
    separately per arm, pooled across strata; ``stratum_centered`` switches
    the fit to the stratum-centered design instead of a single global
    intercept. ``scope="specific"`` refits per stratum and arm.

    ``small_stratum`` governs stratum-arm cells too small for a full-rank
    fit in specific scope: ``"reduce"`` (default) caps the fit at
    ``cell_size - 2`` pivoted columns, leaving dropped coefficients at zero,
    which mirrors how aliased columns behave in standard regression
    software; ``"error"`` fails loudly; ``"share_common"`` substitutes the
    pooled per-arm vector for the degenerate cell.
    """
    if scope == "common":
        betas = []
        for arm in (1, 0):
            sel = ds.assignment == arm
            if stratum_centered:
                betas.append(fit_ols_centered(build_centered_design(ds, arm)))
            else:
                try:
                    betas.append(fit_ols(ds.x[sel], ds.y[sel], intercept=True))
                except SingularDesignError as exc:
                    raise SingularDesignError(f"arm {arm}: {exc}") from exc
        adj = AdjustedVectors("common", betas[0], betas[1], ds.p, ds.p)
        return regression_adjusted(ds, adj, OLS_COMMON)

    if scope != "specific":
        raise ValidationError("scope must be 'common' or 'specific'")
    if small_stratum not in ("reduce", "error", "share_common"):
        raise ValidationError("small_stratum must be 'reduce', 'error', or 'share_common'")

    common = None
    if small_stratum == "share_common":
        common = ols_adjusted(ds, scope="common").adjustment

    k_total = ds.n_strata
    beta1 = np.zeros((k_total, ds.p))
    beta0 = np.zeros((k_total, ds.p))
    sel1 = np.zeros(k_total, dtype=int)
    sel0 = np.zeros(k_total, dtype=int)
    for k in range(1, k_total + 1):
        in_k = ds.strata == k
        for arm, beta_out, sel_out in ((1, beta1, sel1), (0, beta0, sel0)):
            cell = in_k & (ds.assignment == arm)
            x_cell = ds.x[cell]
            y_cell = ds.y[cell]
            m = x_cell.shape[0]
            label = ds.stratum_labels[k - 1]
            if m < 1:
                raise DegenerateStratumError(
                    f"stratum {label!r} has no units in arm {arm}",
                    stratum=label,
                    arm=arm,
                )
            if small_stratum == "reduce":
                # singleton cells cannot support any fit: zero vector.
                # two-unit cells fit a single covariate (interpolating, as
                # aliased-column handling in standard regression software
                # would); anything larger keeps a residual degree of freedom
                if m >= 2:
                    beta_out[k - 1], sel_out[k - 1] = fit_ols_reduced(
                        x_cell, y_cell, max(1, m - 2)
                    )
                continue
            try:
                beta_out[k - 1], sel_out[k - 1] = _strict_cell_ols(x_cell, y_cell)
            except EstimationError as exc:
                if small_stratum == "error":
                    raise DegenerateStratumError(
                        f"stratum {label!r}, arm {arm}: {exc}", stratum=label, arm=arm
                    ) from exc
                shared = common.beta1 if arm == 1 else common.beta0
                beta_out[k - 1] = shared
                sel_out[k - 1] = 0  # shared vector fits nothing inside this cell
    adj = AdjustedVectors("specific", beta1, beta0, sel1, sel0)
    return regression_adjusted(ds, adj, OLS_SPECIFIC)


def _strict_cell_ols(x_cell, y_cell) -> tuple[np.ndarray, int]:
    """Within-cell OLS after removing columns the cell cannot identify.

    Columns constant inside the cell are structurally absent from the
    stratum-centered objective, so their coefficients are exactly zero; the
    remaining columns must be full rank with at least one residual degree
    of freedom.
    """
    m, p = x_cell.shape
    if m < 2:
        raise DegenerateStratumError(f"cell of {m} unit(s) cannot support a least-squares fit")
    beta = np.zeros(p)
    varying = np.flatnonzero(np.ptp(x_cell, axis=0) > 0.0)
    if varying.size == 0:
        return beta, 0
    if m <= varying.size + 1:
        raise DegenerateStratumError(
            f"{m} units cannot identify {varying.size} covariates with an intercept"
        )
    beta[varying] = fit_ols(x_cell[:, varying], y_cell, intercept=True)
    return beta, int(varying.size)


def _resolve_penalties(lam, designs, keys, folds, grid, rate_constant, seed, cfg):
    """One penalty per design; CV batches every design of the call."""
    if isinstance(lam, str):
        if lam == "cv":
            rngs = [streams.substream(seed, *key) for key in keys]
            return cross_validate_penalties(
                designs, folds=folds, grid=grid, rngs=rngs, cfg=cfg,
                rate_constant=rate_constant,
            )
        if lam == "rate":
            return [lambda_rate(d.m, max(d.p, 2), rate_constant) for d in designs]
        raise ValidationError(f"unknown penalty mode {lam!r}; use 'cv', 'rate', or a number")
    value = float(lam)
    if value < 0:
        raise ValidationError("penalty must be non-negative")
    return [value] * len(designs)


def lasso_adjusted(
    ds: TrialDataset,
    scope: str = "common",
    lam="cv",
    folds: int = 5,
    grid=None,
    rate_constant: float = 1.0,
    seed: int | None = None,
    cfg: SolverConfig | None = None,
) -> TreatmentEffectEstimate:
    """L1-penalized adjusted estimator.

    ``lam`` may be ``"cv"`` (per-arm, and per-stratum in specific scope,
    cross-validated with the 1-SE rule), ``"rate"`` (theory-shaped penalty
    with ``rate_constant``), or an explicit number broadcast to every fit.
    ``seed`` only feeds the cross-validation fold shuffles; every fold
    stream is keyed by (arm, stratum) so results do not depend on execution
    order.
    """
    if scope not in ("common", "specific"):
        raise ValidationError("scope must be 'common' or 'specific'")
    cfg = cfg or SolverConfig()
    seed_eff = streams.fresh_seed() if seed is None else int(seed)

    if scope == "common":
        keys = [(1,), (0,)]
        designs = [build_centered_design(ds, arm) for (arm,) in keys]
    else:
        # singleton cells are legitimate but trivial: their centered design
        # is identically zero, so the penalized minimum is the zero vector
        keys = []
        singletons = []
        for k in range(1, ds.n_strata + 1):
            in_k = ds.strata == k
            for arm in (1, 0):
                if int((in_k & (ds.assignment == arm)).sum()) == 1:
                    singletons.append((arm, k))
                else:
                    keys.append((arm, k))
        designs = [build_centered_design(ds, arm, stratum=k) for arm, k in keys]
    lams = _resolve_penalties(lam, designs, keys, folds, grid, rate_constant, seed_eff, cfg)

    fits = {}
    for key, design, lam_val in zip(keys, designs, lams):
        fit = fit_lasso(design, lam_val, cfg)
        if not fit.converged:
            raise NonConvergenceError(
                f"lasso did not converge (lambda={lam_val:.6g}, cycles={fit.cycles}, "
                f"kkt violation={fit.kkt_violation:.3g})"
            )
        fits[key] = fit
    if scope == "specific":
        for key in singletons:
            fits[key] = LassoFit(
                beta=np.zeros(ds.p), lam=0.0, active_count=0,
                cycles=0, converged=True, kkt_violation=0.0,
            )

    if scope == "common":
        adj = AdjustedVectors(
            "common",
            fits[(1,)].beta,
            fits[(0,)].beta,
            fits[(1,)].active_count,
            fits[(0,)].active_count,
            diagnostics={"lambda": {arm: fits[(arm,)].lam for arm in (1, 0)}},
        )
        return regression_adjusted(ds, adj, LASSO_COMMON)

    k_total = ds.n_strata
    beta1 = np.zeros((k_total, ds.p))
    beta0 = np.zeros((k_total, ds.p))
    sel1 = np.zeros(k_total, dtype=int)
    sel0 = np.zeros(k_total, dtype=int)
    for (arm, k), fit in fits.items():
        beta_out, sel_out = (beta1, sel1) if arm == 1 else (beta0, sel0)
        beta_out[k - 1] = fit.beta
        sel_out[k - 1] = fit.active_count
    adj = AdjustedVectors(
        "specific", beta1, beta0, sel1, sel0,
        diagnostics={"lambda": {key: fit.lam for key, fit in fits.items()}},
    )
    return regression_adjusted(ds, adj, LASSO_SPECIFIC)


def estimate(ds: TrialDataset, kind: str, **options) -> TreatmentEffectEstimate:
    """Dispatch by estimator name (see :data:`ALL_ESTIMATORS`)."""
    if kind == DIM:
        return difference_in_means(ds)
    if kind == OLS_COMMON:
        return ols_adjusted(ds, scope="common", **options)
    if kind == OLS_SPECIFIC:
        return ols_adjusted(ds, scope="specific", **options)
    if kind == LASSO_COMMON:
        return lasso_adjusted(ds, scope="common", **options)
    if kind == LASSO_SPECIFIC:
        return lasso_adjusted(ds, scope="specific", **options)
    raise ValidationError(f"unknown estimator {kind!r}; choose from {ALL_ESTIMATORS}")


class _FittedMixin:
    """Post-fit conveniences shared by the estimator classes."""

    def _fitted(self) -> TreatmentEffectEstimate:
        if not hasattr(self, "result_"):
            raise ValidationError("call fit() first")
        return self.result_

    @property
    def estimate_(self) -> float:
        return self._fitted().estimate

    def standard_error(self, pi: float | None = None, adjusted: bool = False) -> float:
        ve = variance_components(self._fitted(), pi)
        if adjusted:
            ve = df_adjust(ve, self._fitted())
        return ve.se

    def confidence_interval(self, level: float = 0.95, pi: float | None = None, adjusted: bool = False):
        ve = variance_components(self._fitted(), pi)
        if adjusted:
            ve = df_adjust(ve, self._fitted())
        return confidence_interval(self._fitted(), ve, level)


class DifferenceInMeans(_FittedMixin, BaseEstimator):
    """Stratified difference in means as a fit-style estimator."""

    def fit(self, data: TrialDataset, y=None):
        self.result_ = difference_in_means(data)
        return self


class OlsAdjusted(_FittedMixin, BaseEstimator):
    def __init__(self, scope: str = "common", small_stratum: str = "reduce",
                 stratum_centered: bool = False):
        self.scope = scope
        self.small_stratum = small_stratum
        self.stratum_centered = stratum_centered

    def fit(self, data: TrialDataset, y=None):
        self.result_ = ols_adjusted(
            data,
            scope=self.scope,
            small_stratum=self.small_stratum,
            stratum_centered=self.stratum_centered,
        )
        return self


class LassoAdjusted(_FittedMixin, BaseEstimator):
    def __init__(self, scope: str = "common", lam="cv", folds: int = 5, grid=None,
                 rate_constant: float = 1.0, seed: int | None = None):
        self.scope = scope
        self.lam = lam
        self.folds = folds
        self.grid = grid
        self.rate_constant = rate_constant
        self.seed = seed

    def fit(self, data: TrialDataset, y=None):
        self.result_ = lasso_adjusted(
            data,
            scope=self.scope,
            lam=self.lam,
            folds=self.folds,
            grid=self.grid,
            rate_constant=self.rate_constant,
            seed=self.seed,
        )
        return self
