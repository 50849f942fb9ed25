"""Nonparametric variance estimation and normal-theory confidence intervals.

The variance of a treatment-effect estimate splits into a within-stratum
residual component (per-arm, allocation-scaled) and an across-stratum
effect-heterogeneity component. The within component uses the ``1/n``
normalization of the asymptotic sample analog; the degrees-of-freedom
adjustment supplies the finite-sample correction, replacing ``n`` with
``n - s - 1`` where ``s`` counts fitted covariates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateStratumError, DfExhaustedError, ValidationError


@dataclass(frozen=True)
class VarianceEstimate:
    """Variance components for ``sqrt(n) * (estimate - truth)``.

    ``within_treated`` and ``within_control`` are the two allocation-scaled
    arm terms of the residual component; ``between`` is the across-stratum
    term. ``total / n`` is the variance of the estimate itself.
    """

    within_treated: float
    within_control: float
    between: float
    n: int
    pi: float
    adjusted: bool = False

    @property
    def within(self) -> float:
        return self.within_treated + self.within_control

    @property
    def total(self) -> float:
        return self.within_treated + self.within_control + self.between

    @property
    def se(self) -> float:
        return math.sqrt(self.total / self.n)


@dataclass(frozen=True)
class ConfidenceInterval:
    lower: float
    upper: float
    level: float

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def _stratum_cells(est):
    """Yield (k, treated residuals, control residuals, share) per stratum."""
    ds = est.data
    res = est.residuals
    treated = ds.assignment == 1
    for k in range(1, ds.n_strata + 1):
        in_k = ds.strata == k
        rt = res[in_k & treated]
        rc = res[in_k & ~treated]
        if rt.size == 0 or rc.size == 0:
            raise DegenerateStratumError(
                f"stratum {ds.stratum_labels[k - 1]!r} has an empty arm",
                stratum=ds.stratum_labels[k - 1],
            )
        yield k, rt, rc, in_k.sum() / ds.n


def variance_components(est, pi: float | None = None) -> VarianceEstimate:
    """Sample-analog variance components from the residuals carried on ``est``.

    ``pi`` defaults to the realized pooled treated fraction; simulations
    should pass the design allocation.
    """
    ds = est.data
    if pi is None:
        pi = est.pi
    if not 0.0 < pi < 1.0:
        raise ValidationError("allocation must lie in (0, 1)")
    treated = ds.assignment == 1
    grand_t = est.residuals[treated].mean()
    grand_c = est.residuals[~treated].mean()
    within_t = 0.0
    within_c = 0.0
    between = 0.0
    for _, rt, rc, share in _stratum_cells(est):
        within_t += share * float(((rt - rt.mean()) ** 2).mean())
        within_c += share * float(((rc - rc.mean()) ** 2).mean())
        between += share * ((rt.mean() - grand_t) - (rc.mean() - grand_c)) ** 2
    return VarianceEstimate(
        within_treated=within_t / pi,
        within_control=within_c / (1.0 - pi),
        between=float(between),
        n=ds.n,
        pi=float(pi),
    )


def df_adjust(ve: VarianceEstimate, est) -> VarianceEstimate:
    """Degrees-of-freedom corrected variant of ``ve``.

    Shared adjustment vectors inflate each arm term by ``n / (n - s - 1)``;
    stratum-specific vectors replace every per-stratum ``1/n`` denominator
    by ``1 / (n_cell - s_cell - 1)``. The between component is unchanged.
    """
    adj = est.adjustment
    if adj is None:
        raise ValidationError(f"estimator {est.kind!r} carries no adjusted vectors to correct for")
    n = ve.n
    if adj.mode == "common":
        s1, s0 = int(adj.selected1), int(adj.selected0)
        if n - s1 - 1 <= 0 or n - s0 - 1 <= 0:
            raise DfExhaustedError(f"n={n} cannot support s(1)={s1}, s(0)={s0}")
        return replace(
            ve,
            within_treated=ve.within_treated * n / (n - s1 - 1),
            within_control=ve.within_control * n / (n - s0 - 1),
            adjusted=True,
        )
    s1 = np.asarray(adj.selected1, dtype=int)
    s0 = np.asarray(adj.selected0, dtype=int)
    within_t = 0.0
    within_c = 0.0
    for k, rt, rc, share in _stratum_cells(est):
        # cells whose correction is undefined (no residual degrees of
        # freedom left) keep the uncorrected 1/n normalization: the
        # correction inflates only where residual information exists, so
        # the adjusted total never falls below the unadjusted one
        df_t = rt.size - s1[k - 1] - 1
        df_c = rc.size - s0[k - 1] - 1
        within_t += share * float(((rt - rt.mean()) ** 2).sum()) / (df_t if df_t > 0 else rt.size)
        within_c += share * float(((rc - rc.mean()) ** 2).sum()) / (df_c if df_c > 0 else rc.size)
    return replace(
        ve,
        within_treated=within_t / ve.pi,
        within_control=within_c / (1.0 - ve.pi),
        adjusted=True,
    )


def confidence_interval(est, ve: VarianceEstimate, level: float = 0.95) -> ConfidenceInterval:
    """Normal-theory interval ``estimate +- z * sqrt(total / n)``."""
    if not 0.0 < level < 1.0:
        raise ValidationError("level must lie in (0, 1)")
    if ve.total < 0.0:
        raise ValidationError("variance estimate is negative")
    z = normal_quantile(0.5 + level / 2.0)
    half = z * ve.se
    return ConfidenceInterval(est.estimate - half, est.estimate + half, level)


def asymptotic_delta_common(sigma, beta_star, pi: float) -> float:
    """Asymptotic variance gap of the shared-vector adjusted estimator
    relative to the plain stratified difference in means: always <= 0 and
    equal to ``-(pi (1-pi))^{-1} b*' Sigma b*``."""
    sigma = np.asarray(sigma, dtype=float)
    beta_star = np.asarray(beta_star, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ValidationError("covariance matrix must be square")
    if not np.allclose(sigma, sigma.T, atol=1e-10):
        raise ValidationError("covariance matrix must be symmetric")
    if beta_star.shape != (sigma.shape[0],):
        raise ValidationError("coefficient vector does not match covariance dimension")
    if not 0.0 < pi < 1.0:
        raise ValidationError("allocation must lie in (0, 1)")
    return float(-(beta_star @ sigma @ beta_star) / (pi * (1.0 - pi)))


def asymptotic_delta_specific(sigmas, weights, beta_stars, sigma_pooled, beta_star_pooled, pi: float) -> float:
    """Asymptotic variance gap of stratum-specific over shared adjustment:
    ``-(pi (1-pi))^{-1} [sum_k w_k b_k' Sigma_k b_k - b*' Sigma b*]``."""
    weights = np.asarray(weights, dtype=float)
    if weights.ndim != 1 or not math.isclose(weights.sum(), 1.0, abs_tol=1e-8):
        raise ValidationError("stratum weights must sum to 1")
    if len(sigmas) != weights.size or len(beta_stars) != weights.size:
        raise ValidationError("need one covariance and one vector per stratum")
    if not 0.0 < pi < 1.0:
        raise ValidationError("allocation must lie in (0, 1)")
    acc = 0.0
    for w, sig, b in zip(weights, sigmas, beta_stars):
        sig = np.asarray(sig, dtype=float)
        b = np.asarray(b, dtype=float)
        if not np.allclose(sig, sig.T, atol=1e-10):
            raise ValidationError("stratum covariance must be symmetric")
        acc += w * float(b @ sig @ b)
    pooled = float(
        np.asarray(beta_star_pooled) @ np.asarray(sigma_pooled) @ np.asarray(beta_star_pooled)
    )
    return float(-(acc - pooled) / (pi * (1.0 - pi)))


# Rational approximation of the standard normal quantile (absolute error far
# below 1e-8 across (0, 1)); keeps inference free of external dependencies
# and bit-stable across platforms.
_A = (
    3.3871328727963666080e0, 1.3314166789178437745e2, 1.9715909503065514427e3,
    1.3731693765509461125e4, 4.5921953931549871457e4, 6.7265770927008700853e4,
    3.3430575583588128105e4, 2.5090809287301226727e3,
)
_B = (
    1.0, 4.2313330701600911252e1, 6.8718700749205790830e2, 5.3941960214247511077e3,
    2.1213794301586595867e4, 3.9307895800092710610e4, 2.8729085735721942674e4,
    5.2264952788528545610e3,
)
_C = (
    1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
    3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
    2.27238449892691845833e-2, 7.74545014278341407640e-4,
)
_D = (
    1.0, 2.05319162663775882187e0, 1.67638483018380384940e0, 6.89767334985100004550e-1,
    1.48103976427480074590e-1, 1.51986665636164571966e-2, 5.47593808499534494600e-4,
    1.05075007164441684324e-9,
)
_E = (
    6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
    2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
    2.71155556874348757815e-5, 2.01033439929228813265e-7,
)
_F = (
    1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1, 1.48753612908506150230e-2,
    7.86869131145613294790e-4, 1.84631831751005468180e-5, 1.42151175831644588870e-7,
    2.04426310338993978564e-15,
)


def _poly(coefs, x: float) -> float:
    acc = 0.0
    for c in reversed(coefs):
        acc = acc * x + c
    return acc


def normal_quantile(prob: float) -> float:
    """Inverse standard normal CDF."""
    if not 0.0 < prob < 1.0:
        raise ValidationError("probability must lie strictly in (0, 1)")
    q = prob - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        return q * _poly(_A, r) / _poly(_B, r)
    r = prob if q < 0.0 else 1.0 - prob
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        value = _poly(_C, r) / _poly(_D, r)
    else:
        r -= 5.0
        value = _poly(_E, r) / _poly(_F, r)
    return -value if q < 0.0 else value
