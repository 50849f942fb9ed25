"""Penalized least squares on stratum-centered designs.

The solver minimizes ``(1/(2m)) * ||y - X b||^2 + lam * ||b||_1`` by cyclic
coordinate descent with exact soft-threshold updates. Columns are centered
per stratum but never variance-scaled (a ``standardize`` switch exists and
is off by default): the penalty applies to raw-scale coefficients.

Iteration runs over a working set (current support plus columns whose
gradient exceeds the penalty) and finishes only when the full subgradient
conditions hold, so every converged fit carries a KKT certificate:
``|g_j| <= lam`` for inactive coordinates and ``g_j = lam * sign(b_j)`` for
active ones, where ``g = X^T (y - X b) / m``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import TrialDataset
from .errors import DegenerateStratumError, SingularDesignError, ValidationError


@dataclass(frozen=True)
class CenteredDesign:
    """Arm-and-stratum-centered rows and response for one treatment arm.

    ``rows[i] = X_i - mean(X over i's stratum-arm)`` and likewise for the
    response, so the per-stratum column means are zero to round-off.
    """

    rows: np.ndarray
    response: np.ndarray
    strata: np.ndarray   # stratum code of each row, for fold balancing
    arm: int
    scope: object        # "pooled" or the stratum code

    @property
    def m(self) -> int:
        return self.rows.shape[0]

    @property
    def p(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-7            # max coordinate change per cycle
    max_cycles: int = 10_000
    kkt_tol: float = 1e-7        # scaled by (1 + lam)
    standardize: bool = False
    check_monotone: bool = False  # assert the objective never increases


@dataclass
class LassoFit:
    beta: np.ndarray
    lam: float
    active_count: int
    cycles: int
    converged: bool
    kkt_violation: float


def build_centered_design(ds: TrialDataset, arm: int, stratum: int | None = None) -> CenteredDesign:
    """Center arm ``arm`` units at their stratum-arm means.

    ``stratum=None`` pools every stratum (each block centered at its own
    mean); an integer restricts the design to that stratum. A single
    stratum needs at least two units in the arm; the pooled design accepts
    singleton cells, whose centered rows are identically zero and therefore
    contribute nothing beyond their share of the normalization.
    """
    if arm not in (0, 1):
        raise ValidationError("arm must be 0 or 1")
    if stratum is None:
        ks = range(1, ds.n_strata + 1)
        min_cell = 1
    else:
        if not 1 <= stratum <= ds.n_strata:
            raise ValidationError(f"stratum {stratum} out of range")
        ks = (stratum,)
        min_cell = 2
    in_arm = ds.assignment == arm
    blocks_x, blocks_y, blocks_k = [], [], []
    for k in ks:
        sel = in_arm & (ds.strata == k)
        m_k = int(sel.sum())
        if m_k < min_cell:
            raise DegenerateStratumError(
                f"stratum {ds.stratum_labels[k - 1]!r} has {m_k} unit(s) in arm {arm}; "
                f"need >= {min_cell}",
                stratum=ds.stratum_labels[k - 1],
                arm=arm,
            )
        xk = ds.x[sel]
        yk = ds.y[sel]
        blocks_x.append(xk - xk.mean(axis=0))
        blocks_y.append(yk - yk.mean())
        blocks_k.append(np.full(m_k, k, dtype=np.int64))
    return CenteredDesign(
        rows=np.vstack(blocks_x) if ds.p else np.empty((sum(len(b) for b in blocks_y), 0)),
        response=np.concatenate(blocks_y),
        strata=np.concatenate(blocks_k),
        arm=arm,
        scope="pooled" if stratum is None else stratum,
    )


def lambda_max(design: CenteredDesign) -> float:
    """Smallest penalty at which the solution is exactly zero."""
    if design.p == 0:
        return 0.0
    return float(np.abs(design.rows.T @ design.response).max() / design.m)


def lambda_rate(n: int, p: int, c: float) -> float:
    """Theory-shaped penalty ``c * sqrt(log(p) / n)``.

    The interval the theory prescribes involves constants that are not
    computable from data; they are collapsed into the caller's ``c``.
    """
    if n < 2 or p < 2:
        raise ValidationError("lambda_rate requires n >= 2 and p >= 2")
    if c <= 0:
        raise ValidationError("rate constant must be positive")
    return float(c * np.sqrt(np.log(p) / n))


def _soft(x: float, t: float) -> float:
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


def _kkt_violation(grad: np.ndarray, beta: np.ndarray, lam: float) -> float:
    active = beta != 0.0
    v = 0.0
    if active.any():
        v = float(np.abs(grad[active] - lam * np.sign(beta[active])).max())
    if (~active).any():
        v = max(v, float(max(np.abs(grad[~active]).max() - lam, 0.0)))
    return v


def _objective(gram, corr, yty_m, beta, lam) -> float:
    return 0.5 * (yty_m - 2.0 * corr @ beta + beta @ gram @ beta) + lam * np.abs(beta).sum()


def _cd_gram(gram, corr, lam, beta0, cfg: SolverConfig, yty_m: float | None = None):
    """Coordinate descent on the Gram form; returns (beta, cycles, converged, kkt)."""
    p = corr.size
    beta = np.array(beta0, dtype=float, copy=True)
    diag = np.ascontiguousarray(np.diagonal(gram)).copy()
    solvable = diag > 0.0
    grad = corr - gram @ beta
    kkt_limit = cfg.kkt_tol * (1.0 + lam)
    work = np.flatnonzero(((beta != 0.0) | (np.abs(grad) > lam)) & solvable)
    cycles = 0
    tol = cfg.tol
    last_obj = np.inf
    while True:
        while cycles < cfg.max_cycles:
            cycles += 1
            max_delta = 0.0
            for j in work:
                rho = grad[j] + diag[j] * beta[j]
                bj = _soft(rho, lam) / diag[j]
                delta = bj - beta[j]
                if delta != 0.0:
                    beta[j] = bj
                    grad -= gram[j] * delta
                    ad = abs(delta)
                    if ad > max_delta:
                        max_delta = ad
            if cfg.check_monotone and yty_m is not None:
                obj = _objective(gram, corr, yty_m, beta, lam)
                if obj > last_obj + 1e-10 * (1.0 + abs(last_obj)):
                    raise AssertionError(f"objective increased: {last_obj} -> {obj}")
                last_obj = obj
            if max_delta < tol:
                break
        grad = corr - gram @ beta  # refresh: incremental updates drift
        kkt = _kkt_violation(grad, beta, lam)
        if kkt <= kkt_limit:
            return beta, cycles, True, kkt
        if cycles >= cfg.max_cycles:
            return beta, cycles, False, kkt
        entering = np.flatnonzero((beta == 0.0) & (np.abs(grad) > lam) & solvable)
        entering = np.setdiff1d(entering, work, assume_unique=False)
        if entering.size:
            work = np.union1d(work, entering)
        else:
            # working set is KKT-clean at this tolerance but the certificate
            # is not; tighten the sweep tolerance and keep going
            tol *= 0.1
            if tol < 1e-16:
                return beta, cycles, False, kkt


def fit_lasso(design: CenteredDesign, lam: float, cfg: SolverConfig | None = None) -> LassoFit:
    """Solve the penalized problem on ``design`` at penalty ``lam``."""
    cfg = cfg or SolverConfig()
    if lam < 0:
        raise ValidationError("penalty must be non-negative")
    rows, resp = design.rows, design.response
    if not (np.isfinite(rows).all() and np.isfinite(resp).all()):
        raise ValidationError("design contains non-finite values")
    m, p = rows.shape
    if p == 0:
        return LassoFit(np.empty(0), lam, 0, 0, True, 0.0)
    scale = None
    if cfg.standardize:
        scale = np.sqrt((rows**2).sum(axis=0) / m)
        scale[scale == 0.0] = 1.0
        rows = rows / scale
    gram = rows.T @ rows / m
    corr = rows.T @ resp / m
    yty_m = float(resp @ resp / m) if cfg.check_monotone else None
    beta, cycles, converged, kkt = _cd_gram(gram, corr, lam, np.zeros(p), cfg, yty_m)
    if scale is not None:
        beta = beta / scale
    return LassoFit(
        beta=beta,
        lam=float(lam),
        active_count=int(np.count_nonzero(beta)),
        cycles=cycles,
        converged=converged,
        kkt_violation=kkt,
    )


def _batched_path(grams, corrs, lam_grid, tol, cycle_cap, dfmax):
    """Warm-started cyclic coordinate descent on a stack of problems.

    ``grams`` is (B, p, p), ``corrs`` (B, p), ``lam_grid`` (L, B) with every
    column descending (each problem follows its own penalty grid). One
    coordinate update advances all B problems at once, so the Python-level
    loop scales with the union working set instead of B times it. Fits are
    path-grade (loose tolerance, capped cycles per grid point): used for
    cross-validation, where only held-out prediction error matters. Final
    coefficients are refit with certificates by :func:`fit_lasso`.

    Returns ``(betas, saturated)``: once the union working set reaches
    ``dfmax`` the path stops growing, the current solution is carried
    forward, and the remaining grid points are flagged saturated so callers
    can censor them.
    """
    n_batch, p = corrs.shape
    n_lam = lam_grid.shape[0]
    # transposed (p, B) layout keeps every per-coordinate slice contiguous
    diags = np.ascontiguousarray(np.diagonal(grams, axis1=1, axis2=2).T).copy()
    safe_diags = np.where(diags > 0.0, diags, 1.0)
    gram_rows = np.ascontiguousarray(np.moveaxis(grams, 0, 2))  # (p, p, B)
    betas_out = np.zeros((n_lam, n_batch, p))
    saturated = np.zeros(n_lam, dtype=bool)
    beta = np.zeros((p, n_batch))
    grad = np.ascontiguousarray(corrs.T).copy()
    active = np.zeros(p, dtype=bool)
    rho = np.empty(n_batch)
    new = np.empty(n_batch)
    shrink = np.empty(n_batch)
    delta = np.empty(n_batch)
    prod = np.empty((p, n_batch))
    for t in range(n_lam):
        lam = lam_grid[t]
        in_work = active.copy()
        while True:
            in_work |= (np.abs(grad) > lam).any(axis=1)
            if in_work.sum() >= dfmax:
                saturated[t:] = True
                betas_out[t:] = beta.T
                return betas_out, saturated
            work = np.flatnonzero(in_work)
            for _ in range(cycle_cap):
                max_delta = 0.0
                for j in work:
                    np.multiply(diags[j], beta[j], out=rho)
                    rho += grad[j]
                    # soft threshold: sign(rho) * max(|rho| - lam, 0) / diag
                    np.abs(rho, out=shrink)
                    shrink -= lam
                    np.maximum(shrink, 0.0, out=shrink)
                    np.sign(rho, out=new)
                    new *= shrink
                    new /= safe_diags[j]
                    np.subtract(new, beta[j], out=delta)
                    d = float(np.abs(delta, out=rho).max())
                    if d > 0.0:
                        beta[j] = new
                        np.multiply(gram_rows[j], delta, out=prod)
                        grad -= prod
                        if d > max_delta:
                            max_delta = d
                if max_delta < tol:
                    break
            entering = (~in_work) & (np.abs(grad) > lam).any(axis=1)
            if not entering.any():
                break
            in_work |= entering
        active = (beta != 0.0).any(axis=1)
        betas_out[t] = beta.T
    return betas_out, saturated


def fit_lasso_path(rows, resp, lams, cfg: SolverConfig | None = None) -> np.ndarray:
    """Warm-started fits along a penalty grid (single problem).

    Returns an ``(len(lams), p)`` coefficient matrix in the caller's grid
    order. Path fits trade certificate-grade precision for speed; refit the
    winning penalty with :func:`fit_lasso` when the coefficients themselves
    matter.
    """
    cfg = cfg or SolverConfig()
    lams = np.asarray(lams, dtype=float)
    order = np.argsort(-lams)
    m, p = rows.shape
    gram = (rows.T @ rows / m)[None, :, :]
    corr = (rows.T @ resp / m)[None, :]
    betas, _ = _batched_path(
        gram, corr, lams[order][:, None],
        tol=max(cfg.tol, 1e-7), cycle_cap=cfg.max_cycles, dfmax=p + 1,
    )
    out = np.empty((lams.size, p))
    out[order] = betas[:, 0, :]
    return out


def fit_ols(x, y, intercept: bool = True) -> np.ndarray:
    """Least squares via a rank-revealing solve; rank deficiency is an error.

    With ``intercept=True`` the returned vector holds the covariate
    coefficients only (the intercept is discarded).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.size:
        raise ValidationError("OLS inputs must be (m, p) and (m,)")
    m, p = x.shape
    if p == 0:
        return np.empty(0)
    design = np.column_stack([np.ones(m), x]) if intercept else x
    q = design.shape[1]
    if m <= q:
        raise SingularDesignError(
            f"need more rows than columns: m={m}, columns={q}; consider the lasso estimator"
        )
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < q:
        raise SingularDesignError(
            f"design is rank deficient (rank {rank} < {q}); consider the lasso estimator"
        )
    return coef[1:] if intercept else coef


def fit_ols_centered(design: CenteredDesign) -> np.ndarray:
    """OLS on an already-centered design (no intercept)."""
    return fit_ols(design.rows, design.response, intercept=False)


def fit_ols_reduced(x, y, max_terms: int, tol: float = 1e-7) -> tuple[np.ndarray, int]:
    """Rank-capped least squares for small cells.

    Centers ``x`` and ``y`` (absorbing the intercept) and fits the first
    ``max_terms`` non-aliased columns in input order, the way standard
    regression software keeps the leading columns of a rank-deficient
    design and zeroes the aliased remainder. Returns the full-length
    coefficient vector and the number of fitted columns. Capping at
    ``m - 2`` keeps at least one residual degree of freedom.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    m, p = x.shape
    if m < 2:
        raise DegenerateStratumError(f"need >= 2 rows, got {m}")
    beta = np.zeros(p)
    if p == 0 or max_terms <= 0:
        return beta, 0
    xc = x - x.mean(axis=0)
    yc = y - y.mean()
    kept: list[int] = []
    basis: list[np.ndarray] = []
    for j in range(p):
        v = xc[:, j]
        norm_v = float(np.linalg.norm(v))
        if norm_v == 0.0:
            continue
        r = v.copy()
        for q in basis:
            r -= (q @ r) * q
        norm_r = float(np.linalg.norm(r))
        if norm_r > tol * norm_v:
            basis.append(r / norm_r)
            kept.append(j)
            if len(kept) == max_terms:
                break
    if not kept:
        return beta, 0
    beta[kept], _, _, _ = np.linalg.lstsq(xc[:, kept], yc, rcond=None)
    return beta, len(kept)


def select_lambda_cv(
    design: CenteredDesign,
    folds: int = 5,
    grid=None,
    rng: np.random.Generator | None = None,
    cfg: SolverConfig | None = None,
    rate_constant: float = 1.0,
) -> float:
    """Pick a penalty by stratum-balanced K-fold cross-validation.

    The grid defaults to 50 log-spaced points from ``lambda_max`` down to
    ``lambda_max / 1000``. The largest penalty whose mean prediction error
    is within one standard error of the minimum wins (1-SE rule). When the
    design is too small to fold, falls back to :func:`lambda_rate` with
    ``rate_constant``.
    """
    if folds < 2:
        raise ValidationError("folds must be >= 2")
    cfg = cfg or SolverConfig()
    rng = rng or np.random.default_rng()
    (selected,) = cross_validate_penalties(
        [design], folds=folds, grid=grid, rngs=[rng], cfg=cfg, rate_constant=rate_constant
    )
    return selected


def _fold_ids(design: CenteredDesign, folds: int, rng) -> np.ndarray:
    """Stratified round-robin with a rolling offset: fold sizes differ by
    at most one and every stratum with >= 2 rows spans >= 2 folds."""
    fold_id = np.empty(design.m, dtype=np.int64)
    pos = 0
    for k in np.unique(design.strata):
        idx = np.flatnonzero(design.strata == k)
        idx = rng.permutation(idx)
        fold_id[idx] = (pos + np.arange(idx.size)) % folds
        pos += idx.size
    return fold_id


def _one_se_choice(errors: np.ndarray, grid: np.ndarray) -> float:
    """Largest penalty within one standard error of the CV minimum."""
    cv_mean = errors.mean(axis=0)
    i_min = int(np.argmin(cv_mean))
    se_min = float(errors[:, i_min].std(ddof=1)) / np.sqrt(errors.shape[0])
    threshold = cv_mean[i_min] + se_min
    chosen = int(np.flatnonzero(cv_mean <= threshold)[0])  # grid is descending
    return float(grid[chosen])


def cross_validate_penalties(
    designs: list[CenteredDesign],
    folds: int = 5,
    grid=None,
    rngs=None,
    cfg: SolverConfig | None = None,
    rate_constant: float = 1.0,
) -> list[float]:
    """Select one penalty per design, cross-validating all designs jointly.

    Every fold of every design becomes one problem in a single batched
    path solve (each on its own ``lambda_max``-scaled grid), which is what
    makes per-arm and per-stratum tuning affordable inside Monte Carlo
    loops. Semantics per design match :func:`select_lambda_cv`.
    """
    cfg = cfg or SolverConfig()
    if rngs is None:
        rngs = [np.random.default_rng() for _ in designs]
    ratios = np.logspace(0.0, -3.0, 50) if grid is None else None
    out: list[float | None] = [None] * len(designs)
    jobs = []  # (design index, fold ids, folds_eff, grid)
    problems = []  # (gram, corr, per-problem grid)
    for i, design in enumerate(designs):
        m, p = design.rows.shape
        if p == 0:
            out[i] = 0.0
            continue
        if grid is None:
            lmax = lambda_max(design)
            if lmax <= 0.0:
                out[i] = 0.0
                continue
            local_grid = lmax * ratios
        else:
            local_grid = np.sort(np.asarray(grid, dtype=float))[::-1]
            if local_grid.size == 0:
                raise ValidationError("penalty grid is empty")
            if local_grid.size == 1:
                out[i] = float(local_grid[0])
                continue
        folds_eff = min(folds, m)
        min_train = m - int(np.ceil(m / folds_eff))
        if folds_eff < 2 or min_train < 2:
            out[i] = _rate_fallback(design, rate_constant)
            continue
        fold_id = _fold_ids(design, folds_eff, rngs[i])
        jobs.append((i, fold_id, folds_eff, local_grid))
        for f in range(folds_eff):
            rows_f = design.rows[fold_id != f]
            resp_f = design.response[fold_id != f]
            m_f = rows_f.shape[0]
            problems.append((rows_f.T @ rows_f / m_f, rows_f.T @ resp_f / m_f, local_grid))
    if not problems:
        return [v for v in out]  # type: ignore[list-item]

    p = designs[0].p
    grams = np.stack([g for g, _, _ in problems])
    corrs = np.stack([c for _, c, _ in problems])
    lam_grid = np.stack([g for _, _, g in problems], axis=1)
    if lam_grid.shape[0] > 1 and not np.all(lam_grid[:-1] >= lam_grid[1:]):
        raise ValidationError("penalty grids must be descending")
    # loose, scale-aware tolerance: prediction error is all that matters here
    scale = max(float(np.abs(np.concatenate([d.response for d in designs])).mean()), 1e-12)
    train_rows = max(d.m for d in designs)
    betas, saturated = _batched_path(
        grams, corrs, lam_grid,
        tol=1e-4 * scale,
        cycle_cap=10,
        dfmax=max(8, min(p, int(0.75 * train_rows))),
    )
    offset = 0
    for i, fold_id, folds_eff, local_grid in jobs:
        design = designs[i]
        errors = np.empty((folds_eff, local_grid.size))
        for f in range(folds_eff):
            test = fold_id == f
            resid = design.response[test, None] - design.rows[test] @ betas[:, offset + f, :].T
            errors[f] = (resid**2).mean(axis=0)
        offset += folds_eff
        # penalties whose path saturated the working-set cap are not
        # reliable candidates; censor them from the selection
        errors[:, saturated] = np.inf
        if np.isfinite(errors.mean(axis=0)).any():
            out[i] = _one_se_choice(errors, local_grid)
        else:
            out[i] = _rate_fallback(design, rate_constant)
    return [float(v) for v in out]


def _rate_fallback(design: CenteredDesign, rate_constant: float) -> float:
    """Penalty for designs too small to cross-validate.

    The theory rate is scale-free while the objective's penalty lives on
    the outcome scale, so the unknowable constants are estimated by the
    response RMS. Cells this small cannot support covariate selection, and
    the heavy penalty keeps them close to the unadjusted fit.
    """
    scale = float(np.sqrt(np.mean(design.response**2))) or 1.0
    return scale * lambda_rate(max(design.m, 2), max(design.p, 2), rate_constant)
