"""Acceptance gate: every numbered criterion at its stated tolerance.

One pass/fail line per criterion appears in the pytest terminal summary.
The Monte Carlo runs are seed-fixed and sized so the whole module completes
in roughly ten to fifteen minutes single-threaded; the headline table
reproduction (criterion 1) alone stays under five minutes.
"""

import subprocess
import sys

import numpy as np
import pytest

from caradjust import (
    CustomModel,
    ModelSpec,
    RandomizationScheme,
    SolverConfig,
    TrialDataset,
    assign_all,
    build_centered_design,
    difference_in_means,
    fit_lasso,
    lambda_max,
    lasso_adjusted,
    ols_adjusted,
    regression_adjusted,
    run_replications,
)
from caradjust.estimators import AdjustedVectors
from caradjust.inference import asymptotic_delta_common
from caradjust.randomization import ALL_SCHEMES, POCOCK_SIMON
from conftest import record_criterion
from reference import normal_equation_ols

pytestmark = pytest.mark.acceptance

SEED = 20260808
REPS = 1000
LEVEL_BAND = (0.92, 0.97)

SD_TARGETS = {
    "dim": (5.48, 0.10),
    "ols_common": (1.71, 0.10),
    "ols_specific": (0.59, 0.15),
    "lasso_common": (1.85, 0.15),
    "lasso_specific": (0.69, 0.15),
}


def model1_run(scheme: RandomizationScheme):
    return run_replications(
        ModelSpec(name="model1"), scheme, n=200, reps=REPS, seed=SEED, lambda_mode="cv"
    )


@pytest.fixture(scope="module")
def model1_simple():
    return model1_run(RandomizationScheme(variant="simple", pi=0.5))


@pytest.fixture(scope="module")
def model1_block():
    return model1_run(RandomizationScheme(variant="stratified_block", pi=0.5, block_size=6))


@pytest.fixture(scope="module")
def model1_minimization():
    return model1_run(RandomizationScheme(variant="pocock_simon", pi=0.5, bias_prob=0.75))


def check_sd_and_bias(report):
    rows = {r.estimator: r for r in report.rows}
    details = []
    ok = True
    for name, (target, tol) in SD_TARGETS.items():
        row = rows[name]
        sd_ok = abs(row.sd - target) <= tol * target
        bias_ok = abs(row.bias) < 3.0 * row.sd / np.sqrt(row.successes)
        ok &= sd_ok and bias_ok
        details.append(f"{name} sd={row.sd:.2f} (want {target}±{tol:.0%}) bias={row.bias:+.3f}")
    return ok, "; ".join(details)


def check_coverage(report):
    rows = {r.estimator: r for r in report.rows}
    details = []
    ok = True
    for name in SD_TARGETS:
        row = rows[name]
        cp = row.cp_unadj if name == "dim" else row.cp_adj
        ok &= LEVEL_BAND[0] <= cp <= LEVEL_BAND[1]
        details.append(f"{name}={cp:.3f}")
    return ok, "corrected-interval coverage " + ", ".join(details)


class TestTableReproduction:
    def test_criterion_1_headline_sd_and_bias(self, model1_simple):
        ok, detail = check_sd_and_bias(model1_simple)
        record_criterion("1 simulated-spread reproduction (simple)", ok, detail)
        assert ok, detail

    def test_criterion_2_coverage_calibration(self, model1_simple):
        ok, detail = check_coverage(model1_simple)
        record_criterion("2 coverage calibration (simple)", ok, detail)
        assert ok, detail

    def test_criterion_1_variance_ordering(self, model1_simple):
        rows = {r.estimator: r for r in model1_simple.rows}
        mc_se = {n: rows[n].sd / np.sqrt(2 * (rows[n].successes - 1)) for n in rows}
        gaps = [
            rows["dim"].sd - rows["lasso_common"].sd,
            rows["lasso_common"].sd - rows["lasso_specific"].sd,
        ]
        ok = gaps[0] > 3 * (mc_se["dim"] + mc_se["lasso_common"]) and gaps[1] > 3 * (
            mc_se["lasso_common"] + mc_se["lasso_specific"]
        )
        assert ok, f"variance ordering gaps too small: {gaps}"


class TestSchemeInvariance:
    def test_criterion_4_stratified_block(self, model1_block):
        ok1, d1 = check_sd_and_bias(model1_block)
        ok2, d2 = check_coverage(model1_block)
        record_criterion("4a spread+coverage under stratified block", ok1 and ok2, f"{d1} | {d2}")
        assert ok1 and ok2, f"{d1} | {d2}"

    def test_criterion_4_minimization(self, model1_minimization):
        ok1, d1 = check_sd_and_bias(model1_minimization)
        ok2, d2 = check_coverage(model1_minimization)
        record_criterion("4b spread+coverage under minimization", ok1 and ok2, f"{d1} | {d2}")
        assert ok1 and ok2, f"{d1} | {d2}"


class TestSmallStratumFragility:
    def test_criterion_3_model3(self):
        report = run_replications(
            ModelSpec(name="model3"),
            RandomizationScheme(variant="simple", pi=0.5),
            n=200, reps=REPS, seed=SEED, lambda_mode="cv",
        )
        rows = {r.estimator: r for r in report.rows}
        ols_row = rows["ols_specific"]
        lasso_row = rows["lasso_specific"]
        clauses = {
            "unadjusted undercoverage": ols_row.cp_unadj < 0.90,
            "corrected coverage": ols_row.cp_adj >= 0.94,
            "spread ordering": ols_row.sd > lasso_row.sd,
        }
        detail = (
            f"ols_specific cp_unadj={ols_row.cp_unadj:.3f} cp_adj={ols_row.cp_adj:.3f} "
            f"sd={ols_row.sd:.2f}; lasso_specific sd={lasso_row.sd:.2f}"
        )
        ok = all(clauses.values())
        record_criterion("3 small-stratum fragility (model 3)", ok, detail)
        assert ok, f"{clauses} | {detail}"


class TestUnequalAllocation:
    def test_criterion_5_two_to_one(self):
        report = run_replications(
            ModelSpec(name="model1"),
            RandomizationScheme(variant="simple", pi=2 / 3),
            n=200, reps=REPS, seed=SEED, lambda_mode="cv",
            estimators=("dim", "lasso_specific"),
        )
        rows = {r.estimator: r for r in report.rows}
        sd_dim, sd_lasso = rows["dim"].sd, rows["lasso_specific"].sd
        ok = abs(sd_dim - 5.83) <= 0.10 * 5.83 and abs(sd_lasso - 0.70) <= 0.15 * 0.70
        detail = f"sd(dim)={sd_dim:.2f} (want 5.83±10%), sd(lasso_specific)={sd_lasso:.2f} (want 0.70±15%)"
        record_criterion("5 unequal allocation (pi=2/3)", ok, detail)
        assert ok, detail


class TestVarianceGapOracle:
    def test_criterion_6_analytic_gap(self):
        p = 6
        beta1 = np.array([3.0, 1.5, 0.0, 0.0, 0.0, 0.0])
        beta0 = np.array([1.0, 2.5, 0.0, 0.0, 0.0, 0.0])
        sigma = np.eye(p)
        pi = 0.5
        beta_star = (1 - pi) * beta1 + pi * beta0
        delta = asymptotic_delta_common(sigma, beta_star, pi)  # -32 for this population

        def sample(rng, n):
            x = rng.standard_normal((n, p))
            strata = rng.integers(1, 3, n)
            return x, strata, strata[:, None]

        model = ModelSpec(
            name="model1",
            mu1=1.0,
            total_covariates=p,
            custom=CustomModel(
                sample=sample,
                g0=lambda x: x @ beta0,
                g1=lambda x: x @ beta1,
                sigma0=lambda x: np.ones(len(x)),
                sigma1=lambda x: np.ones(len(x)),
                base_covariates=p,
                truth=0.0,
            ),
        )
        n = 2000
        report = run_replications(
            model,
            RandomizationScheme(variant="simple", pi=pi),
            n=n, reps=5000, seed=SEED,
            estimators=("dim", "lasso_common"),
            lambda_mode="rate", rate_constant=0.5,
        )
        rows = {r.estimator: r for r in report.rows}
        gap = n * (rows["dim"].sd ** 2 - rows["lasso_common"].sd ** 2)
        ok = abs(gap - (-delta)) <= 0.10 * abs(delta)
        detail = f"empirical n*var gap {gap:.2f} vs analytic {-delta:.2f} (tolerance 10%)"
        record_criterion("6 asymptotic variance-gap oracle", ok, detail)
        assert ok, detail


class TestSolverCertificates:
    def test_criterion_7_kkt_ols_and_shrinkage(self):
        rng = np.random.default_rng(SEED)
        worst = 0.0
        for _ in range(100):
            m = int(rng.integers(20, 60))
            p = int(rng.integers(2, 12))
            rows = rng.standard_normal((m, p))
            rows -= rows.mean(axis=0)
            beta_true = rng.standard_normal(p) * (rng.random(p) < 0.5)
            resp = rows @ beta_true + rng.standard_normal(m)
            resp -= resp.mean()
            design = plain = _design(rows, resp)
            lmax = lambda_max(design)
            lam = float(rng.uniform(0.0, 1.1 * lmax))
            fit = fit_lasso(design, lam)
            assert fit.converged
            worst = max(worst, fit.kkt_violation / (1.0 + lam))
            # full shrinkage is exact
            assert np.all(fit_lasso(design, lmax * (1 + 1e-12)).beta == 0.0)
            # an unpenalized fit matches the normal equations
            ols = fit_lasso(plain, 0.0, SolverConfig(tol=1e-13))
            expected = normal_equation_ols(rows, resp, intercept=False)
            assert np.max(np.abs(ols.beta - expected)) < 1e-8
        ok = worst <= 1e-6
        detail = f"worst normalized subgradient violation {worst:.2e} over 100 instances"
        record_criterion("7 solver certificates", ok, detail)
        assert ok, detail


def _design(rows, resp):
    from caradjust import CenteredDesign

    return CenteredDesign(
        rows=rows, response=resp,
        strata=np.ones(rows.shape[0], dtype=np.int64), arm=1, scope="pooled",
    )


class TestReductionIdentities:
    def test_criterion_8_reductions(self):
        from conftest import random_dataset

        ok = True
        details = []
        # zero adjustment reproduces the plain estimator bit for bit
        for seed in range(20):
            ds = random_dataset(np.random.default_rng(seed))
            zero = AdjustedVectors("common", np.zeros(ds.p), np.zeros(ds.p), 0, 0)
            same = regression_adjusted(ds, zero).estimate == difference_in_means(ds).estimate
            ok &= same
        details.append("zero-adjustment bit-exact over 20 datasets")
        # single stratum: specific coincides with common
        ds1 = random_dataset(np.random.default_rng(100), n=60, p=3, strata=1)
        ols_gap = abs(
            ols_adjusted(ds1, scope="specific").estimate
            - ols_adjusted(ds1, scope="common").estimate
        )
        lasso_gap = abs(
            lasso_adjusted(ds1, scope="specific", lam=0.15).estimate
            - lasso_adjusted(ds1, scope="common", lam=0.15).estimate
        )
        ok &= ols_gap < 1e-10 and lasso_gap == 0.0
        details.append(f"K=1 gaps: ols {ols_gap:.1e}, lasso {lasso_gap:.1e}")
        # balanced covariates: every family member equals the plain estimator
        ds_bal = _balanced_dataset(np.random.default_rng(7))
        base = difference_in_means(ds_bal).estimate
        gaps = [
            abs(ols_adjusted(ds_bal, scope="common").estimate - base),
            abs(ols_adjusted(ds_bal, scope="specific").estimate - base),
            abs(lasso_adjusted(ds_bal, scope="common", lam=0.05).estimate - base),
            abs(lasso_adjusted(ds_bal, scope="specific", lam=0.05).estimate - base),
        ]
        ok &= max(gaps) < 1e-10
        details.append(f"balanced-covariate max gap {max(gaps):.1e}")
        record_criterion("8 reduction identities", ok, "; ".join(details))
        assert ok, details


def _balanced_dataset(rng, cells=12, p=3):
    xs, ys, arms, strata = [], [], [], []
    for k in (1, 2):
        x = rng.standard_normal((cells, p))
        for arm in (1, 0):
            xs.append(x)  # identical covariate block in both arms
            ys.append(rng.standard_normal(cells) + arm)
            arms.append(np.full(cells, arm))
            strata.append(np.full(cells, k))
    return TrialDataset.from_arrays(
        np.concatenate(ys), np.concatenate(arms), np.concatenate(strata), np.vstack(xs)
    )


class TestRandomizationInvariants:
    def test_criterion_9_prefix_balance_and_convergence(self):
        scheme = RandomizationScheme(variant="stratified_block", pi=0.5, block_size=6)
        strata = np.ones(1_000_000, dtype=np.int64)
        a = assign_all(scheme, strata=strata, rng=SEED)
        prefix = np.cumsum(a, dtype=np.int64)
        count = np.arange(1, a.size + 1, dtype=np.int64)
        worst = float(np.max(np.abs(prefix - 0.5 * count)))
        bound_ok = worst <= 6 * 0.5 + 1e-9

        conv_ok = True
        conv_detail = []
        n = 10_000
        rng = np.random.default_rng(3)
        strata4 = rng.integers(1, 5, n)
        for variant in ALL_SCHEMES:
            sch = RandomizationScheme(variant=variant, pi=0.5)
            devs = []
            for seed in range(30):
                assigned = assign_all(
                    sch,
                    strata=strata4,
                    margins=strata4[:, None] if variant == POCOCK_SIMON else None,
                    rng=seed,
                )
                for k in range(1, 5):
                    devs.append(abs(assigned[strata4 == k].mean() - 0.5))
            mean_dev = float(np.mean(devs))
            conv_ok &= mean_dev < 0.02
            conv_detail.append(f"{variant}={mean_dev:.4f}")
        ok = bound_ok and conv_ok
        detail = (
            f"prefix imbalance max {worst:.1f} (bound 3.0) over 1e6 draws; "
            f"mean per-stratum allocation deviation at n=10000: " + ", ".join(conv_detail)
        )
        record_criterion("9 randomization invariants", ok, detail)
        assert ok, detail


class TestDeterminism:
    def test_criterion_10_cli_byte_identical(self, tmp_path):
        args = [
            sys.executable, "-m", "caradjust.cli", "simulate",
            "--model", "1", "--n", "100", "--reps", "12", "--scheme", "sbr",
            "--seed", "41", "--p", "20", "--format", "json",
        ]
        runs = []
        for threads in ("1", "3", "1"):
            proc = subprocess.run(
                [*args, "--threads", threads], capture_output=True, text=True, check=True
            )
            runs.append(proc.stdout)
        ok = runs[0] == runs[1] == runs[2]
        record_criterion(
            "10 determinism across reruns and worker counts", ok,
            f"3 runs, {len(runs[0])} bytes each, identical={ok}",
        )
        assert ok
