import csv
import io
import json

import numpy as np
import pytest

from caradjust.cli import main
from reference import enumerate_expansion_terms


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture
def covariate_csv(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "cov.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "age", "score", "sex", "site"])
        for i in range(40):
            writer.writerow(
                [f"u{i}", 20 + int(rng.integers(0, 40)), round(float(rng.random()), 3),
                 int(rng.integers(0, 2)), rng.choice(["a", "b"])]
            )
    return path


@pytest.fixture
def trial_csv(tmp_path):
    rng = np.random.default_rng(1)
    n = 120
    x = rng.standard_normal((n, 3))
    strata = rng.integers(1, 3, n)
    a = np.tile([1, 0], n // 2)
    y = 3.0 * x[:, 0] + a * 1.5 + strata + rng.standard_normal(n)
    path = tmp_path / "trial.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["outcome", "assignment", "stratum", "x1", "x2", "x3"])
        for i in range(n):
            writer.writerow([repr(float(y[i])), int(a[i]), int(strata[i]),
                             repr(float(x[i, 0])), repr(float(x[i, 1])), repr(float(x[i, 2]))])
    return path


class TestSimulateCommand:
    def test_identical_output_for_same_seed(self, capsys):
        args = ["simulate", "--model", "1", "--n", "60", "--reps", "3", "--scheme", "sr",
                "--seed", "7", "--p", "8", "--lambda-mode", "rate", "--format", "csv"]
        code1, out1, _ = run_cli(capsys, *args)
        code2, out2, _ = run_cli(capsys, *args)
        assert code1 == code2 == 0
        assert out1 == out2

    def test_threads_flag_does_not_change_bytes(self, capsys):
        base = ["simulate", "--model", "1", "--n", "60", "--reps", "4", "--seed", "5",
                "--p", "8", "--lambda-mode", "rate", "--format", "json"]
        _, out1, _ = run_cli(capsys, *base, "--threads", "1")
        _, out4, _ = run_cli(capsys, *base, "--threads", "4")
        assert out1 == out4

    def test_invalid_block_size_exits_2(self, capsys):
        code, _, err = run_cli(
            capsys, "simulate", "--scheme", "sbr", "--block-size", "5",
            "--pi", "0.5", "--reps", "1", "--seed", "1",
        )
        assert code == 2
        assert "integer" in err

    def test_unknown_estimator_exits_2(self, capsys):
        code, _, err = run_cli(
            capsys, "simulate", "--estimators", "banana", "--reps", "1", "--seed", "1"
        )
        assert code == 2 and "banana" in err

    def test_multi_model_emits_row_per_estimator(self, capsys):
        code, out, _ = run_cli(
            capsys, "simulate", "--model", "1,3", "--n", "80", "--reps", "2",
            "--seed", "3", "--p", "8", "--lambda-mode", "rate", "--format", "csv",
            "--estimators", "dim,ols_common",
        )
        assert code == 0
        rows = out.strip().splitlines()
        assert len(rows) == 1 + 2 * 2  # header + 2 models x 2 estimators

    def test_full_table_shape_has_fifteen_rows(self, capsys):
        code, out, _ = run_cli(
            capsys, "simulate", "--model", "1,2,3", "--n", "120", "--reps", "2",
            "--seed", "5", "--p", "10", "--lambda-mode", "rate", "--format", "csv",
        )
        assert code == 0
        rows = out.strip().splitlines()
        assert len(rows) == 1 + 3 * 5  # header + 3 models x 5 estimators
        assert rows[0].startswith("Model,Estimator,Bias,SD,SE-unadj,SE-adj,CP-unadj,CP-adj")

    def test_config_file_overlaid_by_flags(self, capsys, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# comment\nmodel = 1\nn = 60\nreps = 2\nseed = 11\np = 8\nlambda_mode = rate\nformat = csv\n")
        code, out_file, _ = run_cli(capsys, "simulate", "--config", str(cfg))
        code2, out_flag, _ = run_cli(capsys, "simulate", "--config", str(cfg), "--reps", "3")
        assert code == code2 == 0
        assert out_file != out_flag  # the flag must win over the file

    def test_unknown_config_key_exits_2(self, capsys, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("bogus = 1\n")
        code, _, err = run_cli(capsys, "simulate", "--config", str(cfg))
        assert code == 2 and "bogus" in err

    def test_missing_seed_is_drawn_and_echoed(self, capsys):
        code, _, err = run_cli(
            capsys, "simulate", "--reps", "1", "--n", "60", "--p", "8",
            "--lambda-mode", "rate", "--estimators", "dim",
        )
        assert code == 0
        assert "seed=" in err


class TestAnalyzeCommand:
    def test_plain_difference_in_means(self, capsys, trial_csv):
        code, out, _ = run_cli(
            capsys, "analyze", "--data", str(trial_csv), "--estimator", "dim",
            "--covariates", "",
        )
        assert code == 0
        assert "estimate" in out and "ci (unadjusted)" in out

    def test_json_output_with_variance_reduction(self, capsys, trial_csv):
        code, out, _ = run_cli(
            capsys, "analyze", "--data", str(trial_csv), "--estimator", "lasso_common",
            "--seed", "3", "--json",
        )
        assert code == 0
        payload = json.loads(out)
        assert payload["schema_version"] == "1"
        # x1 carries strong signal: adjustment must help on this data
        assert payload["variance_reduction"] > 0.0
        assert payload["se_adj"] >= 0.0

    def test_ols_uses_all_other_columns_by_default(self, capsys, trial_csv):
        code, out, _ = run_cli(
            capsys, "analyze", "--data", str(trial_csv), "--estimator", "ols_common", "--json"
        )
        assert code == 0
        assert json.loads(out)["p"] == 3

    def test_estimator_failure_exits_3(self, capsys, tmp_path):
        path = tmp_path / "tiny.csv"
        path.write_text(
            "outcome,assignment,stratum,x1\n1,1,1,0.5\n2,0,1,0.1\n3,1,2,0.2\n4,0,2,0.9\n"
        )
        code, _, err = run_cli(
            capsys, "analyze", "--data", str(path), "--estimator", "ols_specific",
            "--small-stratum", "error",
        )
        assert code == 3
        assert "stratum" in err.lower()

    def test_missing_file_exits_2_with_path(self, capsys):
        code, _, err = run_cli(capsys, "analyze", "--data", "/nope/missing.csv")
        assert code == 2
        assert "missing.csv" in err

    def test_negative_effect_structure(self, capsys, tmp_path):
        # harmful-treatment synthetic export: the point estimate and the
        # whole interval sit below zero, and adjustment reduces variance
        rng = np.random.default_rng(9)
        n = 240
        x = rng.standard_normal((n, 4))
        strata = rng.integers(1, 3, n)
        a = np.tile([1, 0], n // 2)
        y = -5.0 * a + 4.0 * x[:, 0] + strata + rng.standard_normal(n)
        path = tmp_path / "neg.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["outcome", "assignment", "stratum", "a", "b", "c", "d"])
            for i in range(n):
                writer.writerow([repr(float(y[i])), int(a[i]), int(strata[i]),
                                 *[repr(float(v)) for v in x[i]]])
        code, out, _ = run_cli(
            capsys, "analyze", "--data", str(path), "--estimator", "lasso_common",
            "--seed", "2", "--json",
        )
        assert code == 0
        payload = json.loads(out)
        assert payload["estimate"] < 0
        assert payload["ci_adj"][1] < 0
        assert payload["variance_reduction"] > 0.10


class TestRandomizeCommand:
    def test_row_count_preserved_and_deterministic(self, capsys, covariate_csv):
        args = ["randomize", "--data", str(covariate_csv), "--scheme", "ps",
                "--margins", "sex,site", "--pbc", "0.75", "--pi", "0.5", "--seed", "2"]
        code, out1, _ = run_cli(capsys, *args)
        _, out2, _ = run_cli(capsys, *args)
        assert code == 0
        assert out1 == out2
        rows = list(csv.reader(io.StringIO(out1)))
        assert rows[0][-1] == "assignment"
        assert len(rows) == 41
        assert all(r[-1] in ("0", "1") for r in rows[1:])

    def test_block_scheme_balances_within_stratum(self, capsys, covariate_csv):
        code, out, _ = run_cli(
            capsys, "randomize", "--data", str(covariate_csv), "--scheme", "sbr",
            "--stratum", "site", "--block-size", "2", "--seed", "4",
        )
        assert code == 0
        rows = list(csv.reader(io.StringIO(out)))[1:]
        by_site = {}
        for row in rows:
            by_site.setdefault(row[4], []).append(int(row[5]))
        for site, arms in by_site.items():
            assert abs(sum(arms) - len(arms) / 2) <= 1

    def test_stratified_scheme_without_stratum_exits_2(self, capsys, covariate_csv):
        code, _, err = run_cli(
            capsys, "randomize", "--data", str(covariate_csv), "--scheme", "sbr"
        )
        assert code == 2 and "stratum" in err


class TestExpandCommand:
    def test_column_count_matches_enumeration(self, capsys, covariate_csv):
        code, out, _ = run_cli(
            capsys, "expand", "--data", str(covariate_csv),
            "--continuous", "age,score", "--binary", "sex",
        )
        assert code == 0
        header = next(csv.reader(io.StringIO(out)))
        expected_terms = enumerate_expansion_terms(2, 1, cross=True)
        assert len(header) == 2 + expected_terms  # id & site pass through

    def test_missing_input_file_exits_2(self, capsys):
        code, _, err = run_cli(capsys, "expand", "--data", "/nope/xyz.csv", "--continuous", "a")
        assert code == 2 and "xyz.csv" in err

    def test_non_numeric_declared_column_exits_2(self, capsys, covariate_csv):
        code, _, err = run_cli(
            capsys, "expand", "--data", str(covariate_csv), "--continuous", "site"
        )
        assert code == 2
