import numpy as np
import pytest

from caradjust import TrialDataset

CRITERION_RESULTS: list[tuple[str, bool, str]] = []


def record_criterion(name: str, passed: bool, detail: str) -> None:
    """Collect acceptance-gate outcomes; printed in the terminal summary."""
    CRITERION_RESULTS.append((name, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not CRITERION_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in CRITERION_RESULTS:
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {name}: {detail}")


@pytest.fixture
def toy_dataset():
    """Two strata, both arms occupied, one covariate."""
    return TrialDataset.from_arrays(
        y=[3.0, 5.0, 1.0, 2.0, 4.0, 6.0, 2.0, 3.0],
        assignment=[1, 1, 0, 0, 1, 1, 0, 0],
        strata=["a", "a", "a", "a", "b", "b", "b", "b"],
        x=[[1.0], [2.0], [0.0], [1.0], [3.0], [1.0], [2.0], [0.0]],
    )


def random_dataset(rng, n=60, p=3, strata=2, signal=1.0):
    """Balanced-ish random dataset with every stratum-arm occupied."""
    while True:
        labels = rng.integers(1, strata + 1, n)
        a = rng.integers(0, 2, n)
        ok = all(
            ((labels == k) & (a == arm)).sum() >= 2
            for k in range(1, strata + 1)
            for arm in (0, 1)
        )
        if ok:
            break
    x = rng.standard_normal((n, p))
    beta = signal * rng.standard_normal(p)
    y = x @ beta + rng.standard_normal(n) + 0.5 * a
    return TrialDataset.from_arrays(y, a, labels, x)
