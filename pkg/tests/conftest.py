import numpy as np
import pytest

from dln_lab.costs import MSECost


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_mse():
    """Two-sample MSE with grad C(0) = -diag(2, 1): s1 = 2, spectral gap 1."""
    return MSECost(np.eye(2), np.diag([2.0, 1.0]))


@pytest.fixture
def acceptance_report(capsys):
    """Print one pass/fail line per acceptance criterion, then assert it."""
    def report(label, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
        assert ok, f"{label}: {detail}"
    return report
