import numpy as np
import pytest

from ddq.data import synthetic_blobs

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str):
    """Store the outcome of an acceptance criterion for the end-of-run summary."""
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


def central_diff(f, x: np.ndarray, direction: np.ndarray, h: float = 1e-6) -> float:
    return (f(x + h * direction) - f(x - h * direction)) / (2 * h)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


@pytest.fixture(scope="session")
def tiny_data():
    return synthetic_blobs(n_train=200, n_test=100, size=8, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
