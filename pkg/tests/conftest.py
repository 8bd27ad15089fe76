import numpy as np
import pytest

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(number: int, passed, detail: str) -> None:
    """``passed`` is True, False, or None for a skipped criterion."""
    ACCEPTANCE[number] = (passed if passed is None else bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {k:2d}: {status}  {detail}")


def assert_rows_stochastic(p, axis=-1, tol=1e-9):
    p = np.asarray(p)
    assert np.all(p >= -tol) and np.all(p <= 1 + tol)
    np.testing.assert_allclose(p.sum(axis=axis), 1.0, atol=tol)


def assert_monotone(trace, rel=1e-6):
    t = np.asarray(trace, dtype=float)
    if len(t) < 2:
        return
    drops = t[1:] - t[:-1]
    slack = rel * np.maximum(np.abs(t[:-1]), 1.0)
    assert np.all(drops >= -slack), f"objective decreased by {drops.min():.3g}"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
