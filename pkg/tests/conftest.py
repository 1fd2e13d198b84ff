import time

import numpy as np
import pytest

from intravol.features import FeatureMatrix

_ACCEPTANCE_LINES = []


def make_matrix(X, y, tickers=None, columns=None, start="2020-01-06T16:00"):
    """Minimal valid FeatureMatrix around raw arrays, for model-level tests."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = X.shape[0]
    if tickers is None:
        tickers = np.full(n, "TST")
    if columns is None:
        columns = tuple(f"f{i}" for i in range(X.shape[1]))
    times = np.datetime64(start, "m") + np.arange(n).astype("timedelta64[m]")
    return FeatureMatrix(
        columns=tuple(columns), X=X, y=y, tickers=np.asarray(tickers),
        times=times, target_starts=times,
        source_ends=times - np.timedelta64(1, "m"),
    )


def finite_difference_max_error(loss_fn, params, analytic, step=1e-4):
    """Max relative error between central differences and analytic grads."""
    worst = 0.0
    for p, g in zip(params, analytic):
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            old = p[ix]
            p[ix] = old + step
            up = loss_fn()
            p[ix] = old - step
            dn = loss_fn()
            p[ix] = old
            fd = (up - dn) / (2.0 * step)
            denom = max(abs(fd), abs(g[ix]), 1e-6)
            worst = max(worst, abs(fd - g[ix]) / denom)
    return worst


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion for the summary."""
    def run(number, name, body):
        t0 = time.perf_counter()
        try:
            body()
        except BaseException:
            _ACCEPTANCE_LINES.append(
                f"criterion {number:>2}: {name}: FAIL ({time.perf_counter() - t0:.1f}s)")
            raise
        _ACCEPTANCE_LINES.append(
            f"criterion {number:>2}: {name}: PASS ({time.perf_counter() - t0:.1f}s)")
    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
