import numpy as np
import pytest

from ssm3dcd import tensor as T

WIDE = np.longdouble


def leaf(rng, shape, dtype=WIDE, scale=1.0):
    return T.Parameter((rng.normal(size=shape) * scale).astype(dtype))


def probe_loss(out, seed=123):
    """Weighted sum with fixed random weights, so no gradient cancels by symmetry."""
    w = np.random.default_rng(seed).normal(size=out.shape).astype(out.dtype)
    return T.tsum(out * w)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion and assert it."""

    def record(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        request.config._acceptance_lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
