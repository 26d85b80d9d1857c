import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from metric_ensemble.types import TripletDistanceTable

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_table(rng, m, m_prime, T, scale=1.0):
    """Table with uniform [0, scale) distances."""
    d_plus = rng.random((m, T)) * scale
    d_minus = rng.random((m, m_prime, T)) * scale
    return TripletDistanceTable(d_plus, d_minus)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion; assert on the outcome."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def report(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
        lines.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
