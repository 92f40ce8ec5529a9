import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from qmetasurf import lattice

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

S2 = 1 / np.sqrt(2)


@pytest.fixture(scope="session")
def spec03():
    return lattice.GeometrySpec(d_over_lambda0=0.3)


def pair_closed_form(x, parallel_to_axis=False):
    """``(J12, Gamma12)`` in units of Gamma0 for two identical dipoles at ``k0 r = x``.

    ``parallel_to_axis`` selects dipoles along the separation; otherwise the
    dipoles are perpendicular to it.
    """
    s, c = np.sin(x), np.cos(x)
    if parallel_to_axis:
        gam = 3 * (s / x**3 - c / x**2)
        j = -1.5 * (c / x**3 + s / x**2)
    else:
        gam = 1.5 * (s / x + c / x**2 - s / x**3)
        j = -0.75 * (c / x - c / x**3 - s / x**2)
    return j, gam


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record and print one pass/fail line per acceptance criterion."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def report(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        lines.append(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
