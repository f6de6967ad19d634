import numpy as np
import pytest

from openloop_lq.problem_model import Modulation, make_spec


def benchmark(steps=200, **kw):
    """Scalar problem min E[int u^2 dt + x(1)^2], dx = u dt, x0 = 1."""
    return make_spec(0, 1, 0, 0, 0, 1, 1, 1, T=1.0, steps=steps, **kw)


def random_a(steps=8):
    """Scalar problem with drift 0.2 + 0.5 tanh(w)."""
    return make_spec(0.2, 1, 0.3, 0.2, 1, 1, 1, 1, T=1.0, steps=steps,
                     modulations={"A": Modulation("tanh", 0.5, 1.0)})


def unsolvable(steps=8):
    return make_spec(0.1, 1, 0.2, 0, 1, 0, 1, 1, T=1.0, steps=steps)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
