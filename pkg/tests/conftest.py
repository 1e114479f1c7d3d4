import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from regime_stop import extraction as ex
from regime_stop.model import PAPER_EXAMPLE, ExtractionModel
from regime_stop.regime import x_roots

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def paper_model():
    return PAPER_EXAMPLE


@pytest.fixture(scope="session")
def paper_solution():
    return ex.solve(PAPER_EXAMPLE)


@st.composite
def threshold_models(draw):
    """Random models with finite value and a nonempty stopping region."""
    mu1 = draw(st.floats(-0.1, 0.1))
    mu2 = draw(st.floats(-0.1, 0.1))
    s1 = draw(st.floats(0.1, 0.6))
    s2 = draw(st.floats(0.1, 0.6))
    l1 = draw(st.floats(0.01, 1.0))
    l2 = draw(st.floats(0.01, 1.0))
    r = draw(st.floats(0.02, 0.2))
    C = draw(st.floats(1.0, 50.0))
    K = draw(st.floats(0.0, 10.0))
    m = ExtractionModel(mu1, mu2, s1, s2, l1, l2, r, C, K)
    _, x2 = x_roots(m)
    from hypothesis import assume

    assume(r > x2 + 0.005)
    assume(C > 1.05 * r * K)
    return m


@st.composite
def any_models(draw):
    return ExtractionModel(
        draw(st.floats(-0.2, 0.2)), draw(st.floats(-0.2, 0.2)),
        draw(st.floats(0.05, 1.0)), draw(st.floats(0.05, 1.0)),
        draw(st.floats(0.005, 2.0)), draw(st.floats(0.005, 2.0)),
        draw(st.floats(0.01, 0.3)), draw(st.floats(0.1, 50.0)), draw(st.floats(0.0, 10.0)),
    )


def geometric_grid(lo, hi, n=400):
    return np.geomspace(lo, hi, n)


def sample_threshold_models(n, seed=0):
    """``n`` random Threshold models drawn from the same box as ``threshold_models``."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        m = ExtractionModel(
            rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(0.1, 0.6), rng.uniform(0.1, 0.6),
            float(np.exp(rng.uniform(np.log(0.01), 0.0))), float(np.exp(rng.uniform(np.log(0.01), 0.0))),
            rng.uniform(0.02, 0.2), rng.uniform(1.0, 50.0), rng.uniform(0.0, 10.0),
        )
        if m.r > x_roots(m)[1] + 0.005 and m.C > 1.05 * m.r * m.K:
            out.append(m)
    return out


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
