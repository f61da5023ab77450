import re
import sys

import numpy as np
import pytest

from auxinsnake.model import ModelParams, make_model
from auxinsnake.tissue import build_hex_grid, build_line, build_ring, build_voronoi_disc


@pytest.fixture(scope="session")
def smith():
    return make_model("smith", ModelParams(rho_IAA=0.85, D=1.0))


@pytest.fixture(scope="session")
def chitwood():
    return make_model("chitwood", ModelParams(rho_IAA=1.5, D=1.0, kappa_T=None, c2=0.405))


@pytest.fixture(scope="session")
def line150():
    return build_line(150)


@pytest.fixture(scope="session")
def small_tissues():
    """One tissue of every kind, small enough for dense checks."""
    return {
        "line": build_line(6),
        "ring": build_ring(6),
        "hex": build_hex_grid(4, 4),
        "voronoi": build_voronoi_disc(20, seed=3),
    }


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    verdicts = dict(getattr(mod, "VERDICTS", {}))
    # a test that errors before reaching its verdict still gets a line
    for rep in terminalreporter.stats.get("failed", []) + terminalreporter.stats.get("error", []):
        m = re.search(r"test_acceptance\.py::test_c(\d+)", rep.nodeid)
        if m and int(m.group(1)) not in verdicts:
            verdicts[int(m.group(1))] = f"criterion {int(m.group(1)):2d}: FAIL  raised before a verdict ({rep.head_line})"
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(verdicts):
        terminalreporter.write_line(verdicts[n])
