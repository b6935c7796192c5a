import numpy as np
import pytest

from fsqp_mpcc import harness as H
from fsqp_mpcc.config import data_path, load_spec
from fsqp_mpcc.track import Centerline, circle, fit_spline
from fsqp_mpcc.vehicle import VehicleParams

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def params():
    return VehicleParams()


@pytest.fixture(scope="session")
def circle_spline():
    return fit_spline(Centerline(circle(1.0), 0.4))


@pytest.fixture(scope="session")
def setup():
    return H.Setup.from_spec(load_spec(data_path("presets/sm4.yaml")))


@pytest.fixture(scope="session")
def short_run(setup):
    """60 noisy closed-loop steps shared by the quicker tests."""
    run, cands = H.run_closed_loop(setup, steps=60, noise=0.02, seed=11, keep_candidates=True)
    return run, cands


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
