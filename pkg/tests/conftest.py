import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mssmpc.mss_model import build_model, linear_model
from mssmpc.setpoint import Polytope

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TOY_A = np.array([[0.5, 0.1], [0.0, 0.6]])
TOY_B = np.array([[1.0], [0.5]])
TOY_C = np.array([1.0, 0.0, 0.0])


@pytest.fixture(scope="session")
def toy():
    """Linear model z+ = A z + B u, y ~ N(z_1, 0.1^2)."""
    return linear_model(TOY_A, TOY_B, TOY_C, sigma=0.1, lag=3)


@pytest.fixture(scope="session")
def small_model():
    return build_model(np.random.default_rng(3), n_z=2, n_g=3, lag=4, enc_hidden=(6,), f_hidden=(5,),
                       head_hidden=(5,))


@pytest.fixture(scope="session")
def u_box():
    return Polytope.box([0.0], [5.0])


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict = {}


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}: {detail}")
