import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from occufield.field import AnalyticField, ColorFunction, FilmSirenField

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def unit_sphere():
    return AnalyticField.sphere(radius=1.0, sharpness=10.0)


@pytest.fixture
def small_sphere():
    ramp = ColorFunction("ramp", base=(0.55, 0.45, 0.4), gradient=np.diag([1.5, 1.5, -1.0]))
    return AnalyticField.sphere(radius=0.08, sharpness=200.0, color=ramp)


@pytest.fixture
def tiny_net():
    return FilmSirenField.initialize(latent_dim=4, n_layers=2, width=8, seed=3, omega0=3.0, input_scale=4.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)



def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
