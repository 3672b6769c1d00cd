import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sharpopt.models import Batch, MlpSpec
from sharpopt.rng import Rng

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def golden_case():
    """The fixed seed-11 MLP and batch behind ``golden/mlp_seed11.json``."""
    spec = MlpSpec((3, 8, 3), "tanh")
    rng = Rng(11)
    w = spec.init_params(rng.spawn(0))
    data = rng.spawn(1)
    x = data.normal(6 * 3).reshape(6, 3)
    y = data.integers(0, 3, 6)
    return spec, w, Batch(x, y)


@pytest.fixture
def out_root(tmp_path, monkeypatch):
    monkeypatch.setenv("SHARPOPT_OUT", str(tmp_path / "runs"))
    return tmp_path / "runs"


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
