import numpy as np
import pytest
from hypothesis import settings

from equiada.backbone import DenoiserConfig, DenoiserModel
from equiada.geometry import GeometricTrajectory, fully_connected_edges

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def random_traj(rng, n=4, t=3, h=2, edges=None):
    e = fully_connected_edges(n) if edges is None else edges
    return GeometricTrajectory(rng.standard_normal((n, h)), rng.standard_normal((n, t, 3)), e)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    return DenoiserConfig(in_dim=2, hidden=8, n_layers=2, time_dim=8, attn_dim=4, frame_pe_dim=4, max_tau=10)


@pytest.fixture
def small_model(small_config):
    return DenoiserModel(small_config, seed=3)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
