import numpy as np
import pytest
from hypothesis import settings

from dmpc.grid import GridOCP, ScenarioConfig, generate_network

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def make_ocp(case=1, grid_side=2, horizon=10, mode="linear", seed=0, zero_loads=True):
    cfg = ScenarioConfig(case=case, grid_side=grid_side, horizon=horizon, dynamics=mode, seed=seed)
    model, state = generate_network(cfg)
    if zero_loads:
        state.w[:] = 0.0
    ocp = GridOCP(model, horizon, cfg.delta_s, mode)
    return ocp, state


@pytest.fixture
def rng():
    return np.random.default_rng(7)


CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
