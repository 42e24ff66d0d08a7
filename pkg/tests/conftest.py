import sys

import numpy as np
import pytest

from adi.config import ExperimentConfig
from adi.datapool import synth_pool
from adi import experiment


@pytest.fixture(scope="session")
def small_pool():
    return synth_pool(3, 4, 5, 20, 4.0, seed=3)


@pytest.fixture(scope="session")
def shipped():
    """The shipped 7x10 experiment at seed 7: world, model, attack result."""
    cfg = ExperimentConfig()
    world = experiment.build_world(cfg.datapool)
    model = experiment.build_model(cfg.oracle, world.target)
    result = experiment.attack(world, model, cfg.attack)
    return cfg, world, model, result


@pytest.fixture
def rng():
    return np.random.default_rng(0)



def pytest_terminal_summary(terminalreporter):
    lines = [line for name, mod in list(sys.modules.items())
             if name.rpartition(".")[2] == "test_acceptance" for line in getattr(mod, "LINES", [])]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
