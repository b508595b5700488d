import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from deqreg.data import gen_dataset
from deqreg.deq import SolverConfig
from deqreg.training import TrainConfig, train_loop

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


class Toy:
    """A small adversarially trained model with its data and budget."""

    def __init__(self, framework="pgd_at", seed=0, epochs=8):
        self.dataset = gen_dataset("two_moons", 400, 0.05, seed=seed, dim=4)
        self.eps = 0.5 * self.dataset.margin
        self.solver_cfg = SolverConfig(N=8)
        self.train_cfg = TrainConfig(framework=framework, epochs=epochs, batch_size=64, lr0=1e-2,
                                     eps=self.eps, alpha=self.eps / 4, seed=seed)
        self.result = train_loop(self.dataset, self.train_cfg, self.solver_cfg)
        self.model = self.result.model
        self.X, self.y = self.dataset.split("test")
        self.domain = self.dataset.domain


@pytest.fixture(scope="session")
def toy():
    return Toy()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance bookkeeping ------------------------------------------------

SESSION = {"start": None, "outcomes": {}, "criteria": []}


def pytest_sessionstart(session):
    SESSION["start"] = time.perf_counter()


def pytest_collection_modifyitems(config, items):
    # checks over the whole session go last so every other outcome is known
    items.sort(key=lambda item: item.get_closest_marker("session_end") is not None)


def pytest_configure(config):
    config.addinivalue_line("markers", "session_end: run after every other collected test")


def pytest_runtest_logreport(report):
    prev = SESSION["outcomes"].get(report.nodeid, "passed")
    if report.failed:
        SESSION["outcomes"][report.nodeid] = "failed"
    elif report.when == "call" or report.skipped:
        SESSION["outcomes"][report.nodeid] = report.outcome if prev == "passed" else prev


def record_criterion(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    SESSION["criteria"].append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not SESSION["criteria"]:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(SESSION["criteria"]):
        terminalreporter.write_line(line)


@pytest.fixture
def session_state():
    return SESSION


@pytest.fixture
def criterion():
    return record_criterion
