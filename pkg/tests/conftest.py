import time

import pytest

from opbridge.experiments import get_preset
from opbridge.trainer import train

# criterion number -> "PASS ..." / "FAIL ..." line, filled by test_acceptance.py
ACCEPTANCE: dict = {}


class TrainedRun:
    def __init__(self, preset, result, seconds, out_dir):
        self.preset = preset
        self.result = result
        self.params = result.params
        self.seconds = seconds
        self.out_dir = out_dir


def _train_preset(name, tmp_path_factory):
    pr = get_preset(name)
    out = tmp_path_factory.mktemp(name)
    t0 = time.perf_counter()
    res = train(pr.spec(), pr.sampler(), pr.train, pr.arch(), out_dir=out)
    return TrainedRun(pr, res, time.perf_counter() - t0, out)


@pytest.fixture(scope="session")
def quadratic_run(tmp_path_factory):
    """The quadratic preset trained once per session (2k iterations, B=16, grid 8)."""
    return _train_preset("quadratic", tmp_path_factory)


@pytest.fixture(scope="session")
def ellipse_run(tmp_path_factory):
    return _train_preset("ellipse", tmp_path_factory)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE, key=lambda k: (isinstance(k, str), str(k).zfill(3))):
        terminalreporter.write_line(ACCEPTANCE[k])
