import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def blobs():
    from trustdd.data import make_blobs

    return make_blobs(classes=2, count=64, size=8, seed=0)


@pytest.fixture(scope="session")
def micro_spec():
    from trustdd.networks import NetworkSpec

    return NetworkSpec(num_classes=2, input_shape=(1, 4, 4), depth=1, width=2)


_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        passed = rep.outcome == "passed" and _CRITERIA.get(n, True)
        _CRITERIA[n] = passed


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if _CRITERIA[n] else 'FAIL'}")
