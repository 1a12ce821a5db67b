import re
import numpy as np
import pytest

from scfm.model import build_model
from scfm.rng import substream

ACCEPTANCE_RESULTS: dict[int, tuple[str, str]] = {}


def small_model(seed=0, d_z=1, d_eps=1, K=3, hidden=(16, 16), zero_init=True, mean_skip=True):
    return build_model(d_z, d_eps, K, substream(seed, "test-init"), hidden, (8,), (16,),
                       final_layer_zero_init=zero_init, mean_skip=mean_skip)


@pytest.fixture
def model():
    return small_model(zero_init=False)


@pytest.fixture
def fresh_model():
    return small_model()


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance.py" not in report.nodeid:
        return
    status = "PASS" if report.passed else "FAIL"
    for key, value in report.user_properties:
        if key == "criterion":
            ACCEPTANCE_RESULTS[value[0]] = (status, value[1])
            return
    # the test raised before recording a summary
    m = re.search(r"test_c(\d+)_", report.nodeid)
    if m:
        ACCEPTANCE_RESULTS[int(m.group(1))] = (status, "no summary recorded (error)")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        status, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
