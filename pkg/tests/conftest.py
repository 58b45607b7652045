import os

import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_campaign():
    from pestsim.dropsim import CampaignConfig, simulate_campaign

    mix = {"NormalSingle": 0.6, "SpanTwoCycles": 0.1, "DebrisNoPest": 0.1, "FluctuationNoPest": 0.1,
           "ConsecutiveDouble": 0.1}
    return simulate_campaign(CampaignConfig(n_events=150, scenario_mix=mix, n_devices=2, seed=21))


@pytest.fixture
def workdir(tmp_path):
    old = os.getcwd()
    os.chdir(tmp_path)
    yield tmp_path
    os.chdir(old)


# one summary line per acceptance criterion, in criterion order
_criteria: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        num = int(name.split("_")[2])
        _criteria[num] = ("PASS" if report.passed else "FAIL", name)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        status, name = _criteria[num]
        terminalreporter.write_line(f"criterion {num:2d}: {status}  {name}")
