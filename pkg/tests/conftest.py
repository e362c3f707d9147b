from __future__ import annotations

import time
from pathlib import Path

import pytest

from envsynth.config import PipelineConfig
from envsynth.pipeline import run_pipeline
from envsynth.steps import Workspace

# criterion number -> (title, outcome), filled while test_acceptance runs
ACCEPTANCE: dict[int, tuple[str, str]] = {}


class Desk:
    """One full default-config run shared by every test that needs real artifacts."""

    def __init__(self, root: Path, seconds: float, config: PipelineConfig) -> None:
        self.root = root
        self.seconds = seconds
        self.config = config
        self.ws = Workspace(root, config.simulation_time)


@pytest.fixture(scope="session")
def desk(tmp_path_factory: pytest.TempPathFactory) -> Desk:
    root = tmp_path_factory.mktemp("desk")
    cfg = PipelineConfig()
    t0 = time.perf_counter()
    run_pipeline(cfg, root)
    return Desk(root, time.perf_counter() - t0, cfg)


def pytest_runtest_logreport(report: pytest.TestReport) -> None:
    if "test_acceptance.py" not in report.nodeid:
        return
    fn = getattr(report, "criterion", None)
    if fn is None:
        return
    num, title = fn
    if report.when == "call" or report.outcome != "passed":
        ACCEPTANCE[num] = (title, "PASS" if report.passed else "FAIL")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item: pytest.Item, call: pytest.CallInfo):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = marker.args


def pytest_configure(config: pytest.Config) -> None:
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


def pytest_terminal_summary(terminalreporter) -> None:
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        title, outcome = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:>2}: {outcome}  {title}")
