import math
from pathlib import Path

import pytest

from qlink import config_path
from qlink.config import load_config

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(criterion: str, ok: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def calibrated_config():
    return load_config(config_path("fig5_calibrated"))


@pytest.fixture
def configs_dir() -> Path:
    return Path(str(config_path("fig5"))).parent


def approx_rel(a, b, rel):
    return math.isclose(a, b, rel_tol=rel)


@pytest.fixture(scope="session")
def calibrate_run(tmp_path_factory):
    """One `qlink calibrate` run on the uncalibrated fig5 config, shared by tests."""
    import time

    from qlink.cli import main

    out = tmp_path_factory.mktemp("calibrate")
    t0 = time.perf_counter()
    code = main(["calibrate", "--config", str(config_path("fig5")), "--out", str(out)])
    return out, code, time.perf_counter() - t0
