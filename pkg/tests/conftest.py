import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from disrank import numerics as nx

sys.path.insert(0, str(Path(__file__).parent))

nx.tune_allocator()
settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance summary --------------------------------------------------------

_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    number, title = props["criterion"]
    status = "PASS" if report.passed else "FAIL"
    _criteria[number] = (title, status, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status, detail = _criteria[number]
        terminalreporter.write_line(f"[{status}] {number}. {title}" + (f" :: {detail}" if detail else ""))
