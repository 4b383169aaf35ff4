import re

import pytest

_criteria: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_c(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    n, title = int(m.group(1)), m.group(2).replace("_", " ")
    if report.when == "call" or (report.when == "setup" and report.failed):
        _criteria[n] = (title, "PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, verdict = _criteria[n]
        terminalreporter.write_line(f"criterion {n:2d} [{verdict}] {title}")


@pytest.fixture
def rng():
    import numpy as np
    return np.random.default_rng(12345)
