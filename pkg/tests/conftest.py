import re

import pytest

_acceptance = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    m = re.search(r"test_criterion_(\d+)", report.nodeid)
    if not m:
        return
    key = int(m.group(1))
    if report.when == "call" or report.outcome != "passed":
        prev = _acceptance.get(key, "PASS")
        _acceptance[key] = "FAIL" if report.outcome == "failed" or prev == "FAIL" else (
            "SKIP" if report.outcome == "skipped" else prev
        )


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_acceptance):
        terminalreporter.write_line(f"criterion {key}: {_acceptance[key]}")


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(1234)
