import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    # the call phase decides, unless setup already failed or skipped
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    runs = item.config._criteria.setdefault(number, [title, []])[1]
    # an xfail counts against the criterion: the shortfall is documented, not met
    note = getattr(report, "wasxfail", "")
    runs.append((item.name, report.passed and not note, note))

def pytest_terminal_summary(terminalreporter, exitstatus, config):
    criteria = getattr(config, "_criteria", {})
    if not criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(criteria):
        title, runs = criteria[number]
        ok = bool(runs) and all(p for _, p, _ in runs)
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}")
        if not ok:
            for name, p, note in runs:
                if not p:
                    why = f" (known: {note})" if note else ""
                    terminalreporter.write_line(f"              failing: {name}{why}")
