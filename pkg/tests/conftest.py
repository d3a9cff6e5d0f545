import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> list of (test name, passed, detail)
CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion this test checks")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        if not report.passed and not detail:
            detail = str(report.longrepr).strip().splitlines()[-1][:160]
        CRITERIA.setdefault(marker.args[0], []).append((item.name, report.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        rows = CRITERIA[n]
        status = "PASS" if all(ok for _, ok, _ in rows) else "FAIL"
        details = " | ".join(f"{name}: {d}" if d else name for name, _, d in rows)
        terminalreporter.write_line(f"criterion {n:2d}: {status}  ({details})")
