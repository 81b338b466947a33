import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# label -> (title, verdict, reason), filled as acceptance tests finish
_ACCEPTANCE: dict[str, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        reason = ""
        if report.failed:
            crash = getattr(report.longrepr, "reprcrash", None)
            text = crash.message if crash is not None else str(report.longrepr)
            reason = text.strip().splitlines()[0] if text.strip() else ""
        verdict = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
        _ACCEPTANCE[marker.kwargs["label"]] = (marker.kwargs["title"], verdict, reason)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_ACCEPTANCE):
        title, verdict, reason = _ACCEPTANCE[label]
        line = f"{verdict} [{label}] {title}"
        terminalreporter.write_line(line + (f" -- {reason}" if reason else ""))
