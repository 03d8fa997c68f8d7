from __future__ import annotations

from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

import re

_VERDICTS: dict[int, str] = {}


def pytest_runtest_logreport(report):
    """Collect one PASS/FAIL line per acceptance criterion."""
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", report.nodeid)
    if not m or (report.when != "call" and report.outcome == "passed"):
        return
    n = int(m.group(1))
    detail = dict(report.user_properties).get("detail", "")
    verdict = "PASS" if report.outcome == "passed" else "FAIL"
    if report.when != "call":
        detail = detail or f"{report.when} {report.outcome}"
    _VERDICTS[n] = f"{verdict} criterion {n:2d}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
