"""Shared pytest plumbing: the acceptance-criteria summary block."""

from __future__ import annotations

_CRITERIA: dict[int, str] = {}


def record_criterion(n: int, passed: bool, detail: str) -> None:
    """Register one acceptance criterion outcome for the summary block."""
    status = "PASS" if passed else "FAIL"
    _CRITERIA[n] = f"{status} criterion {n:2d}: {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n])
