"""Shared pytest plumbing: the acceptance gate's per-criterion summary lines."""

from __future__ import annotations

import contextlib

ACCEPTANCE_LINES: list[str] = []


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record ``PASS``/``FAIL`` for one acceptance criterion; failures still propagate."""
    details: list[str] = []
    try:
        yield details
    except BaseException as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        ACCEPTANCE_LINES.append(f"criterion {number:2d} FAIL  {title}: {msg}")
        raise
    ACCEPTANCE_LINES.append(f"criterion {number:2d} PASS  {title}" + (f" ({'; '.join(details)})" if details else ""))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
