"""Shared fixtures plus the one-line-per-criterion acceptance summary."""
from __future__ import annotations

import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_RESULTS = {}


@pytest.fixture
def criterion(request):
    """Record ``(number, title)`` of an acceptance test; its final outcome and
    wall time are printed in the terminal summary."""
    start = time.perf_counter()

    def declare(number, title):
        _RESULTS[request.node.nodeid] = dict(number=number, title=title, seconds=0.0)

    yield declare
    entry = _RESULTS.get(request.node.nodeid)
    if entry is not None:
        entry["seconds"] = time.perf_counter() - start


def pytest_runtest_logreport(report):
    entry = _RESULTS.get(report.nodeid)
    if entry is None:
        return
    if report.when == "call":
        entry["outcome"] = "skipped" if report.skipped else ("PASS" if report.passed else "FAIL")
        entry["detail"] = "".join(s for name, s in report.sections if "stdout" in name).strip()
    elif report.skipped and "outcome" not in entry:
        entry["outcome"] = "skipped"


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for entry in sorted(_RESULTS.values(), key=lambda e: e["number"]):
        tr.write_line(f"criterion {entry['number']}: {entry.get('outcome', 'NOT RUN'):>7}  "
                      f"{entry['title']} ({entry['seconds']:.1f}s)")
        for line in entry.get("detail", "").splitlines():
            tr.write_line(f"    {line}")


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(12345)
