"""Collects acceptance verdicts and prints one line per criterion after the run."""

import pytest


def pytest_configure(config):
    config._acceptance = {}


@pytest.fixture
def verdict(request):
    """Record ``(criterion, part, passed, detail)``; the summary joins parts per criterion."""
    store = request.config._acceptance

    def record(criterion: int, part: str, passed: bool, detail: str):
        store.setdefault(criterion, []).append((part, bool(passed), detail))
        print(f"criterion {criterion} [{part}]: {'PASS' if passed else 'FAIL'} {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = getattr(config, "_acceptance", {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(store):
        parts = store[criterion]
        ok = all(p[1] for p in parts)
        detail = "; ".join(f"{name}: {'ok' if good else 'FAILED'} ({d})" for name, good, d in parts)
        terminalreporter.write_line(f"CRITERION {criterion}: {'PASS' if ok else 'FAIL'} - {detail}")
