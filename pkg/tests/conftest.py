import time

import numpy as np
import pytest

from orbit_echo.scenario import desk_scale, table_i
from orbit_echo.simulation import simulate_frame


@pytest.fixture(scope="session")
def full_scenario():
    return table_i()


@pytest.fixture(scope="session")
def desk():
    return desk_scale(table_i())


@pytest.fixture(scope="session")
def desk_frame(desk):
    """Noise-free matched-BF frame at P_sweep = -10 dB."""
    return simulate_frame(desk.with_power(-10.0), "beamform", np.random.default_rng(7), noise=False)


@pytest.fixture
def rng():
    return np.random.default_rng(20260101)


@pytest.fixture(scope="session")
def desk_top_run(desk):
    """50 matched-BF trials at the top sweep point (P_sweep = -10 dB), master seed 0.

    Returns ``(records, seconds)``.
    """
    from orbit_echo.harness import run_point
    t0 = time.perf_counter()
    records = run_point(desk, -10.0, "beamform", 50, seed=0)
    return records, time.perf_counter() - t0


@pytest.fixture(scope="session")
def desk_top_point(desk_top_run):
    return desk_top_run[0]


# Acceptance reporting: tests marked ``criterion(n, title)`` are rolled up into
# one PASS/FAIL line per criterion at the end of the run.
_CRITERIA: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "failed": []})
    if rep.failed or rep.skipped:
        entry["ok"] = False
        entry["failed"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = "PASS" if entry["ok"] else "FAIL"
        line = f"criterion {number}: {status}  {entry['title']}"
        if entry["failed"]:
            line += f"  (failed: {', '.join(entry['failed'])})"
        terminalreporter.write_line(line)
