"""Shared fixtures: the synthetic market, its calibration and the LV surface."""

from __future__ import annotations

import pytest
from hypothesis import HealthCheck, settings

from hjmlv.curve import TimeGrid, discounts_from_forwards, flat_curve
from hjmlv.localvol import build_local_vol_surface
from hjmlv.market import fixture_curve, fixture_surface
from hjmlv.smallvol import calibrate_surface
from hjmlv.smile import build_variance_grid, fit_smile_table

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def grid():
    return TimeGrid(0.25, 200)


@pytest.fixture(scope="session")
def fwd(grid):
    return fixture_curve(grid)


@pytest.fixture(scope="session")
def disc(fwd, grid):
    return discounts_from_forwards(fwd, grid)


@pytest.fixture(scope="session")
def flat_disc(grid):
    return discounts_from_forwards(flat_curve(0.03, grid), grid)


@pytest.fixture(scope="session")
def surface():
    return fixture_surface(0)


@pytest.fixture(scope="session")
def grids(surface, disc, grid):
    return calibrate_surface(surface, disc, grid)


@pytest.fixture(scope="session")
def extended(grids):
    return {x: g.extended() for x, g in grids.items()}


@pytest.fixture(scope="session")
def vgrid(extended):
    return build_variance_grid(extended)


@pytest.fixture(scope="session")
def table(vgrid):
    return fit_smile_table(vgrid)


@pytest.fixture(scope="session")
def lv(table, extended):
    return build_local_vol_surface(table, extended)


# ---------------------------------------------------------------- criterion summary

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, name): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    n, name = mark.args
    _, ok, details = _CRITERIA.get(n, (name, True, []))
    details += [str(v) for k, v in item.user_properties if k == "measured"]
    _CRITERIA[n] = (name, ok and rep.passed, details)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        name, ok, detail = _CRITERIA[n]
        line = f"criterion {n} {name}: {'PASS' if ok else 'FAIL'}"
        terminalreporter.write_line(f"{line} ({'; '.join(detail)})" if detail else line)
