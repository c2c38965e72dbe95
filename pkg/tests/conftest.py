"""Shared fixtures and the acceptance summary printed after the run."""

from __future__ import annotations

import pytest

from purcellkit.photophysics import RateModel

_ACCEPTANCE: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.fixture
def measured(request):
    """Dict a criterion test fills with the values it checked."""
    marker = request.node.get_closest_marker("criterion")
    if marker is None:
        return {}
    n, title = marker.args
    return _ACCEPTANCE.setdefault(n, {"title": title, "values": {}, "outcomes": []})["values"]


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    n, title = marker.args
    entry = _ACCEPTANCE.setdefault(n, {"title": title, "values": {}, "outcomes": []})
    entry["outcomes"].append("xfail" if hasattr(rep, "wasxfail") else rep.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        entry = _ACCEPTANCE[n]
        ok = entry["outcomes"] and all(o == "passed" for o in entry["outcomes"])
        status = "PASS" if ok else "FAIL"
        vals = ", ".join(f"{k}={_fmt(v)}" for k, v in entry["values"].items())
        tr.write_line(f"[{status}] {n:2d}. {entry['title']}" + (f"  ({vals})" if vals else ""))


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.5g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


@pytest.fixture(scope="session")
def nd1_free_space():
    """Planted free-space model of the reference emitter."""
    return RateModel.from_lifetimes(sigma=1000.0, d=10.0, e=19.41, tau1_0=1e3 / 1724.1, tau2_0=150.0, k23_0=24.1)


@pytest.fixture(scope="session")
def nd1_cavity():
    """Same emitter with the radiative rate raised by the cavity."""
    return RateModel(sigma=1000.0, d=10.0, e=19.41, k23_0=24.1, k21=2200.0, k31=1e3 / 150.0)
