import os
import time

import hypothesis
import numpy as np
import pytest

from orbiflow import scenarios
from orbiflow.graph import build_graph, xi_recurrent_split

hypothesis.settings.register_profile("default", max_examples=40, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=8, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

np.seterr(all="warn", under="ignore")

_GRAPHS = {}
TIMINGS = {}  # cache key -> seconds spent building it


def scenario_graph(name: str, resolution: int | None = None, **kw):
    """Build (once per session) the transition graph and split of a builtin scenario."""
    sc = scenarios.builtin(name)
    res = resolution or sc.params.resolution
    key = (name, res, tuple(sorted(kw.items())))
    if key not in _GRAPHS:
        p = sc.params
        args = dict(T_edge=p.T_edge, samples=p.samples, step=p.step)
        args.update(kw)
        t0 = time.perf_counter()
        g = build_graph(sc.field, sc.cls, res, **args)
        _GRAPHS[key] = (sc, g, xi_recurrent_split(g))
        TIMINGS[("graph",) + key] = time.perf_counter() - t0
    return _GRAPHS[key]


@pytest.fixture(scope="session")
def graphs():
    return scenario_graph

_CERTS = {}


def scenario_certificate(name: str, resolution: int | None = None, **kw):
    """Lyapunov construction (or the refusal) for a builtin scenario, built once per session."""
    from orbiflow.lyapunov import ConstructionRefused, construct_lyapunov_form

    key = (name, resolution, tuple(sorted(kw.items())))
    if key not in _CERTS:
        sc, g, rep = scenario_graph(name, resolution)
        t0 = time.perf_counter()
        try:
            _CERTS[key] = construct_lyapunov_form(g, rep, **kw)
        except ConstructionRefused as err:
            _CERTS[key] = err
        TIMINGS[("certificate",) + key] = time.perf_counter() - t0
    return _CERTS[key]


@pytest.fixture(scope="session")
def certificates():
    return scenario_certificate


def graph_seconds(name: str, resolution: int | None = None) -> float:
    """Wall time of the cached build and split (0 if another session built it)."""
    res = resolution or scenarios.builtin(name).params.resolution
    return TIMINGS.get(("graph", name, res, ()), 0.0)


def certificate_seconds(name: str, resolution: int | None = None) -> float:
    return TIMINGS.get(("certificate", name, resolution, ()), 0.0)


# ---------------------------------------------------------------- acceptance bookkeeping

OUTCOMES = {}  # nodeid -> "passed" | "failed" | "skipped" for every test outside the acceptance module
ACCEPTANCE = {}  # criterion number -> summary line


def _is_acceptance(nodeid: str) -> bool:
    return "test_acceptance.py" in nodeid


def pytest_collection_modifyitems(session, config, items):
    # acceptance runs last so the invariant-suite criterion can read the other outcomes
    items.sort(key=lambda item: _is_acceptance(item.nodeid))


def pytest_runtest_logreport(report):
    if _is_acceptance(report.nodeid):
        return
    if report.when == "call" or report.outcome != "passed":
        prev = OUTCOMES.get(report.nodeid)
        if prev != "failed":
            OUTCOMES[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
