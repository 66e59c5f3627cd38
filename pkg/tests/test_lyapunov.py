import json
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from orbiflow import scenarios
from orbiflow.boxes import BoxCover
from orbiflow.expr import SinX
from orbiflow.flow import integrate_many
from orbiflow.forms import BasicOneForm
from orbiflow.graph import strongly_connected
from orbiflow.lyapunov import (
    BoxSpline,
    ConstructionRefused,
    FlowAverage,
    conley_function,
    construct_lyapunov_form,
    SIGN_MARGIN,
    group_average,
    verify_lyapunov,
)
from orbiflow.orbifold import GroupElement, QuotientPresentation

CERTIFIED = ["gradient-torus", "pillowcase-rational", "product-construction"]


def _presentations():
    glide = GroupElement.from_spec([[1, 0], [0, -1]], ["1/2", "0"])
    quarter = GroupElement.from_spec([[0, -1], [1, 0]], ["0", "0"])
    return [QuotientPresentation.pillowcase(), QuotientPresentation.generated_by(2, [glide]),
            QuotientPresentation.generated_by(2, [quarter])]


def _fourier(seed: int):
    rng = np.random.default_rng(seed)
    k = rng.integers(-3, 4, size=(5, 2))
    amp, phase = rng.normal(size=5), rng.random(5)
    return lambda x: np.cos(2 * np.pi * (np.atleast_2d(x) @ k.T + phase)) @ amp


@given(st.integers(0, 2**31), st.sampled_from(range(3)))
def test_group_average_is_invariant_and_idempotent(seed, which):
    pres = _presentations()[which]
    avg = group_average(pres, _fourier(seed))
    x = np.random.default_rng(seed + 1).random((64, 2))
    base = avg(x)
    for g in pres.group:
        assert np.abs(avg(g.act(x)) - base).max() < 1e-12
    assert np.abs(group_average(pres, avg)(x) - base).max() < 1e-12


def _random_graph(seed: int, res: int = 8):
    rng = np.random.default_rng(seed)
    cover = BoxCover(QuotientPresentation.trivial(2), res)
    n = cover.n_nodes
    m = int(rng.integers(n, 4 * n))
    src, dst = rng.integers(0, n, m), rng.integers(0, n, m)
    return SimpleNamespace(n_nodes=n, src=src, dst=dst, cover=cover)


def _check_conley(graph, conley):
    assert conley.min_decrease(graph) >= conley.gap / 2 - 1e-12
    assert np.all((conley.values >= -1e-12) & (conley.values <= 1 + 1e-12))
    k, labels = strongly_connected(graph.n_nodes, graph.src, graph.dst)
    rec = conley.recurrent
    for c in np.unique(labels[rec]):
        vals = conley.values[rec & (labels == c)]
        assert np.ptp(vals) == 0.0


@given(st.integers(0, 2**31))
def test_conley_function_on_random_graphs(seed):
    g = _random_graph(seed)
    _check_conley(g, conley_function(g))


@pytest.mark.parametrize("name", scenarios.names())
def test_conley_function_on_scenarios(name, graphs):
    sc, g, rep = graphs(name, 64)
    _check_conley(g, conley_function(g))


def test_conley_levels_on_gradient_torus(graphs):
    sc, g, rep = graphs("gradient-torus", 64)
    c = conley_function(g)
    level = lambda p: c.values[g.cover.node_of_point(np.array([p]))[0]]
    top, bottom = level([0.0, 0.0]), level([0.5, 0.5])  # source and sink
    for saddle in ([0.0, 0.5], [0.5, 0.0]):
        assert top > level(saddle) > bottom


@given(st.integers(0, 2**31))
@settings(max_examples=20)
def test_box_spline_gradient_and_constancy(seed):
    rng = np.random.default_rng(seed)
    cover = BoxCover(QuotientPresentation.trivial(2), 8)
    spline = BoxSpline(cover, rng.normal(size=cover.n_cells))
    x = rng.random((32, 2))
    val, grad = spline.evaluate(x)
    h = 1e-6
    for a in range(2):
        e = np.zeros(2)
        e[a] = h
        fd = (spline(x + e) - spline(x - e)) / (2 * h)
        assert np.abs(fd - grad[:, a]).max() < 1e-5 * (1 + np.abs(grad).max())
    flat = BoxSpline(cover, np.full(cover.n_cells, 0.3))
    v, g = flat.evaluate(x)
    assert np.abs(v - 0.3).max() < 1e-14 and np.abs(g).max() < 1e-12


@given(st.integers(0, 2**31), st.sampled_from(range(3)))
@settings(max_examples=20)
def test_box_spline_from_node_values_is_invariant(seed, which):
    pres = _presentations()[which]
    cover = BoxCover(pres, 8)
    rng = np.random.default_rng(seed)
    spline = BoxSpline.from_nodes(cover, rng.normal(size=cover.n_nodes))
    x = rng.random((32, 2))
    for g in pres.group:
        assert np.abs(spline(g.act(x)) - spline(x)).max() < 1e-12


def test_flow_average_gradient_matches_differences():
    sc = scenarios.builtin("product-construction")
    cover = BoxCover(sc.presentation, 16)
    rng = np.random.default_rng(3)
    spline = BoxSpline(cover, rng.random(cover.n_cells))
    L = FlowAverage(sc.field, spline, 0.4, 0.005)
    x = rng.random((16, 2))
    _, grad, _ = L.evaluate(x)
    h = 1e-6
    for a in range(2):
        e = np.zeros(2)
        e[a] = h
        fd = (L.value(x + e) - L.value(x - e)) / (2 * h)
        assert np.abs(fd - grad[:, a]).max() < 1e-5
    # v(L) from the gradient agrees with the endpoint formula up to the RK4 error
    vL = np.sum(grad * sc.field(x), axis=1)
    assert np.abs(vL - L.flow_derivative(x)).max() < 1e-3


@pytest.mark.parametrize("name", CERTIFIED)
def test_construction_passes_with_margin(name, certificates):
    cert = certificates(name)
    assert not isinstance(cert, ConstructionRefused), cert
    assert cert.passed
    assert all(c.margin > 0 for c in cert.checks.checks)
    report = json.loads(cert.to_json(table=8))
    assert report["a_used"] >= report["a0"]
    assert len(report["L_table"]["values"]) == 64


@pytest.mark.parametrize("name", CERTIFIED)
def test_larger_multipliers_keep_negative_contraction(name, certificates):
    cert = certificates(name)
    node = cert.L.spline.cover.node_of_point(cert.grid)
    off_u = ~np.isin(node, cert.U_boxes)
    off_both = off_u & ~np.isin(node, cert.W1)
    off_y = ~np.isin(node, cert.Y_boxes)
    for a in (cert.a0, 2 * cert.a0, 10 * cert.a0):
        iota = cert.contraction_with(a)
        assert iota[off_both].max() < 0
        assert iota[off_u].max() < -SIGN_MARGIN
        assert iota[off_y].max() < 0


@pytest.mark.parametrize("name", CERTIFIED)
def test_form_decreases_along_orbits_away_from_recurrence(name, certificates):
    sc = scenarios.builtin(name)
    cert = certificates(name)
    cover = cert.L.spline.cover
    node = cover.node_of_point(cert.grid)
    away = np.flatnonzero(~np.isin(node, np.union1d(cert.W1, cert.W2)))
    seeds = cert.grid[np.random.default_rng(0).choice(away, size=32, replace=False)]
    horizon = 2 * sc.params.T_edge
    _, integral = integrate_many(sc.field, seeds, horizon, sc.params.step, form=cert.omega2)
    assert integral.max() < 0


def test_nonclosed_scenario_is_refused(certificates):
    err = certificates("pillowcase-nonclosed")
    assert isinstance(err, ConstructionRefused) and err.code == "CXI_NOT_CLOSED"
    assert err.witness is not None


@pytest.mark.parametrize("name", ["torus-irrational-null", "linear-minimal"])
def test_failed_sign_condition_is_refused(name, graphs):
    sc, g, rep = graphs(name, 64)
    with pytest.raises(ConstructionRefused) as info:
        construct_lyapunov_form(g, rep)
    assert info.value.code == "SIGN_CORRECTION_INFEASIBLE"


def test_forced_construction_on_irrational_flow_is_infeasible(graphs):
    sc, g, rep = graphs("torus-irrational-null", 32)
    with pytest.raises(ConstructionRefused) as info:
        construct_lyapunov_form(g, rep, force=True)
    assert info.value.code == "SIGN_CORRECTION_INFEASIBLE"


def test_verify_explicit_pillowcase_form(graphs):
    sc, g, rep = graphs("pillowcase-rational")
    cover = g.cover
    y = sc.y_samples(128)
    ok = verify_lyapunov(sc.field, sc.form, cover, rep.R_boxes, rep.R_boxes, y_samples=y)
    assert ok.passed, ok.to_dict()
    zero = BasicOneForm.zero(sc.presentation)
    bad = verify_lyapunov(sc.field, zero, cover, rep.R_boxes, rep.R_boxes, y_samples=y)
    assert not bad["(1) negative off U"].passed
    assert bad["(2') vanishes on Y"].passed


def test_verify_gradient_differential(graphs):
    # the field is 2 pi (sin 2 pi x, sin 2 pi y) = -grad(cos 2 pi x + cos 2 pi y)
    sc, g, rep = graphs("gradient-torus", 64)
    dF = BasicOneForm(sc.presentation, [-2 * np.pi * SinX(0), -2 * np.pi * SinX(1)])
    near = g.cover.fatten(rep.R_boxes, g.cover.diameter)
    out = verify_lyapunov(sc.field, dF, g.cover, rep.R_boxes, near)
    assert out.passed, out.to_dict()


def test_verify_rejects_y_outside_u(graphs):
    sc, g, rep = graphs("gradient-torus", 64)
    with pytest.raises(ValueError):
        verify_lyapunov(sc.field, sc.form, g.cover, [0, 1], [1])
