import numpy as np
import pytest
from hypothesis import given, strategies as st

from orbiflow.boxes import BoxCover
from orbiflow.expr import Bump, CosX, SinX, parse
from orbiflow.forms import (
    BasicOneForm,
    CohomologyClass,
    EquivariantVectorField,
    GPath,
    ValidationError,
    compute_scale,
    connecting_path,
    contraction,
    exactness_on_region,
    gpath_integral,
    period_pairing,
)
from orbiflow.orbifold import GroupElement, QuotientPresentation

TORUS = QuotientPresentation.trivial(2)
PILLOW = QuotientPresentation.pillowcase()
KLEIN = QuotientPresentation.generated_by(2, [GroupElement.from_spec([[1, 0], [0, -1]], ["1/2", "0"])])

# invariant potentials for each presentation
F_TORUS = SinX(0) * CosX(1, 2) + 0.3 * Bump((0.3, 0.6), 0.2)
F_PILLOW = CosX(0) * CosX(1) + 0.5 * SinX(0) * SinX(1)
F_KLEIN = SinX(0, 2) + CosX(1) * CosX(0, 2)


CASES = [
    (TORUS, BasicOneForm(TORUS, [1.0, 2.0]), F_TORUS),
    (PILLOW, BasicOneForm(PILLOW, [SinX(0) * CosX(1), CosX(0) * SinX(1)]), F_PILLOW),
    (KLEIN, BasicOneForm(KLEIN, [2.0, 0.0]), F_KLEIN),
]
case_st = st.sampled_from(CASES)
seed_st = st.integers(0, 2**32 - 1)


def _random_gpath(pres, rng, pieces=3, closed=False):
    """Random polylines joined by random group arrows; optionally closed by a final arrow."""
    segs, arrows = [], []
    x = rng.random(2)
    for j in range(pieces):
        seg = [x]
        for _ in range(int(rng.integers(1, 5))):
            seg.append(seg[-1] + rng.normal(scale=0.4, size=2))
        if closed and j == pieces - 1:
            g = pres.group[int(rng.integers(len(pres)))]
            # end at a lift of g^{-1} of the start so that g closes the loop
            target = g.inverse().act_lifted(segs[0][0] if segs else seg[0])
            seg[-1] = target + np.round(seg[-1] - target)
            segs.append(np.array(seg))
            arrows.append(g)
            break
        segs.append(np.array(seg))
        if j < pieces - 1:
            g = pres.group[int(rng.integers(len(pres)))]
            arrows.append(g)
            x = g.act(seg[-1]) + rng.integers(-1, 2, size=2)
    return GPath(segs, arrows)


@given(case_st, seed_st)
def test_reparametrization_invariance(case, seed):
    pres, form, _ = case
    path = _random_gpath(pres, np.random.default_rng(seed))
    assert abs(gpath_integral(path.resampled(2), form) - gpath_integral(path, form)) < 1e-8


@given(case_st, seed_st, st.floats(0.1, 0.9))
def test_concatenation_equivalence(case, seed, t):
    pres, form, _ = case
    path = _random_gpath(pres, np.random.default_rng(seed))
    s = path.segments[0]
    mid = s[0] + t * (s[1] - s[0])
    split = [np.vstack([s[:1], mid]), np.vstack([mid, s[1:]])] + path.segments[1:]
    arrows = [GroupElement.identity(2)] + list(path.arrows)
    assert abs(gpath_integral(GPath(split, arrows), form) - gpath_integral(path, form)) < 1e-8


@given(case_st, seed_st)
def test_multiplication_equivalence(case, seed):
    pres, form, _ = case
    path = _random_gpath(pres, np.random.default_rng(seed))
    end = path.segments[0][-1]
    padded = [path.segments[0], np.stack([end, end])] + path.segments[1:]
    arrows = [GroupElement.identity(2)] + list(path.arrows)
    assert abs(gpath_integral(GPath(padded, arrows), form) - gpath_integral(path, form)) < 1e-8


@given(case_st, seed_st)
def test_exact_shift_changes_integral_by_endpoint_values(case, seed):
    pres, form, F = case
    path = _random_gpath(pres, np.random.default_rng(seed))
    shifted = form.combine([1.0], [BasicOneForm.differential(pres, F)])
    diff = gpath_integral(path, shifted) - gpath_integral(path, form)
    ends = F(np.stack([path.segments[-1][-1], path.segments[0][0]]))
    assert abs(diff - (ends[0] - ends[1])) < 1e-8


@given(case_st, seed_st)
def test_contraction_is_invariant(case, seed):
    pres, form, _ = case
    field = {id(TORUS): EquivariantVectorField(TORUS, [SinX(1), 1.0]),
             id(PILLOW): EquivariantVectorField(PILLOW, [SinX(0), SinX(1) * CosX(0)]),
             id(KLEIN): EquivariantVectorField(KLEIN, [CosX(1), SinX(1)])}[id(pres)]
    iota = contraction(field, form)
    x = np.random.default_rng(seed).random((32, 2))
    for g in pres.group:
        assert np.abs(iota(g.act(x)) - iota(x)).max() < 1e-9


@given(st.sampled_from([(TORUS, [1.0, -2.0], F_TORUS), (KLEIN, [2.0, 0.0], F_KLEIN)]), seed_st)
def test_integral_class_pairs_to_integers_on_loops(case, seed):
    pres, periods, F = case
    form = BasicOneForm(pres, periods).combine([1.0], [BasicOneForm.differential(pres, F)])
    loop = _random_gpath(pres, np.random.default_rng(seed), closed=True)
    p = period_pairing(CohomologyClass(form), loop)
    assert abs(p - round(p)) < 1e-6


def test_connecting_paths_stay_in_scale_ball():
    rng = np.random.default_rng(11)
    for pres, form, _ in CASES:
        eps, delta = compute_scale(CohomologyClass(form))
        n = 0
        while n < 1000:
            p = rng.random(2)
            q = np.mod(p + rng.normal(scale=delta, size=2), 1.0)
            if pres.quotient_distance(p, q) >= delta:
                continue
            path = connecting_path(pres, p, q)
            seg = path.segments[0]
            pts = seg[0] + np.linspace(0, 1, 9)[:, None] * (seg[1] - seg[0])
            assert np.all(pres.quotient_distance(pts, p) < eps)
            n += 1


def test_validation_rejects_broken_inputs():
    with pytest.raises(ValidationError):
        EquivariantVectorField(PILLOW, [CosX(0), 1.0])  # not odd
    with pytest.raises(ValidationError):
        BasicOneForm(PILLOW, [1.0, 0.0])  # dx is not invariant under the half turn
    with pytest.raises(ValidationError):
        BasicOneForm(TORUS, [SinX(1), 0.0])  # not closed
    with pytest.raises(ValueError):
        EquivariantVectorField(TORUS, [1.0])


def test_periods_of_constant_and_exact_forms():
    cls = CohomologyClass(BasicOneForm(TORUS, [1.0, -2.0]))
    assert np.allclose(cls.period_vector, [1.0, -2.0], atol=1e-12)
    assert cls.integrality_flag and not cls.is_exact
    exact = CohomologyClass(BasicOneForm.differential(TORUS, F_TORUS))
    assert exact.is_exact
    irr = CohomologyClass(BasicOneForm(TORUS, [-(1 + 5**0.5) / 2, 1.0]))
    assert not irr.integrality_flag


def test_scale_is_quarter_injectivity_radius():
    eps, delta = compute_scale(CohomologyClass(BasicOneForm(TORUS, [1.0, 0.0])))
    assert eps == delta == pytest.approx(0.125)
    eps, _ = compute_scale(CohomologyClass(BasicOneForm.differential(PILLOW, F_PILLOW)))
    assert eps == pytest.approx(0.0625)


def test_exactness_on_contractible_and_winding_regions():
    cover = BoxCover(TORUS, 32)
    form = BasicOneForm(TORUS, [1.0, 0.0]).combine([1.0], [BasicOneForm.differential(TORUS, F_TORUS)])
    disk = cover.fatten(cover.node_of_point(np.array([[0.4, 0.4]])), 0.1)
    res = exactness_on_region(form, cover, disk)
    assert res.exact
    x = cover.node_centers[disk]
    pot = res.potential(x)
    want = x[:, 0] + F_TORUS(x)
    assert np.ptp(pot - want) < 1e-8
    # a full horizontal band carries the loop x -> x + 1
    band = np.unique(cover.node_of_point(np.column_stack([np.linspace(0, 1, 200, endpoint=False),
                                                          np.full(200, 0.5)])))
    res = exactness_on_region(form, cover, band)
    assert not res.exact and abs(abs(res.period) - 1.0) < 1e-8
