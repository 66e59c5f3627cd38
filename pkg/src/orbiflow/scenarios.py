"""Built-in scenarios and the scenario configuration format.

A scenario bundles a presentation, an equivariant field, a basic form
representing the class, the qualitative expectations we check against, and
default discretization parameters.

Config schema (configparser, one section per component)::

    [scenario]
    name = ...
    description = ...

    [presentation]
    dim = 2
    group = [{"matrix": [[-1, 0], [0, -1]], "shift": ["0", "0"]}]   ; JSON, shifts "p/q"

    [field]
    components =
        <expr for v_0>
        <expr for v_1>

    [form]
    components =
        <expr for omega_0>
        <expr for omega_1>

    [expected]
    R = free text
    Rxi = free text
    Cxi = free text
    Cxi_closed = true|false
    condition_b = true|false
    lyapunov_exists = true|false
    rxi_points = JSON list of points (optional)
    y_points = JSON list of points on the rest set Y (optional)
    y_zero_set = expr whose regular zero set is Y (optional)

    [params]
    resolution = 64
    T_edge = 0.5
    samples = 16
    step = 0.01

Expressions use the grammar documented in ``orbiflow.expr``.
"""
from __future__ import annotations

import configparser
import io
import json
from dataclasses import dataclass, field, fields

import numpy as np

from .expr import BumpX, CosX, Expr, SinX, parse
from .forms import BasicOneForm, CohomologyClass, EquivariantVectorField
from .orbifold import QuotientPresentation

GOLDEN = (1.0 + 5.0**0.5) / 2.0


@dataclass
class Expected:
    R: str
    Rxi: str
    Cxi: str
    Cxi_closed: bool
    condition_b: bool
    lyapunov_exists: bool
    rxi_points: list = field(default_factory=list)
    y_points: list = field(default_factory=list)
    y_zero_set: Expr | None = None

    def __post_init__(self):
        if self.lyapunov_exists and not self.Cxi_closed:
            raise ValueError("inconsistent expectations: lyapunov_exists requires Cxi_closed")


@dataclass
class Params:
    resolution: int = 64
    T_edge: float = 0.5
    samples: int = 16
    step: float = 0.01


@dataclass
class Scenario:
    name: str
    presentation: QuotientPresentation
    field: EquivariantVectorField
    cls: CohomologyClass
    expected: Expected
    params: Params = field(default_factory=Params)
    description: str = ""

    @property
    def form(self) -> BasicOneForm:
        return self.cls.representative

    def validate(self) -> None:
        self.field.validate()
        self.form.validate()

    def y_samples(self, count: int = 256, seed: int = 0) -> np.ndarray:
        """Points of the expected rest set Y: listed points plus Newton projections onto y_zero_set."""
        pts = [np.asarray(p, dtype=float) for p in self.expected.y_points]
        out = [self.presentation.images(p) for p in pts]
        h = self.expected.y_zero_set
        if h is not None:
            rng = np.random.default_rng(seed)
            x = rng.random((count, self.presentation.dim))
            for _ in range(60):
                g = h.grad(x)
                val = h(x)
                x = x - (val / np.maximum(np.sum(g * g, axis=1), 1e-300))[:, None] * g
            ok = np.abs(h(x)) < 1e-12
            out.append(np.mod(x[ok], 1.0))
        if not out:
            return np.zeros((0, self.presentation.dim))
        return np.concatenate([np.atleast_2d(o) for o in out])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scenario):
            return NotImplemented
        return (
            self.name == other.name
            and self.presentation == other.presentation
            and self.field == other.field
            and self.form == other.form
            and self.expected == other.expected
            and self.params == other.params
        )


def _fields(components) -> list[str]:
    return [c.sexpr() if isinstance(c, Expr) else str(c) for c in components]


def dumps(sc: Scenario) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["scenario"] = {"name": sc.name, "description": sc.description or "-"}
    cp["presentation"] = {
        "dim": str(sc.presentation.dim),
        "group": json.dumps([g.to_spec() for g in sc.presentation.group if not g.is_identity]),
    }
    cp["field"] = {"components": "\n" + "\n".join(sc.field.sexprs())}
    forms = sc.form.sexprs()
    if forms is None:
        raise ValueError("form has no expression components and cannot be serialized")
    cp["form"] = {"components": "\n" + "\n".join(forms)}
    e = sc.expected
    exp = {
        "R": e.R, "Rxi": e.Rxi, "Cxi": e.Cxi,
        "Cxi_closed": str(e.Cxi_closed).lower(),
        "condition_b": str(e.condition_b).lower(),
        "lyapunov_exists": str(e.lyapunov_exists).lower(),
        "rxi_points": json.dumps(e.rxi_points),
        "y_points": json.dumps(e.y_points),
    }
    if e.y_zero_set is not None:
        exp["y_zero_set"] = e.y_zero_set.sexpr()
    cp["expected"] = exp
    cp["params"] = {f.name: str(getattr(sc.params, f.name)) for f in fields(Params)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _lines(text: str) -> list[str]:
    return [ln.strip() for ln in text.strip().splitlines() if ln.strip()]


def loads(text: str, validate: bool = True) -> Scenario:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    cp.optionxform = str
    cp.read_string(text)
    for sec in ("presentation", "field", "form", "expected"):
        if sec not in cp:
            raise ValueError(f"scenario config lacks section [{sec}]")
    pr = cp["presentation"]
    pres = QuotientPresentation.from_spec({"dim": int(pr["dim"]), "group": json.loads(pr.get("group", "[]"))})
    vf = EquivariantVectorField(pres, _lines(cp["field"]["components"]), validate=validate)
    form = BasicOneForm(pres, _lines(cp["form"]["components"]), validate=validate)
    ex = cp["expected"]
    expected = Expected(
        R=ex.get("R", ""), Rxi=ex.get("Rxi", ""), Cxi=ex.get("Cxi", ""),
        Cxi_closed=ex.getboolean("Cxi_closed"),
        condition_b=ex.getboolean("condition_b"),
        lyapunov_exists=ex.getboolean("lyapunov_exists"),
        rxi_points=json.loads(ex.get("rxi_points", "[]")),
        y_points=json.loads(ex.get("y_points", "[]")),
        y_zero_set=parse(ex["y_zero_set"]) if "y_zero_set" in ex else None,
    )
    params = Params()
    if "params" in cp:
        for f in fields(Params):
            if f.name in cp["params"]:
                setattr(params, f.name, type(getattr(params, f.name))(cp["params"][f.name]))
    meta = cp["scenario"] if "scenario" in cp else {}
    desc = meta.get("description", "")
    return Scenario(
        name=meta.get("name", "custom"), presentation=pres, field=vf, cls=CohomologyClass(form),
        expected=expected, params=params, description="" if desc == "-" else desc,
    )


def product_scenario(base: Expr, zeros: tuple[float, float], radius: float, *, fiber: Expr | None = None,
                     rotation: float = 1.0, form_sign: float = -1.0, potential_amp: float = 0.1,
                     name: str = "product", params: Params | None = None) -> Scenario:
    """Couple a circle flow x' = base(x) to a fiber circle through two bump functions.

    On T^2 with coordinates (t1, t2) the field is (base(t1), f1(t1) w1(t2) + f2(t1) rotation),
    where f1, f2 are bumps at the two given zeros of base and w1 = fiber (default cos 2 pi t2).
    The class is form_sign * [dt2], represented with an added exact term so that
    time averages converge at rate 1/T rather than immediately.
    """
    r1, r2 = zeros
    gap = abs((r1 - r2 + 0.5) % 1.0 - 0.5)
    if 2 * radius >= gap:
        raise ValueError(f"bump supports overlap: radius {radius} vs zero separation {gap}")
    fiber = CosX(1) if fiber is None else fiber
    f1, f2 = BumpX(0, r1, radius), BumpX(0, r2, radius)
    pres = QuotientPresentation.trivial(2)
    v = EquivariantVectorField(pres, [base, f1 * fiber + f2 * rotation], description=f"{name} field")
    form = BasicOneForm(pres, [0.0, form_sign + (2 * np.pi * potential_amp) * CosX(1)], label=f"{name} form")
    fib_zeros = [0.25, 0.75]
    expected = Expected(
        R="{t1 = r1} x zeros of w1, together with the circle {t1 = r2}",
        Rxi="the zeros of w1 on the circle t1 = r1",
        Cxi="the circle t1 = r2",
        Cxi_closed=True, condition_b=True, lyapunov_exists=True,
        rxi_points=[[float(r1), z] for z in fib_zeros],
        y_points=[[float(r1), z] for z in fib_zeros],
    )
    return Scenario(name, pres, v, CohomologyClass(form), expected, params or Params(128, 0.2, 16, 0.005),
                    description="product of a circle gradient flow with a rotating fiber")


def _pillowcase_rational() -> Scenario:
    pres = QuotientPresentation.pillowcase()
    # h = sin 2 pi (x + 2y): odd, vanishing on two closed lines
    h = SinX(0) * CosX(1, 2) + CosX(0) * SinX(1, 2)
    a, b = 0.25, 0.5
    v = EquivariantVectorField(pres, [a * h, b * h], description="h(x,y) (a, b) with a/b rational")
    form = BasicOneForm(pres, [-1.0 * h, -2.0 * h], label="-h dx - 2h dy")
    expected = Expected(
        R="the zero set of h (two closed curves x + 2y = 0, 1/2)",
        Rxi="equal to R (every basic closed form here is exact)",
        Cxi="empty", Cxi_closed=True, condition_b=True, lyapunov_exists=True,
        y_zero_set=h,
    )
    return Scenario("pillowcase-rational", pres, v, CohomologyClass(form), expected, Params(128, 0.1, 16, 0.01),
                    description="pillowcase, field parallel to a rational direction, f1 a + f2 b < 0 off Y")


def _pillowcase_nonclosed() -> Scenario:
    # realized on the torus double cover, where the class -[dy] is not exact
    pres = QuotientPresentation.trivial(2)
    h = 0.5 - 0.25 * CosX(0) - 0.25 * CosX(1)
    v = EquivariantVectorField(pres, [0.0, h], description="(0, h) with h vanishing only at the origin")
    form = BasicOneForm(pres, [0.0, -1.0], label="-dy")
    expected = Expected(
        R="whole torus", Rxi="the rest point (0, 0)", Cxi="torus minus the rest point",
        Cxi_closed=False, condition_b=True, lyapunov_exists=False,
        rxi_points=[[0.0, 0.0]], y_points=[[0.0, 0.0]],
    )
    return Scenario("pillowcase-nonclosed", pres, v, CohomologyClass(form), expected, Params(128, 0.5, 16, 0.01),
                    description="vertical flow with a single rest point; the non-vanishing set is not closed")


def _torus_irrational_null() -> Scenario:
    pres = QuotientPresentation.trivial(2)
    h = 1.0 + 0.3 * SinX(0)
    v = EquivariantVectorField(pres, [h, GOLDEN * h], description="h (1, golden ratio), h > 0")
    form = BasicOneForm(pres, [-GOLDEN, 1.0], label="-phi dx + dy")
    expected = Expected(
        R="whole torus", Rxi="empty", Cxi="whole torus",
        Cxi_closed=True, condition_b=False, lyapunov_exists=False,
    )
    return Scenario("torus-irrational-null", pres, v, CohomologyClass(form), expected, Params(128, 0.25, 16, 0.01),
                    description="irrational linear direction with a class annihilating it")


def _product_construction() -> Scenario:
    return product_scenario(CosX(0), (0.25, 0.75), 0.2, name="product-construction")


def _gradient_torus() -> Scenario:
    pres = QuotientPresentation.trivial(2)
    k = 2 * np.pi
    v = EquivariantVectorField(pres, [k * SinX(0), k * SinX(1)], description="-grad(cos 2 pi x + cos 2 pi y)")
    crit = [[x, y] for x in (0.0, 0.5) for y in (0.0, 0.5)]
    expected = Expected(
        R="the four critical points", Rxi="the four critical points", Cxi="empty",
        Cxi_closed=True, condition_b=True, lyapunov_exists=True,
        rxi_points=crit, y_points=crit,
    )
    return Scenario("gradient-torus", pres, v, CohomologyClass(BasicOneForm.zero(pres)), expected,
                    Params(128, 0.02, 16, 0.002), description="gradient flow with the zero class")


def _linear_minimal() -> Scenario:
    pres = QuotientPresentation.trivial(2)
    v = EquivariantVectorField(pres, [1.0, 2.0], description="constant field (1, 2)")
    form = BasicOneForm(pres, [1.0, 0.0], label="dx")
    expected = Expected(
        R="whole torus", Rxi="empty", Cxi="whole torus",
        Cxi_closed=True, condition_b=False, lyapunov_exists=False,
    )
    return Scenario("linear-minimal", pres, v, CohomologyClass(form), expected, Params(64, 1.0, 8, 0.01),
                    description="periodic linear flow; its orbits pair to +1 with the class")


REGISTRY = {
    "pillowcase-rational": _pillowcase_rational,
    "pillowcase-nonclosed": _pillowcase_nonclosed,
    "torus-irrational-null": _torus_irrational_null,
    "product-construction": _product_construction,
    "gradient-torus": _gradient_torus,
    "linear-minimal": _linear_minimal,
}


def names() -> list[str]:
    return list(REGISTRY)


def builtin(name: str) -> Scenario:
    try:
        make = REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; known: {', '.join(REGISTRY)}") from None
    return make()
