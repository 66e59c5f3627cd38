"""Equivariant vector fields, basic closed 1-forms, G-paths and their integrals."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .expr import Expr, as_expr, parse
from .orbifold import GroupElement, QuotientPresentation

GRID = 32
EQUIV_TOL = 1e-9
CLOSED_TOL = 1e-6
FD_STEP = 1e-4


class ValidationError(ValueError):
    """Raised when a field or form breaks its contract; `witness` is a torus point."""

    def __init__(self, message: str, witness=None):
        super().__init__(message if witness is None else f"{message} at {np.round(witness, 6).tolist()}")
        self.witness = None if witness is None else np.asarray(witness, dtype=float)


def validation_grid(dim: int, k: int = GRID) -> np.ndarray:
    axes = np.meshgrid(*([np.arange(k) / k] * dim), indexing="ij")
    return np.stack([a.ravel() for a in axes], axis=1)


def _exprs(items) -> tuple[Expr, ...]:
    return tuple(parse(e) if isinstance(e, str) else as_expr(e) for e in items)


def _pts(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[None, :] if x.ndim == 1 else x


class EquivariantVectorField:
    """A vector field on T^n with v(g x) = L_g v(x) for every group element g."""

    def __init__(self, presentation: QuotientPresentation, components: Sequence, description: str = "",
                 validate: bool = True):
        self.presentation = presentation
        self.components = _exprs(components)
        if len(self.components) != presentation.dim:
            raise ValueError(f"field needs {presentation.dim} components, got {len(self.components)}")
        self.description = description
        self.lipschitz = self._lipschitz_estimate()
        if validate:
            self.validate()

    @property
    def dim(self) -> int:
        return self.presentation.dim

    def __call__(self, x) -> np.ndarray:
        x = _pts(x)
        return np.stack([c(x) for c in self.components], axis=1)

    def jacobian(self, x) -> np.ndarray:
        x = _pts(x)
        return np.stack([c.grad(x) for c in self.components], axis=1)

    def _lipschitz_estimate(self) -> float:
        jac = self.jacobian(validation_grid(self.dim))
        return float(np.linalg.norm(jac, ord=2, axis=(1, 2)).max())

    def validate(self) -> None:
        x = validation_grid(self.dim)
        vx = self(x)
        for g in self.presentation.group:
            err = np.abs(self(g.act(x)) - vx @ g.matrix.T).max(axis=1)
            if err.max() > EQUIV_TOL:
                raise ValidationError(f"field not equivariant under {g.to_spec()}", x[err.argmax()])

    def sexprs(self) -> list[str]:
        return [c.sexpr() for c in self.components]

    def __eq__(self, other) -> bool:
        return (isinstance(other, EquivariantVectorField) and self.presentation == other.presentation
                and self.sexprs() == other.sexprs())


def _pairs(n: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


class BasicOneForm:
    """A Gamma-invariant closed 1-form on T^n, given by covector coefficients.

    Built either from combinator expressions (analytic curl) or from a
    callable `coeff_fn` with an optional `curl_fn`; without a curl the
    closedness check uses central finite differences.
    """

    def __init__(self, presentation: QuotientPresentation, components: Sequence | None = None, *,
                 coeff_fn: Callable | None = None, curl_fn: Callable | None = None,
                 label: str = "", validate: bool = True):
        self.presentation = presentation
        self.label = label
        if (components is None) == (coeff_fn is None):
            raise ValueError("give exactly one of components or coeff_fn")
        self.components = None
        if components is not None:
            self.components = _exprs(components)
            if len(self.components) != presentation.dim:
                raise ValueError(f"form needs {presentation.dim} components, got {len(self.components)}")
            comps = self.components
            self._fn = lambda x: np.stack([c(x) for c in comps], axis=1)
            self._curl = self._analytic_curl
        else:
            self._fn = coeff_fn
            self._curl = curl_fn
        if validate:
            self.validate()

    @property
    def dim(self) -> int:
        return self.presentation.dim

    def __call__(self, x) -> np.ndarray:
        return np.asarray(self._fn(_pts(x)), dtype=float)

    def _analytic_curl(self, x) -> np.ndarray:
        grads = [c.grad(x) for c in self.components]
        cols = [grads[j][:, i] - grads[i][:, j] for i, j in _pairs(self.dim)]
        return np.stack(cols, axis=1) if cols else np.zeros((len(x), 0))

    def _fd_curl(self, x) -> np.ndarray:
        n = self.dim
        cols = []
        for i, j in _pairs(n):
            ei = np.zeros(n)
            ej = np.zeros(n)
            ei[i] = ej[j] = FD_STEP
            d_i_wj = (self(x + ei)[:, j] - self(x - ei)[:, j]) / (2 * FD_STEP)
            d_j_wi = (self(x + ej)[:, i] - self(x - ej)[:, i]) / (2 * FD_STEP)
            cols.append(d_i_wj - d_j_wi)
        return np.stack(cols, axis=1) if cols else np.zeros((len(x), 0))

    def curl(self, x) -> np.ndarray:
        """Antisymmetric mixed partials d_i w_j - d_j w_i for i < j."""
        x = _pts(x)
        return self._curl(x) if self._curl is not None else self._fd_curl(x)

    def validate(self) -> None:
        x = validation_grid(self.dim)
        wx = self(x)
        for g in self.presentation.group:
            err = np.abs(self(g.act(x)) @ g.matrix - wx).max(axis=1)
            if err.max() > EQUIV_TOL:
                raise ValidationError(f"form not invariant under {g.to_spec()}", x[err.argmax()])
        if self.dim > 1:
            c = np.abs(self.curl(x)).max(axis=1)
            if c.max() > CLOSED_TOL:
                raise ValidationError(f"form not closed (curl {c.max():.3g})", x[c.argmax()])

    def sexprs(self) -> list[str] | None:
        return None if self.components is None else [c.sexpr() for c in self.components]

    def __eq__(self, other) -> bool:
        if not isinstance(other, BasicOneForm) or self.presentation != other.presentation:
            return False
        if self.components is None or other.components is None:
            return self is other
        return self.sexprs() == other.sexprs()

    # linear combinations; differentials are closed so curls just add
    def combine(self, coeffs: Sequence[float], others: Sequence["BasicOneForm"], label: str = "") -> "BasicOneForm":
        forms = [self, *others]
        ks = [1.0, *[float(c) for c in coeffs]]

        def fn(x):
            return sum(k * f(x) for k, f in zip(ks, forms))

        def curl(x):
            return sum(k * f.curl(x) for k, f in zip(ks, forms))

        return BasicOneForm(self.presentation, coeff_fn=fn, curl_fn=curl, label=label, validate=False)

    @classmethod
    def differential(cls, presentation: QuotientPresentation, potential, label: str = "",
                     validate: bool = True) -> "BasicOneForm":
        """dF for an invariant function with an analytic `grad` method."""
        n = presentation.dim
        return cls(presentation, coeff_fn=lambda x: potential.grad(x),
                   curl_fn=lambda x: np.zeros((len(x), n * (n - 1) // 2)), label=label, validate=validate)

    @classmethod
    def constant(cls, presentation: QuotientPresentation, coeffs: Sequence[float], **kw) -> "BasicOneForm":
        return cls(presentation, [float(c) for c in coeffs], **kw)

    @classmethod
    def zero(cls, presentation: QuotientPresentation) -> "BasicOneForm":
        return cls.constant(presentation, [0.0] * presentation.dim)


_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)
_GL_X = 0.5 * (_GL_X + 1.0)
_GL_W = 0.5 * _GL_W
_PIECE = 0.01


def polyline_integral(form: BasicOneForm, nodes) -> float:
    """Integral of the form along a lifted polyline (composite Gauss-Legendre per edge).

    Each straight edge is cut into pieces no longer than 0.01 and integrated
    with 8 Gauss nodes, so subdividing the polyline leaves the value unchanged
    to rounding.
    """
    return float(polyline_integrals(form, [nodes])[0])


def polyline_integrals(form: BasicOneForm, polylines) -> np.ndarray:
    starts, deltas, owner = [], [], []
    for k, nodes in enumerate(polylines):
        nodes = np.asarray(nodes, dtype=float)
        d = np.diff(nodes, axis=0)
        pieces = np.maximum(1, np.ceil(np.linalg.norm(d, axis=1) / _PIECE).astype(int))
        for a, dv, m in zip(nodes[:-1], d, pieces):
            t = np.arange(m)[:, None] / m
            starts.append(a + t * dv)
            deltas.append(np.repeat(dv[None, :] / m, m, axis=0))
            owner.append(np.full(m, k))
    out = np.zeros(len(polylines))
    if not starts:
        return out
    s = np.concatenate(starts)
    d = np.concatenate(deltas)
    o = np.concatenate(owner)
    pts = s[:, None, :] + _GL_X[None, :, None] * d[:, None, :]
    w = form(pts.reshape(-1, s.shape[1])).reshape(pts.shape)
    vals = np.einsum("q,pqn,pn->p", _GL_W, w, d)
    np.add.at(out, o, vals)
    return out


def straight_integrals(form: BasicOneForm, a, b, pieces: int = 1) -> np.ndarray:
    """Integrals along the straight lifted segments a[i] -> b[i] (8-point Gauss on each of `pieces` parts)."""
    a = _pts(a)
    d = _pts(b) - a
    t = ((np.arange(pieces)[:, None] + _GL_X[None, :]) / pieces).ravel()
    wq = np.tile(_GL_W, pieces) / pieces
    pts = a[:, None, :] + t[None, :, None] * d[:, None, :]
    w = form(pts.reshape(-1, a.shape[1])).reshape(pts.shape)
    return np.einsum("q,pqn,pn->p", wq, w, d)


@dataclass
class GPath:
    """Alternating word of lifted polylines and group arrows.

    arrows[j] carries the end of segments[j] to the start of segments[j+1];
    an extra final arrow closes the word into a G-loop.
    """

    segments: list
    arrows: list = field(default_factory=list)

    def __post_init__(self):
        self.segments = [np.atleast_2d(np.asarray(s, dtype=float)) for s in self.segments]
        if not self.segments:
            raise ValueError("G-path needs at least one segment")
        if any(len(s) < 2 for s in self.segments):
            raise ValueError("each segment needs at least two nodes")
        k = len(self.segments)
        if len(self.arrows) not in (k - 1, k):
            raise ValueError(f"{k} segments need {k - 1} or {k} arrows")
        for j, g in enumerate(self.arrows):
            end = self.segments[j][-1]
            start = self.segments[(j + 1) % k][0]
            if not _same_mod1(g.act(end), start):
                raise ValueError(f"arrow {j} does not join segment {j} to segment {(j + 1) % k}")

    @property
    def closing_arrow(self) -> GroupElement | None:
        return self.arrows[-1] if len(self.arrows) == len(self.segments) else None

    @property
    def is_loop(self) -> bool:
        if self.closing_arrow is not None:
            return True
        return _same_mod1(self.segments[-1][-1], self.segments[0][0])

    def resampled(self, factor: int = 2) -> "GPath":
        segs = []
        for s in self.segments:
            t = np.linspace(0.0, len(s) - 1, factor * (len(s) - 1) + 1)
            idx = np.minimum(np.floor(t).astype(int), len(s) - 2)
            frac = (t - idx)[:, None]
            segs.append(s[idx] * (1 - frac) + s[idx + 1] * frac)
        return GPath(segs, list(self.arrows))


def _same_mod1(a, b) -> bool:
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return bool(np.abs(d - np.round(d)).max() <= EQUIV_TOL)


def gpath_integral(path: GPath, form: BasicOneForm) -> float:
    """Sum of the line integrals over the segments; arrows contribute nothing."""
    return float(polyline_integrals(form, path.segments).sum())


def connecting_path(presentation: QuotientPresentation, p, q) -> GPath:
    """Short G-path from p to q: straight segment to the nearest lift of an image of q, then an arrow."""
    gi, target = presentation.nearest_image(np.asarray(p, float), np.asarray(q, float))
    g = presentation.group[int(gi)]
    q0 = np.mod(np.asarray(q, float), 1.0)
    return GPath([np.stack([np.asarray(p, float), target]), np.stack([q0, q0])], [g.inverse()])


def standard_loop(dim: int, i: int, base=None) -> GPath:
    base = np.zeros(dim) if base is None else np.asarray(base, dtype=float)
    end = base.copy()
    end[i] += 1.0
    return GPath([np.stack([base, end])])


class CohomologyClass:
    """A basic cohomology class, carried by a representative form and its torus periods."""

    INTEGRAL_TOL = 1e-6

    def __init__(self, representative: BasicOneForm):
        self.representative = representative
        n = representative.dim
        self.period_vector = np.array(
            [gpath_integral(standard_loop(n, i), representative) for i in range(n)])
        self.integrality_flag = bool(
            np.all(np.abs(self.period_vector - np.round(self.period_vector)) <= self.INTEGRAL_TOL))

    @property
    def presentation(self) -> QuotientPresentation:
        return self.representative.presentation

    @property
    def is_exact(self) -> bool:
        """True when all torus periods vanish; the form is then dF for an invariant F."""
        return bool(np.all(np.abs(self.period_vector) <= 1e-8))

    @property
    def is_zero_form(self) -> bool:
        x = validation_grid(self.representative.dim, 16)
        return bool(np.abs(self.representative(x)).max() == 0.0)

    @classmethod
    def from_periods(cls, presentation: QuotientPresentation, periods: Sequence[float]) -> "CohomologyClass":
        return cls(BasicOneForm.constant(presentation, periods))


def period_pairing(cls: CohomologyClass, loop: GPath) -> float:
    if not loop.is_loop:
        raise ValueError("period pairing needs a G-loop")
    return gpath_integral(loop, cls.representative)


def compute_scale(cls: CohomologyClass) -> tuple[float, float]:
    eps = float(cls.presentation.injectivity_radius()) / 4.0
    return eps, eps


class Contraction:
    """x -> <form(x), field(x)>, a Gamma-invariant function."""

    def __init__(self, field: EquivariantVectorField, form: BasicOneForm):
        if field.dim != form.dim:
            raise ValueError("field and form dimensions differ")
        self.field, self.form = field, form

    def __call__(self, x) -> np.ndarray:
        x = _pts(x)
        return np.einsum("mn,mn->m", self.form(x), self.field(x))


def contraction(field: EquivariantVectorField, form: BasicOneForm) -> Contraction:
    return Contraction(field, form)


class RegionPotential:
    """Invariant primitive of a form on a union of boxes.

    Values are stored at cell centers and extended inside each cell by the
    straight-line integral from the center, so grad equals the form there.
    """

    def __init__(self, cover, form: BasicOneForm, cells: np.ndarray, values: np.ndarray, pieces: int = 1):
        self.cover, self.form, self.pieces = cover, form, pieces
        self.cells = cells
        self.table = np.full(cover.n_cells, np.nan)
        self.table[cells] = values

    def inside(self, x) -> np.ndarray:
        return ~np.isnan(self.table[self.cover.cell_of_point(_pts(x))])

    def __call__(self, x) -> np.ndarray:
        x = _pts(x)
        c = self.cover.cell_of_point(x)
        center = self.cover.cell_centers(c)
        d = x - center
        d -= np.round(d)
        return self.table[c] + straight_integrals(self.form, center, center + d, self.pieces)

    def grad(self, x) -> np.ndarray:
        x = _pts(x)
        g = self.form(x)
        g[~self.inside(x)] = np.nan
        return g


@dataclass
class ExactnessResult:
    exact: bool
    potential: RegionPotential | None
    violating_loop: GPath | None = None
    period: float = 0.0
    n_components: int = 0


def _half_offsets(dim: int) -> np.ndarray:
    import itertools

    offs = []
    for o in itertools.product((-1, 0, 1), repeat=dim):
        nz = [v for v in o if v]
        if nz and nz[0] > 0:
            offs.append(o)
    return np.array(offs)


def exactness_on_region(form: BasicOneForm, cover, nodes, tol: float = 1e-6,
                        pieces: int | None = None) -> ExactnessResult:
    """Primitive of `form` on the union of the given orbit-boxes, or a loop with nonzero period.

    Integrates along a spanning forest of the cell adjacency graph, checks every
    non-tree edge (these close the generating loops of the region's nerve) and
    averages the primitive over the group. `pieces` subdivides each
    center-to-center segment; by default pieces are at most 0.01 long, as for
    G-path integrals.
    """
    from scipy.sparse import csr_matrix
    from scipy.sparse.csgraph import breadth_first_order, connected_components

    if pieces is None:
        pieces = max(1, int(np.ceil(cover.diameter / _PIECE)))
    cells = cover.cells_of_nodes(nodes)
    if cells.size == 0:
        return ExactnessResult(True, RegionPotential(cover, form, cells, np.zeros(0), pieces), n_components=0)
    pos = -np.ones(cover.n_cells, dtype=np.int64)
    pos[cells] = np.arange(cells.size)
    multi = cover.multi_index(cells)
    offs = _half_offsets(cover.dim)
    nb = cover.flat_index(multi[:, None, :] + offs[None, :, :])
    ok = pos[nb] >= 0
    ia, io = np.nonzero(ok)
    ib = pos[nb[ia, io]]
    a_pts = cover.cell_centers(cells[ia])
    b_pts = a_pts + offs[io] / cover.resolution
    w = straight_integrals(form, a_pts, b_pts, pieces)

    m = cells.size
    # symmetric weighted adjacency; weights stored as +w for a->b and -w for b->a
    graph = csr_matrix((np.ones(2 * ia.size), (np.r_[ia, ib], np.r_[ib, ia])), shape=(m, m))
    n_comp, labels = connected_components(graph, directed=False)
    wmap: dict[tuple[int, int], float] = {}
    for a, b, val in zip(ia.tolist(), ib.tolist(), w.tolist()):
        wmap[(a, b)] = val
        wmap[(b, a)] = -val
    f = np.full(m, np.nan)
    pred_all = -np.ones(m, dtype=np.int64)
    for comp in range(n_comp):
        root = int(np.flatnonzero(labels == comp)[0])
        order, pred = breadth_first_order(graph, root, directed=False, return_predecessors=True)
        f[root] = 0.0
        for v in order[1:]:
            p = pred[v]
            f[v] = f[p] + wmap[(int(p), int(v))]
            pred_all[v] = p
    resid = f[ia] + w - f[ib]
    bad = np.abs(resid)
    if bad.size and bad.max() > tol:
        k = int(bad.argmax())
        loop = _tree_loop(cover, cells, pred_all, int(ia[k]), int(ib[k]))
        return ExactnessResult(False, None, loop, float(resid[k]), n_comp)

    # average over the group: f o g - f is constant on each component
    acc = np.zeros(m)
    centers = cover.cell_centers(cells)
    for g in cover.presentation.group:
        img = pos[cover.cell_of_point(g.act(centers))]
        if np.any(img < 0):
            raise ValueError("region is not closed under the group")
        acc += f[img]
    return ExactnessResult(True, RegionPotential(cover, form, cells, acc / len(cover.presentation), pieces),
                           n_components=n_comp)


def _tree_loop(cover, cells, pred, a: int, b: int) -> GPath:
    def up(v):
        path = [v]
        while pred[path[-1]] >= 0:
            path.append(int(pred[path[-1]]))
        return path

    seq = up(a)[::-1] + up(b)
    centers = cover.cell_centers(cells[np.array(seq)])
    steps = np.diff(centers, axis=0)
    steps -= np.round(steps)
    lifted = centers[0] + np.vstack([np.zeros((1, cover.dim)), np.cumsum(steps, axis=0)])
    return GPath([lifted])
