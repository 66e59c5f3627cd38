"""Conley functions, Lyapunov 1-form assembly and verification.

The continuous Lyapunov function is the flow average

    L(x) = (1/S) * integral_0^S l(Phi_t x) dt

of a periodic cubic box-spline l whose coefficients come from the discrete
Conley function on boxes. Its derivative along the flow is exactly
(l(Phi_S x) - l(x)) / S, and dL is obtained from the variational equation,
so at a rest point where l is flat dL vanishes to rounding.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import csr_matrix, hstack

from .boxes import BoxCover
from .forms import BasicOneForm, CohomologyClass, EquivariantVectorField, RegionPotential, exactness_on_region
from .graph import RecurrenceReport, TransitionGraph, recurrent_nodes, strongly_connected

SIGN_MARGIN = 1e-6
VANISH_TOL = 1e-5


class ConstructionRefused(RuntimeError):
    """Raised when the form construction cannot proceed; `code` is machine readable."""

    def __init__(self, code: str, message: str, witness=None):
        super().__init__(f"{code}: {message}")
        self.code, self.message = code, message
        self.witness = witness


# ---------------------------------------------------------------- discrete Conley function

@dataclass
class DiscreteLyapunov:
    values: np.ndarray  # one value per orbit-box, in [0, 1]
    gap: float  # minimum decrease along condensation edges before smoothing
    passes: int  # smoothing passes kept
    provenance: str
    labels: np.ndarray  # SCC label of every node
    recurrent: np.ndarray  # bool mask

    def min_decrease(self, graph: TransitionGraph) -> float:
        cross = self.labels[graph.src] != self.labels[graph.dst]
        if not cross.any():
            return np.inf
        return float((self.values[graph.src[cross]] - self.values[graph.dst[cross]]).min())


def _condensation_depth(k: int, cs: np.ndarray, cd: np.ndarray) -> np.ndarray:
    """Longest path length from a source to every vertex of a DAG (Kahn order)."""
    adj = csr_matrix((np.ones(cs.size), (cs, cd)), shape=(k, k)).tocsr()
    adj.sum_duplicates()
    indeg = np.bincount(adj.indices, minlength=k)
    depth = np.zeros(k, dtype=np.int64)
    stack = list(np.flatnonzero(indeg == 0))
    seen = 0
    while stack:
        c = stack.pop()
        seen += 1
        nb = adj.indices[adj.indptr[c]:adj.indptr[c + 1]]
        if nb.size:
            depth[nb] = np.maximum(depth[nb], depth[c] + 1)
            indeg[nb] -= 1
            stack.extend(nb[indeg[nb] == 0].tolist())
    if seen != k:
        raise RuntimeError("condensation graph has a cycle; strongly connected components are inconsistent")
    return depth


def conley_function(graph: TransitionGraph, Y_boxes=None, passes: int = 2) -> DiscreteLyapunov:
    """Normalized condensation depth: sources get 1, the deepest sinks 0.

    Values are constant on every strongly connected component and drop by at
    least 1/maxdepth along each edge between components. Optional smoothing
    passes average non-recurrent boxes with their box neighbors; a pass is
    undone if some cross-component edge then decreases by less than gap/2.
    Boxes of Y_boxes are forced to share the value of the component they
    mostly belong to, so each component of Y is a level set.
    """
    n = graph.n_nodes
    k, labels = strongly_connected(n, graph.src, graph.dst)
    rec = np.zeros(n, dtype=bool)
    rec[recurrent_nodes(n, graph.src, graph.dst)] = True
    cross = labels[graph.src] != labels[graph.dst]
    depth = _condensation_depth(k, labels[graph.src[cross]], labels[graph.dst[cross]])
    top = int(depth.max()) if k else 0
    if top == 0:
        return DiscreteLyapunov(np.zeros(n), np.inf, 0, "single level", labels, rec)
    values = 1.0 - depth[labels] / top
    gap = 1.0 / top
    if Y_boxes is not None and len(Y_boxes):
        for comp in graph.cover.components(Y_boxes):
            values[comp] = np.median(values[comp])

    s, d = graph.src[cross], graph.dst[cross]
    kept = 0
    for _ in range(passes):
        new = values.copy()
        for v in np.flatnonzero(~rec):
            nb = graph.cover.adjacency[v]
            new[v] = 0.5 * values[v] + 0.5 * values[nb].mean()
        if np.all(new[s] - new[d] >= gap / 2):
            values = new
            kept += 1
        else:
            break
    return DiscreteLyapunov(values, gap, kept, f"longest-path depth over {k} components, {top} levels",
                            labels, rec)


def group_average(presentation, f):
    """x -> mean over the group of f(g x); f takes an (m, n) array of points."""
    group = list(presentation.group)

    def averaged(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return sum(f(g.act(x)) for g in group) / len(group)

    return averaged


# ---------------------------------------------------------------- smooth functions from box values

def _bspline_weights(t: np.ndarray):
    """Cubic B-spline weights and derivatives for offsets -1, 0, 1, 2."""
    t2, t3 = t * t, t * t * t
    w = np.stack([(1 - t) ** 3, 3 * t3 - 6 * t2 + 4, -3 * t3 + 3 * t2 + 3 * t + 1, t3], axis=-1) / 6.0
    dw = np.stack([-3 * (1 - t) ** 2, 9 * t2 - 12 * t, -9 * t2 + 6 * t + 3, 3 * t2], axis=-1) / 6.0
    return w, dw


class BoxSpline:
    """Periodic cubic B-spline with one coefficient per torus cell (placed at cell centers).

    Where all coefficients within two cells of x agree the spline is constant
    near x with exactly zero gradient. Group-invariant coefficients give a
    group-invariant spline because the kernel is symmetric and the group maps
    cells to cells.
    """

    def __init__(self, cover: BoxCover, cell_values: np.ndarray):
        self.cover = cover
        self.coef = np.asarray(cell_values, dtype=float).reshape((cover.resolution,) * cover.dim)

    @classmethod
    def from_nodes(cls, cover: BoxCover, node_values: np.ndarray) -> "BoxSpline":
        return cls(cover, np.asarray(node_values, dtype=float)[cover.node_of_cell])

    def evaluate(self, x, grad: bool = True):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        res, n = self.cover.resolution, self.cover.dim
        u = np.mod(x, 1.0) * res - 0.5
        i0 = np.floor(u).astype(np.int64)
        w, dw = _bspline_weights(u - i0)  # (m, n, 4)
        idx = np.mod(i0[:, :, None] + np.arange(-1, 3)[None, None, :], res)  # (m, n, 4)
        flat = idx[:, 0, :]
        for a in range(1, n):
            flat = flat[..., None] * res + idx[:, a, :].reshape((-1,) + (1,) * a + (4,))
        c = self.coef.ravel()[flat]  # (m, 4, ..., 4)
        letters = "abcdefgh"[:n]
        spec = ",".join(f"m{l}" for l in letters) + f",m{letters}->m"
        val = np.einsum(spec, *[w[:, a] for a in range(n)], c)
        if not grad:
            return val
        g = np.empty_like(x)
        for a in range(n):
            ws = [dw[:, b] * res if b == a else w[:, b] for b in range(n)]
            g[:, a] = np.einsum(spec, *ws, c)
        return val, g

    def __call__(self, x):
        return self.evaluate(x, grad=False)


class FlowAverage:
    """L(x) = (1/S) int_0^S l(Phi_t x) dt for a box-spline l, with exact flow derivative."""

    def __init__(self, field: EquivariantVectorField, spline: BoxSpline, horizon: float, step: float):
        self.field, self.spline = field, spline
        self.horizon = float(horizon)
        self.n_steps = max(1, int(np.ceil(self.horizon / step - 1e-12)))
        self.step = self.horizon / self.n_steps

    def _rhs(self, x, J):
        v = self.field(x)
        Dv = self.field.jacobian(x)
        val, g = self.spline.evaluate(x)
        return v, Dv @ J, val, np.einsum("mi,mij->mj", g, J)

    def evaluate(self, x, chunk: int = 8192):
        """Returns (L, dL, endpoint) for an (m, n) array of torus points."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        outs = [self._evaluate(x[i:i + chunk]) for i in range(0, len(x), chunk)]
        return tuple(np.concatenate([o[k] for o in outs]) for k in range(3))

    def _evaluate(self, x):
        m, n = x.shape
        h = self.step
        J = np.broadcast_to(np.eye(n), (m, n, n)).copy()
        acc = np.zeros(m)
        gacc = np.zeros((m, n))
        for _ in range(self.n_steps):
            k1 = self._rhs(x, J)
            k2 = self._rhs(x + 0.5 * h * k1[0], J + 0.5 * h * k1[1])
            k3 = self._rhs(x + 0.5 * h * k2[0], J + 0.5 * h * k2[1])
            k4 = self._rhs(x + h * k3[0], J + h * k3[1])
            x = x + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            J = J + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
            acc += h / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
            gacc += h / 6 * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3])
        return acc / self.horizon, gacc / self.horizon, x

    def value(self, x) -> np.ndarray:
        return self.evaluate(x)[0]

    def grad(self, x) -> np.ndarray:
        return self.evaluate(x)[1]

    def flow_derivative(self, x) -> np.ndarray:
        """v(L)(x) = (l(Phi_S x) - l(x)) / S."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        end = self.evaluate(x)[2]
        return (self.spline(end) - self.spline(x)) / self.horizon


# ---------------------------------------------------------------- verification

def sample_grid(cover: BoxCover, density: int = 2) -> np.ndarray:
    """density**n points per cell, offset from cell boundaries and centers."""
    k = cover.resolution * density
    axis = (np.arange(k) + 0.37) / k
    mesh = np.meshgrid(*([axis] * cover.dim), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def rest_points(field: EquivariantVectorField, cover: BoxCover, nodes, tol: float = 1e-12) -> np.ndarray:
    """Zeros of the field inside the given boxes, by Gauss-Newton from the cell centers (handles curves of zeros)."""
    cells = cover.cells_of_nodes(nodes)
    if cells.size == 0:
        return np.zeros((0, cover.dim))
    x = cover.cell_centers(cells)
    for _ in range(30):
        v = field(x)
        J = field.jacobian(x)
        dx = (np.linalg.pinv(J, rcond=1e-10) @ v[..., None])[..., 0]
        x = x - np.clip(dx, -cover.side, cover.side)
    x = np.mod(x, 1.0)
    keep = np.linalg.norm(field(x), axis=1) < tol
    keep &= np.isin(cover.node_of_point(x), np.asarray(list(nodes)))
    pts = x[keep]
    if len(pts) == 0:
        return pts
    # one representative per distinct point
    key = np.round(np.stack([cover.presentation.canonical(p) for p in pts]) * 1e8).astype(np.int64) % 10**8
    _, first = np.unique(key, axis=0, return_index=True)
    return pts[np.sort(first)]


@dataclass
class CheckResult:
    name: str
    passed: bool
    margin: float
    witness: list | None = None
    detail: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "margin": self.margin,
                "witness": self.witness, "detail": self.detail}


@dataclass
class VerificationReport:
    checks: list
    n_samples: int
    n_y_samples: int

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "n_samples": self.n_samples, "n_y_samples": self.n_y_samples,
                "checks": [c.to_dict() for c in self.checks]}


def _worst(values: np.ndarray, pts: np.ndarray, largest: bool = True):
    if values.size == 0:
        return None, None
    i = int(np.argmax(values) if largest else np.argmin(values))
    return float(values[i]), pts[i].tolist()


def verify_lyapunov(field: EquivariantVectorField, form: BasicOneForm, cover: BoxCover, Y_boxes, U_boxes, *,
                    y_samples: np.ndarray | None = None, density: int = 2, margin: float = SIGN_MARGIN,
                    tol: float = VANISH_TOL, points: np.ndarray | None = None, iota: np.ndarray | None = None,
                    pieces: int | None = None) -> VerificationReport:
    """Sampled checks of the Lyapunov 1-form conditions for the pair (flow, Y).

    (1)  contraction < -margin off U_boxes and < 0 off Y_boxes;
    (2)  the form is exact on U_boxes and its potential has gradient below tol on Y samples;
    (2') the coefficients have norm below tol on Y samples.
    Y samples default to the rest points inside Y_boxes, or to the grid points
    in Y_boxes when there are none.
    """
    Y = np.asarray(sorted(set(map(int, Y_boxes))), dtype=np.int64)
    U = np.asarray(sorted(set(map(int, U_boxes))), dtype=np.int64)
    if np.setdiff1d(Y, U).size:
        raise ValueError("Y_boxes must be contained in U_boxes")
    pts = sample_grid(cover, density) if points is None else points
    if iota is None:
        iota = np.concatenate([np.sum(form(c) * field(c), axis=1) for c in np.array_split(pts, max(1, len(pts) // 8192))])
    node = cover.node_of_point(pts)
    inU, inY = np.isin(node, U), np.isin(node, Y)
    checks = []

    off_u = ~inU
    worst, wit = _worst(iota[off_u], pts[off_u])
    ok_u = worst is None or worst < -margin
    off_y = ~inY
    worst_y, wit_y = _worst(iota[off_y], pts[off_y])
    ok_y = worst_y is None or worst_y < 0
    checks.append(CheckResult("(1) negative off U", bool(ok_u), -worst if worst is not None else np.inf, wit,
                              f"max contraction {worst} over {int(off_u.sum())} samples"))
    checks.append(CheckResult("(1) negative off Y", bool(ok_y), -worst_y if worst_y is not None else np.inf, wit_y,
                              f"max contraction {worst_y} over {int(off_y.sum())} samples"))

    if y_samples is None:
        y_samples = rest_points(field, cover, Y) if Y.size else np.zeros((0, cover.dim))
        if len(y_samples) == 0 and Y.size:
            y_samples = pts[inY]
    y_samples = np.atleast_2d(np.asarray(y_samples, dtype=float)).reshape(-1, cover.dim)

    # a form carrying a closed base plus a known primitive is exact where its base is
    base = getattr(form, "closed_base", form)
    ex = exactness_on_region(base, cover, U, pieces=pieces) if U.size else None
    if ex is not None and not ex.exact:
        checks.append(CheckResult("(2) exact near Y", False, -abs(ex.period or 0.0), None,
                                  f"nonzero period {ex.period} on a loop in U"))
    else:
        if len(y_samples) and ex is not None:
            gn = np.linalg.norm(form(y_samples), axis=1)
            gn = np.where(ex.potential.inside(y_samples), gn, np.inf)
        else:
            gn = np.zeros(0)
        worst_g, wit_g = _worst(gn, y_samples)
        ok = worst_g is None or worst_g < tol
        checks.append(CheckResult("(2) exact near Y", bool(ok), tol - (worst_g or 0.0), wit_g,
                                  f"max potential gradient {worst_g} on {len(y_samples)} Y samples"))

    cn = np.linalg.norm(form(y_samples), axis=1) if len(y_samples) else np.zeros(0)
    worst_c, wit_c = _worst(cn, y_samples)
    ok = worst_c is None or worst_c < tol
    checks.append(CheckResult("(2') vanishes on Y", bool(ok), tol - (worst_c or 0.0), wit_c,
                              f"max coefficient norm {worst_c} on {len(y_samples)} Y samples"))
    return VerificationReport(checks, len(pts), len(y_samples))


def boxes_near(cover: BoxCover, points, width: float = 0.0) -> np.ndarray:
    """Boxes containing any of the points (all group images), fattened by width."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if len(pts) == 0:
        return np.zeros(0, dtype=np.int64)
    nodes = np.unique(cover.node_of_point(pts))
    return cover.fatten(nodes, width) if width > 0 else nodes


# ---------------------------------------------------------------- construction of the 1-form

def spline_design(cover: BoxCover, x: np.ndarray):
    """Sparse matrices mapping per-node spline coefficients to values and to each partial derivative at x."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    res, n, m = cover.resolution, cover.dim, len(x)
    u = np.mod(x, 1.0) * res - 0.5
    i0 = np.floor(u).astype(np.int64)
    w, dw = _bspline_weights(u - i0)
    rows, cols, vals = [], [], []
    dvals = [[] for _ in range(n)]
    for offs in itertools.product(range(4), repeat=n):
        multi = np.stack([i0[:, a] + offs[a] - 1 for a in range(n)], axis=1)
        cols.append(cover.node_of_cell[cover.flat_index(multi)])
        rows.append(np.arange(m))
        ws = [w[:, a, offs[a]] for a in range(n)]
        vals.append(np.prod(ws, axis=0))
        for a in range(n):
            term = dw[:, a, offs[a]] * res
            for b in range(n):
                if b != a:
                    term = term * ws[b]
            dvals[a].append(term)
    r, c = np.concatenate(rows), np.concatenate(cols)
    shape = (m, cover.n_nodes)
    value = csr_matrix((np.concatenate(vals), (r, c)), shape=shape)
    grads = [csr_matrix((np.concatenate(d), (r, c)), shape=shape) for d in dvals]
    return value, grads


@dataclass
class SignCorrection:
    """h as an invariant cubic spline on a coarse cover; omega_1 = omega - dh."""

    spline: BoxSpline | None
    worst_before: float
    worst_after: float

    def potential(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.zeros(len(x)) if self.spline is None else self.spline(x)

    def grad(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.zeros_like(x) if self.spline is None else self.spline.evaluate(x)[1]


def sign_correction(field: EquivariantVectorField, form: BasicOneForm, cover: BoxCover, W1, pts: np.ndarray,
                    margin: float = SIGN_MARGIN, coarse: tuple = (8, 16, 32), bound: float = 10.0) -> SignCorrection:
    """Find an invariant h with contraction of (form - dh) < -margin at the W1 samples.

    h ranges over group-invariant cubic splines on coarse covers (trying each
    resolution in turn); the worst corrected contraction is minimized by a
    linear program with coefficients bounded by `bound`. Raises
    ConstructionRefused when no resolution reaches -margin.
    """
    node = cover.node_of_point(pts)
    inW = np.isin(node, np.asarray(list(W1), dtype=np.int64))
    x = pts[inW]
    v = field(x)
    iota = np.sum(form(x) * v, axis=1)
    before = float(iota.max()) if iota.size else -np.inf
    if before < -10 * margin:
        return SignCorrection(None, before, before)
    best = (np.inf, None)
    for m in coarse:
        if m > cover.resolution:
            break
        cc = BoxCover(cover.presentation, m)
        _, grads = spline_design(cc, x)
        A = sum(g.multiply(v[:, [a]]) for a, g in enumerate(grads)).tocsr()  # v(b_k) at samples
        K = cc.n_nodes
        c = np.zeros(K + 1)
        c[-1] = 1.0
        A_ub = hstack([-A, csr_matrix(-np.ones((len(x), 1)))]).tocsr()
        res = linprog(c, A_ub=A_ub, b_ub=-iota, bounds=[(-bound, bound)] * K + [(None, None)], method="highs")
        if res.status != 0:
            continue
        after = iota - A @ res.x[:K]
        worst = float(after.max())
        if worst < best[0]:
            best = (worst, BoxSpline.from_nodes(cc, res.x[:K]), after)
        if worst < -margin:
            break
    worst, spline = best[0], best[1]
    if spline is None or worst >= -margin:
        wit = None if spline is None else x[int(np.argmax(best[2]))].tolist()
        raise ConstructionRefused("SIGN_CORRECTION_INFEASIBLE",
                                  f"best corrected contraction on W1 is {worst:.3g}, not below -{margin}", wit)
    return SignCorrection(spline, before, worst)


class DecomposedForm(BasicOneForm):
    """closed_base + d(primitive); exactness questions reduce to the base."""

    def __init__(self, presentation, closed_base: BasicOneForm, primitive, label: str = ""):
        self.closed_base, self.primitive = closed_base, primitive
        super().__init__(presentation, coeff_fn=lambda x: closed_base(x) + primitive.grad(x),
                         curl_fn=closed_base.curl, label=label, validate=False)


class CutoffPotential:
    """x -> chi(x) h1(x), with chi a box-spline cutoff supported where h1 is defined."""

    def __init__(self, chi: BoxSpline, h1: RegionPotential | None, form1: BasicOneForm):
        self.chi, self.h1, self.form1 = chi, h1, form1

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros(len(x))
        if self.h1 is None:
            return out
        val = self.chi(x)
        live = val != 0
        if np.any(live):
            out[live] = val[live] * self.h1(x[live])
        return out

    def grad(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros_like(x)
        if self.h1 is None:
            return out
        val, g = self.chi.evaluate(x)
        live = (val != 0) | np.any(g != 0, axis=1)
        if np.any(live):
            xl = x[live]
            out[live] = val[live, None] * self.form1(xl) + self.h1(xl)[:, None] * g[live]
        return out


@dataclass
class LyapunovCertificate:
    omega2: BasicOneForm
    W1: np.ndarray
    W2: np.ndarray
    Y_boxes: np.ndarray
    U_boxes: np.ndarray
    h1: RegionPotential | None
    a_used: float
    a0: float
    checks: VerificationReport
    conley: DiscreteLyapunov
    L: FlowAverage
    correction: SignCorrection
    y_samples: np.ndarray
    grid: np.ndarray = dc_field(repr=False)
    iota1: np.ndarray = dc_field(repr=False)  # contraction of omega_1 - d(chi h1) on the grid
    vL: np.ndarray = dc_field(repr=False)  # v(L) on the grid

    @property
    def passed(self) -> bool:
        return self.checks.passed

    def contraction_with(self, a: float) -> np.ndarray:
        return self.iota1 + a * self.vL

    def to_json(self, table: int = 32) -> str:
        cover = self.L.spline.cover
        axis = (np.arange(table) + 0.5) / table
        mesh = np.stack([m.ravel() for m in np.meshgrid(*([axis] * cover.dim), indexing="ij")], axis=1)
        Lvals = self.L.value(mesh) if cover.dim <= 2 else np.zeros(0)
        return json.dumps({
            "a_used": self.a_used, "a0": self.a0, "horizon": self.L.horizon,
            "W1": self.W1.tolist(), "W2": self.W2.tolist(),
            "Y_boxes": self.Y_boxes.tolist(), "U_boxes": self.U_boxes.tolist(),
            "y_samples": np.asarray(self.y_samples).tolist(),
            "conley": {"gap": self.conley.gap, "passes": self.conley.passes,
                       "provenance": self.conley.provenance},
            "sign_correction": {"worst_before": self.correction.worst_before,
                                "worst_after": self.correction.worst_after},
            "checks": self.checks.to_dict(),
            "L_table": {"size": table, "values": Lvals.tolist()},
        })


class _Primitive:
    """a L - chi h1."""

    def __init__(self, cut: CutoffPotential, L: FlowAverage, a: float):
        self.cut, self.L, self.a = cut, L, a

    def __call__(self, x) -> np.ndarray:
        return self.a * self.L.value(x) - self.cut(x)

    def grad(self, x) -> np.ndarray:
        return self.a * self.L.grad(x) - self.cut.grad(x)


def _cells_value_map(cover: BoxCover, values: np.ndarray, groups) -> np.ndarray:
    vals = values.copy()
    for nodes, level in groups:
        vals[nodes] = level
    return vals


def construct_lyapunov_form(graph: TransitionGraph, report: RecurrenceReport, *, force: bool = False,
                            width: float | None = None, horizons=(2, 4, 8), density: int = 2,
                            margin: float = SIGN_MARGIN, tol: float = VANISH_TOL, a_margin: float = 0.1,
                            y_samples: np.ndarray | None = None) -> LyapunovCertificate:
    """Assemble omega_2 = omega_1 - d(chi h1) + a dL and verify it.

    omega_1 is the class representative corrected on W1 (near Cxi) so that its
    contraction is negative there; h1 is a primitive of omega_1 near Rxi, cut
    off smoothly; L is the flow average of the box-spline Conley function,
    made flat near Rxi and Cxi. Refusals raise ConstructionRefused with codes
    CXI_NOT_CLOSED, SIGN_CORRECTION_INFEASIBLE, EXACTNESS_FAIL,
    NEIGHBORHOODS_OVERLAP or CONLEY_DECREASE_FAIL.
    """
    cover, field, cls = graph.cover, graph.field, graph.cls
    if field is None or cls is None:
        raise ValueError("graph carries no field or class; rebuild or pass them to load_graph")
    form = cls.representative
    rxi, cxi = np.asarray(report.Rxi_boxes), np.asarray(report.Cxi_boxes)
    if not report.Cxi_closed:
        nb = np.zeros(cover.n_nodes, dtype=bool)
        for v in cxi:
            nb[cover.adjacency_with_self[v]] = True
        touch = np.intersect1d(np.flatnonzero(nb), rxi)
        raise ConstructionRefused("CXI_NOT_CLOSED", "boxes of Cxi accumulate on Rxi",
                                  cover.node_centers[touch[:1]].tolist())
    if not report.condition_b_holds and not force:
        raise ConstructionRefused("SIGN_CORRECTION_INFEASIBLE",
                                  f"a cycle through Cxi pairs to {report.max_cycle_pairing} > -1")
    diam = cover.diameter
    width = 2 * diam if width is None else width
    W1 = cover.fatten(cxi, width) if cxi.size else np.zeros(0, dtype=np.int64)
    W2 = cover.fatten(rxi, width) if rxi.size else np.zeros(0, dtype=np.int64)
    chi_one = cover.fatten(W2, diam) if W2.size else W2
    region = cover.fatten(chi_one, 1.5 * diam) if W2.size else W2
    overlap = np.intersect1d(W1, region)
    if overlap.size:
        raise ConstructionRefused("NEIGHBORHOODS_OVERLAP", "the neighborhoods of Rxi and Cxi intersect",
                                  cover.node_centers[overlap[:1]].tolist())

    pts = sample_grid(cover, density)
    corr = sign_correction(field, form, cover, W1, pts, margin=margin) if W1.size else SignCorrection(None, -np.inf, -np.inf)
    pres = cover.presentation
    form1 = BasicOneForm(pres, coeff_fn=lambda x: form(x) - corr.grad(x), label="omega_1", validate=False)

    h1 = None
    if region.size:
        ex = exactness_on_region(form1, cover, region)
        if not ex.exact:
            raise ConstructionRefused("EXACTNESS_FAIL", f"the class has period {ex.period} on a loop near Rxi",
                                      None if ex.violating_loop is None else [s.tolist() for s in ex.violating_loop.segments[:1]])
        h1 = ex.potential
    chi_cells = np.zeros(cover.n_nodes)
    chi_cells[chi_one] = 1.0
    chi = BoxSpline.from_nodes(cover, chi_cells)
    cut = CutoffPotential(chi, h1, form1)

    conley = conley_function(graph)
    flats = []
    for part in (rxi, cxi):
        for comp in cover.components(part):
            flats.append((cover.fatten(comp, diam), float(np.median(conley.values[comp]))))
    spline = BoxSpline.from_nodes(cover, _cells_value_map(cover, conley.values, flats))
    Yflat = cover.fatten(rxi, diam) if rxi.size else np.zeros(0, dtype=np.int64)

    node = cover.node_of_point(pts)
    outside = ~np.isin(node, np.union1d(W1, W2))
    chunks = np.array_split(np.arange(len(pts)), max(1, len(pts) // 8192))
    v_pts = field(pts)
    iota1 = np.concatenate([np.sum((form1(pts[c]) - cut.grad(pts[c])) * v_pts[c], axis=1) for c in chunks])
    # the variational sums are the exact gradient of the discretized average, so the step only
    # affects how closely v(L) tracks (l(Phi_S x) - l(x)) / S
    step = graph.params.step
    L = vL = None
    for mult in horizons:
        cand = FlowAverage(field, spline, mult * graph.params.T_edge, step)
        dL = cand.grad(pts)
        cvL = np.sum(dL * v_pts, axis=1)
        if not outside.any() or cvL[outside].max() < 0:
            L, vL = cand, cvL
            break
    if L is None:
        i = int(np.argmax(np.where(outside, cvL, -np.inf)))
        raise ConstructionRefused("CONLEY_DECREASE_FAIL", f"v(L) = {cvL[i]:.3g} >= 0 away from R at the longest horizon",
                                  pts[i].tolist())

    a0 = 1.0
    if outside.any():
        a0 = 1.0 + float(np.max(np.abs(iota1[outside]) / np.abs(vL[outside])))
    a = max(a0, 1.0) + a_margin

    omega2 = DecomposedForm(pres, form1, _Primitive(cut, L, a), label="omega_2")
    if y_samples is None:
        y_samples = rest_points(field, cover, rxi) if rxi.size else np.zeros((0, cover.dim))
    checks = verify_lyapunov(field, omega2, cover, Yflat, W2, y_samples=y_samples, margin=margin, tol=tol,
                             points=pts, iota=iota1 + a * vL)
    return LyapunovCertificate(omega2, W1, W2, Yflat, W2, h1, a, a0, checks, conley, L, corr,
                               np.asarray(y_samples), pts, iota1, vL)
