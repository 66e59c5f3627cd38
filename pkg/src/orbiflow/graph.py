"""Box transition graphs: chain recurrence, class-relative recurrence, Ulam measures.

Edges run from the representative center of a source box, through a seed
point and its flow segment of length T_edge, to the lifted center of a cell
within delta of the image. Each edge stores the integral of the form along
that path and its exact homology class (lifted displacement projected onto
the group-invariant subspace), so cycle pairings are exact periods.
"""
from __future__ import annotations

import itertools
import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix, identity
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve
from scipy.stats import qmc

from .boxes import BoxCover
from .flow import integrate_many
from .forms import CohomologyClass, EquivariantVectorField, compute_scale, contraction, straight_integrals
from .orbifold import QuotientPresentation

W_TOL = 1e-3
_GL3_X, _GL3_W = np.polynomial.legendre.leggauss(3)


class ScaleError(ValueError):
    pass


def worker_count(requested: int | None = None) -> int:
    cap = int(os.environ.get("ORBIFLOW_THREADS", "0") or 0)
    n = requested or os.cpu_count() or 1
    return max(1, min(n, cap) if cap > 0 else n)


def invariant_projection(pres: QuotientPresentation) -> np.ndarray:
    return np.mean([g.matrix for g in pres.group], axis=0)


@dataclass
class ClassGeometry:
    """Where closed walks must land to lift to closed walks in the period covering.

    `constraints` has orthonormal rows spanning the invariant directions on
    which the periods see no integer relation; a walk lifts closed iff its
    projected class is annihilated by them. `functional` is an integer row
    proportional to the periods when there is exactly one constraint.
    """

    periods: np.ndarray
    projection: np.ndarray
    constraints: np.ndarray
    functional: np.ndarray | None

    @property
    def n_constraints(self) -> int:
        return self.constraints.shape[0]


def class_geometry(cls: CohomologyClass, height: int = 12) -> ClassGeometry:
    pres = cls.presentation
    n = pres.dim
    P = invariant_projection(pres)
    p = np.asarray(cls.period_vector, dtype=float)
    u, s, _ = np.linalg.svd(P)
    inv_basis = u[:, s > 1e-9].T
    rel = []
    scale = max(1.0, np.abs(p).max())
    for z in itertools.product(range(-height, height + 1), repeat=n):
        z = np.array(z, dtype=float)
        if not z.any():
            continue
        if abs(p @ z) <= 1e-9 * scale * max(1.0, np.abs(z).max()):
            pz = P @ z
            if np.linalg.norm(pz) > 1e-12:
                rel.append(pz)
    if rel:
        ur, sr, _ = np.linalg.svd(np.array(rel).T)
        kern = ur[:, sr > 1e-9].T
    else:
        kern = np.zeros((0, n))
    comp = inv_basis - (inv_basis @ kern.T) @ kern if kern.size else inv_basis
    if comp.size:
        uc, sc, vc = np.linalg.svd(comp)
        cons = vc[: int(np.sum(sc > 1e-9))]
    else:
        cons = np.zeros((0, n))
    functional = None
    if cons.shape[0] == 1:
        c = cons[0] * np.sign(cons[0] @ p if abs(cons[0] @ p) > 0 else 1.0)
        c = c / np.abs(c[np.abs(c) > 1e-9]).min()
        for k in range(1, height + 1):
            if np.allclose(k * c, np.round(k * c), atol=1e-7):
                functional = np.round(k * c) + 0.0
                break
        if functional is None:
            functional = c + 0.0
    return ClassGeometry(p, P, cons, functional)


@dataclass
class GraphParams:
    resolution: int
    T_edge: float
    delta: float
    samples: int
    step: float
    seed: int = 0
    w_tol: float = W_TOL

    def to_dict(self) -> dict:
        return dict(resolution=self.resolution, T_edge=self.T_edge, delta=self.delta,
                    samples=self.samples, step=self.step, seed=self.seed, w_tol=self.w_tol)


@dataclass
class TransitionGraph:
    cover: BoxCover
    params: GraphParams
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray  # integral of the representative along the edge path
    weight_spread: np.ndarray  # max - min over the samples realizing the edge
    klass: np.ndarray  # (E, n) projected lifted displacement, exact multiples of 1/(res |Gamma|)
    count: np.ndarray  # samples realizing the edge
    ulam: csr_matrix  # sample counts, source node -> node containing the image
    node_iota: np.ndarray  # mean of the contraction over each box's seeds
    geometry: ClassGeometry
    field: EquivariantVectorField | None = dc_field(default=None, repr=False)
    cls: CohomologyClass | None = dc_field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.cover.n_nodes

    @property
    def n_edges(self) -> int:
        return self.src.size

    @property
    def pairing(self) -> np.ndarray:
        """Period of each edge's class; sums to the exact pairing over any cycle."""
        return self.klass @ self.geometry.periods

    @property
    def class_units(self) -> np.ndarray:
        scale = self.cover.resolution * len(self.cover.presentation)
        return np.round(self.klass * scale).astype(np.int64)

    def adjacency(self) -> csr_matrix:
        n = self.n_nodes
        return csr_matrix((np.ones(self.n_edges), (self.src, self.dst)), shape=(n, n))


def _seed_offsets(dim: int, samples: int, seed: int) -> np.ndarray:
    sob = qmc.Sobol(d=dim, scramble=True, seed=seed)
    m = int(np.log2(samples))
    if 2**m == samples:
        return sob.random_base2(m)
    return sob.random(samples)


def _short_integrals(form, a, b) -> np.ndarray:
    d = b - a
    t = 0.5 * (_GL3_X + 1.0)
    pts = a[:, None, :] + t[None, :, None] * d[:, None, :]
    w = form(pts.reshape(-1, a.shape[1])).reshape(pts.shape)
    return 0.5 * np.einsum("q,pqn,pn->p", _GL3_W, w, d)


def _integrate_chunks(field, x0, T, step, form, workers):
    chunks = np.array_split(np.arange(len(x0)), max(1, min(workers * 4, len(x0) // 256 + 1)))
    if workers == 1:
        parts = [integrate_many(field, x0[c], T, step, form) for c in chunks]
    else:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(lambda c: integrate_many(field, x0[c], T, step, form), chunks))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def build_graph(field: EquivariantVectorField, cls: CohomologyClass, resolution: int, T_edge: float,
                delta: float | None = None, samples: int = 16, step: float | None = None, seed: int = 0,
                w_tol: float = W_TOL, workers: int | None = None) -> TransitionGraph:
    pres = field.presentation
    cover = BoxCover(pres, resolution)
    n, res = pres.dim, cover.resolution
    if delta is None:
        delta = 1.0001 * cover.diameter
    if delta < cover.diameter * (1 - 1e-9):
        raise ScaleError(f"delta {delta} is below the box diameter {cover.diameter}")
    _, d_scale = compute_scale(cls)
    if delta > d_scale:
        raise ScaleError(f"delta {delta} exceeds the scale {d_scale} of the class")
    if step is None:
        step = min(T_edge / 10.0, 1e-2)
    params = GraphParams(res, float(T_edge), float(delta), int(samples), float(step), int(seed), float(w_tol))
    form = cls.representative
    workers = worker_count(workers)

    N, S = cover.n_nodes, samples
    offs = _seed_offsets(n, S, seed)
    base = cover.multi_index(cover.node_rep_cell)
    x0 = ((base[:, None, :] + offs[None, :, :]) / res).reshape(-1, n)
    owner = np.repeat(np.arange(N), S)
    centers = cover.node_centers
    y, flow_int = _integrate_chunks(field, x0, T_edge, step, form, workers)
    start_corr = _short_integrals(form, centers[owner], x0)
    iota = contraction(field, form)(x0)
    node_iota = iota.reshape(N, S).mean(axis=1)

    y_mod = np.mod(y, 1.0)
    ulam = coo_matrix((np.ones(N * S), (owner, cover.node_of_point(y_mod))), shape=(N, N)).tocsr()

    reach = int(np.ceil(delta * res)) + 1
    cand_offs = np.array(list(itertools.product(range(-reach, reach + 1), repeat=n)))
    gap = np.maximum(np.abs(cand_offs) - 1, 0) / res
    cand_offs = cand_offs[np.linalg.norm(gap, axis=1) < delta + 1.0 / res]
    P = invariant_projection(pres)
    unit = res * len(pres)

    rows = []
    for chunk in np.array_split(np.arange(N * S), max(1, (N * S) // 20000)):
        ym = y_mod[chunk]
        cell = np.minimum(np.floor(ym * res).astype(np.int64), res - 1)
        cand = cell[:, None, :] + cand_offs[None, :, :]
        ctr = (cand + 0.5) / res
        gap = np.maximum(np.abs(ym[:, None, :] - ctr) - 0.5 / res, 0.0)
        ok = np.linalg.norm(gap, axis=-1) < delta
        si, ci = np.nonzero(ok)
        samp = chunk[si]
        lifted_end = y[samp] - ym[si] + ctr[si, ci]
        tgt = cover.node_of_cell[cover.flat_index(cand[si, ci])]
        disp = lifted_end - centers[owner[samp]]
        key = np.round(disp @ P.T * unit).astype(np.int64)
        w = start_corr[samp] + flow_int[samp] + _short_integrals(form, y[samp], lifted_end)
        rows.append((owner[samp], tgt, key, w))
    src = np.concatenate([r[0] for r in rows])
    dst = np.concatenate([r[1] for r in rows])
    key = np.concatenate([r[2] for r in rows])
    w = np.concatenate([r[3] for r in rows])
    table = np.column_stack([src, dst, key])
    uniq, inv, cnt = np.unique(table, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    wsum = np.bincount(inv, weights=w, minlength=len(uniq))
    wmax = np.full(len(uniq), -np.inf)
    wmin = np.full(len(uniq), np.inf)
    np.maximum.at(wmax, inv, w)
    np.minimum.at(wmin, inv, w)
    return TransitionGraph(
        cover=cover, params=params, src=uniq[:, 0], dst=uniq[:, 1], weight=wsum / cnt,
        weight_spread=wmax - wmin, klass=uniq[:, 2:].astype(float) / unit, count=cnt,
        ulam=ulam, node_iota=node_iota, geometry=class_geometry(cls), field=field, cls=cls)


# ---------------------------------------------------------------- cycles and SCCs

def strongly_connected(n: int, src: np.ndarray, dst: np.ndarray) -> tuple[int, np.ndarray]:
    from scipy.sparse.csgraph import connected_components

    m = csr_matrix((np.ones(src.size), (src, dst)), shape=(n, n))
    return connected_components(m, directed=True, connection="strong")


def recurrent_nodes(n: int, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Nodes lying on some directed cycle: members of SCCs with an internal edge."""
    k, labels = strongly_connected(n, src, dst)
    internal = labels[src] == labels[dst]
    good = np.zeros(k, dtype=bool)
    good[labels[src[internal]]] = True
    return np.flatnonzero(good[labels])


@dataclass
class CycleMean:
    eta: float  # maximum cycle mean
    potential: np.ndarray  # x with x_u >= w_e - eta + x_v, equality on policy edges
    cycle: np.ndarray  # edge indices of a cycle attaining eta


def max_cycle_mean(n: int, src: np.ndarray, dst: np.ndarray, w: np.ndarray, max_iter: int = 10000) -> CycleMean:
    """Maximum cycle mean of a strongly connected digraph by policy iteration (Howard).

    Every node must have an outgoing edge. Returns the value, a potential
    certifying it and one optimal cycle.
    """
    w = np.asarray(w, dtype=float)
    if np.bincount(src, minlength=n).min() == 0:
        raise ValueError("every node needs an outgoing edge")
    tol = 1e-12 * max(1.0, np.abs(w).max(initial=0.0))
    order = np.lexsort((w, src))
    last = np.r_[np.flatnonzero(np.diff(src[order])), order.size - 1]
    policy = order[last]
    for _ in range(max_iter):
        eta, x, cyc = _evaluate_policy(n, policy, dst, w)
        # first try to reach cycles of larger mean
        cand = eta[dst]
        order = np.lexsort((cand, src))
        last = np.r_[np.flatnonzero(np.diff(src[order])), order.size - 1]
        best = order[last]
        better = cand[best] > eta + tol
        if better.any():
            policy = np.where(better, best, policy)
            continue
        val = w - eta[src] + x[dst]
        val = np.where(np.abs(eta[dst] - eta[src]) <= tol, val, -np.inf)
        order = np.lexsort((val, src))
        last = np.r_[np.flatnonzero(np.diff(src[order])), order.size - 1]
        best = order[last]
        better = val[best] > x + tol * max(1.0, np.abs(x).max(initial=0.0))
        if not better.any():
            k = int(np.argmax(eta))
            return CycleMean(float(eta.max()), x, cyc[k])
        policy = np.where(better, best, policy)
    raise RuntimeError("policy iteration did not converge")


def _evaluate_policy(n, policy, dst, w):
    succ = dst[policy]
    state = np.zeros(n, dtype=np.int8)  # 0 new, 1 on stack, 2 done
    eta = np.zeros(n)
    x = np.zeros(n)
    cyc_of = [None] * n
    for s in range(n):
        if state[s]:
            continue
        path = []
        u = s
        while state[u] == 0:
            state[u] = 1
            path.append(u)
            u = int(succ[u])
        if state[u] == 1:  # new cycle closed at u
            i = path.index(u)
            cyc_nodes = path[i:]
            edges = policy[cyc_nodes]
            mean = float(w[edges].mean())
            x[u] = 0.0
            for v in reversed(cyc_nodes[1:]):
                x[v] = w[policy[v]] - mean + x[succ[v]]
            cyc_arr = np.array(edges)
            for v in cyc_nodes:
                eta[v] = mean
                cyc_of[v] = cyc_arr
                state[v] = 2
            path = path[:i]
        for v in reversed(path):
            t = succ[v]
            eta[v] = eta[t]
            x[v] = w[policy[v]] - eta[t] + x[t]
            cyc_of[v] = cyc_of[t]
            state[v] = 2
    return eta, x, cyc_of


def _sub(nodes: np.ndarray, src, dst, n_total: int):
    """Relabel the edges with both ends in `nodes` to 0..len(nodes)-1."""
    pos = -np.ones(n_total, dtype=np.int64)
    pos[nodes] = np.arange(nodes.size)
    keep = np.flatnonzero((pos[src] >= 0) & (pos[dst] >= 0))
    return keep, pos[src[keep]], pos[dst[keep]]


def zero_class_nodes(n: int, src: np.ndarray, dst: np.ndarray, values: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Nodes on a closed walk whose summed edge values vanish.

    `values` has shape (E, m). With m = 0 every recurrent node qualifies.
    With m = 1 the test is exact: both signs of cycles present (the weights
    of closed walks through a node then form a group containing 0) or, for
    one sign, the node lies on a cycle of tight edges for an optimal
    potential. With m >= 2 a separating direction is tried first; otherwise
    max-support zero circulations are refined until their support is
    strongly connected.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    m = values.shape[1]
    k, labels = strongly_connected(n, src, dst)
    # local index of every node inside its component
    order = np.argsort(labels, kind="stable")
    starts = np.searchsorted(labels[order], np.arange(k + 1))
    local = np.empty(n, dtype=np.int64)
    local[order] = np.arange(n) - starts[labels[order]]
    intra = np.flatnonzero(labels[src] == labels[dst])
    intra = intra[np.argsort(labels[src[intra]], kind="stable")]
    comp_of_edge = labels[src[intra]]
    bounds = np.searchsorted(comp_of_edge, np.arange(k + 1))
    out = []
    for comp in np.unique(comp_of_edge):
        nodes = order[starts[comp]:starts[comp + 1]]
        keep = intra[bounds[comp]:bounds[comp + 1]]
        s, d = local[src[keep]], local[dst[keep]]
        if m == 0:
            out.append(nodes)
            continue
        vals = values[keep]
        if m == 1:
            out.append(nodes[_zero_nodes_one(nodes.size, s, d, vals[:, 0], tol)])
        else:
            out.append(nodes[_zero_nodes_multi(nodes.size, s, d, vals, tol)])
    return np.sort(np.concatenate(out)) if out else np.zeros(0, dtype=np.int64)


def _zero_nodes_one(n, s, d, w, tol):
    hi = max_cycle_mean(n, s, d, w)
    lo = max_cycle_mean(n, s, d, -w)
    has_pos, has_neg = hi.eta > tol, lo.eta > tol
    if has_pos == has_neg:  # both signs, or every cycle vanishes
        return np.arange(n)
    cm, ww = (lo, -w) if has_pos else (hi, w)  # now every cycle of ww is <= 0
    if cm.eta < -tol:
        return np.zeros(0, dtype=np.int64)
    x = cm.potential
    scale = max(1.0, np.abs(x).max(initial=0.0))
    tight = np.abs(x[s] - ww + cm.eta - x[d]) <= max(tol, 1e-9 * scale)
    return recurrent_nodes(n, s[tight], d[tight])


def _zero_nodes_multi(n, s, d, vals, tol):
    """Exact for m >= 2: zero closed walks are zero circulations with strongly connected support.

    The max-support zero circulation contains every zero closed walk. If its
    support is strongly connected an Euler tour of a scaled integer version is
    one such walk through all its nodes; otherwise each strong component of the
    support is solved again on its own.
    """
    dirs = [vals.mean(axis=0)]
    for i in range(vals.shape[1]):
        e = np.zeros(vals.shape[1])
        e[i] = 1.0
        dirs += [e, -e]
    for c in dirs:
        if np.linalg.norm(c) == 0:
            continue
        cw = vals @ (c / np.linalg.norm(c))
        if np.bincount(s, minlength=n).min() > 0 and max_cycle_mean(n, s, d, -cw).eta < -tol:
            return np.zeros(0, dtype=np.int64)  # every cycle strictly positive along c
    used = _zero_circulation_support(n, s, d, vals)
    if not used.any():
        return np.zeros(0, dtype=np.int64)
    su, du, vu = s[used], d[used], vals[used]
    k, lab = strongly_connected(n, su, du)
    comps = np.unique(lab[su])
    if comps.size == 1:
        return np.unique(np.r_[su, du])
    out = []
    for c in comps:
        sel = lab[su] == c
        nodes = np.flatnonzero(lab == c)
        keep, ls, ld = _sub(nodes, su[sel], du[sel], n)
        out.append(nodes[_zero_nodes_multi(nodes.size, ls, ld, vu[sel][keep], tol)])
    return np.unique(np.concatenate(out))


def _zero_circulation_support(n, s, d, vals):
    """Edges carrying flow in a zero-valued circulation of maximum support (LP)."""
    from scipy.optimize import linprog
    from scipy.sparse import hstack, identity, vstack

    E, m = vals.shape
    inc = csr_matrix((np.r_[np.ones(E), -np.ones(E)], (np.r_[s, d], np.r_[np.arange(E), np.arange(E)])),
                     shape=(n, E))
    a_eq = hstack([vstack([inc, csr_matrix(vals.T)]), csr_matrix((n + m, E))])
    a_ub = hstack([-identity(E), identity(E)])  # t - f <= 0
    c = np.r_[np.zeros(E), -np.ones(E)]
    bounds = [(0, None)] * E + [(0, 1)] * E
    res = linprog(c, A_ub=a_ub, b_ub=np.zeros(E), A_eq=a_eq, b_eq=np.zeros(n + m), bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"circulation LP failed: {res.message}")
    return res.x[E:] > 0.5


# ---------------------------------------------------------------- recurrence report

@dataclass
class RecurrenceReport:
    R_boxes: np.ndarray
    Rxi_boxes: np.ndarray
    Cxi_boxes: np.ndarray
    Cxi_closed: bool
    min_cycle_pairing: float | None
    max_cycle_pairing: float | None
    lambda_estimate: float | None
    condition_b_holds: bool
    class_constraints: int = 0
    warnings: list = dc_field(default_factory=list)

    def check_consistency(self) -> None:
        r = set(self.R_boxes.tolist())
        a, c = set(self.Rxi_boxes.tolist()), set(self.Cxi_boxes.tolist())
        assert a | c == r and not (a & c), "Rxi and Cxi must partition R"
        if self.condition_b_holds and self.max_cycle_pairing is not None:
            assert self.lambda_estimate <= -self.max_cycle_pairing + 1e-9

    def to_json(self) -> dict:
        def num(v):
            return None if v is None else float(v)

        return {
            "R_boxes": self.R_boxes.tolist(),
            "Rxi_boxes": self.Rxi_boxes.tolist(),
            "Cxi_boxes": self.Cxi_boxes.tolist(),
            "Cxi_closed": self.Cxi_closed,
            "min_cycle_pairing": num(self.min_cycle_pairing),
            "max_cycle_pairing": num(self.max_cycle_pairing),
            "lambda_estimate": num(self.lambda_estimate),
            "condition_b_holds": self.condition_b_holds,
            "class_constraints": self.class_constraints,
            "warnings": list(self.warnings),
        }


def chain_recurrent_set(graph: TransitionGraph) -> np.ndarray:
    return recurrent_nodes(graph.n_nodes, graph.src, graph.dst)


def _class_values(graph: TransitionGraph) -> np.ndarray:
    geo = graph.geometry
    units = graph.class_units.astype(float)
    if geo.n_constraints == 0:
        return np.zeros((graph.n_edges, 0))
    if geo.n_constraints == 1:
        return (units @ geo.functional)[:, None]
    return units @ geo.constraints.T


def xi_recurrent_split(graph: TransitionGraph, R: np.ndarray | None = None, max_sources: int = 64) -> RecurrenceReport:
    n = graph.n_nodes
    R = chain_recurrent_set(graph) if R is None else np.asarray(R)
    geo = graph.geometry
    rxi = zero_class_nodes(n, graph.src, graph.dst, _class_values(graph))
    cxi = np.setdiff1d(R, rxi)
    warnings = []
    if graph.weight_spread.size and graph.weight_spread.max() > graph.params.w_tol:
        warnings.append(f"resolution too coarse: edge weight spread {graph.weight_spread.max():.3g}")

    closed = True
    if cxi.size and rxi.size:
        nb = np.zeros(n, dtype=bool)
        for v in cxi:
            nb[graph.cover.adjacency_with_self[v]] = True
        closed = not nb[rxi].any()

    lo = hi = lam = None
    if cxi.size:
        lo, hi = _cxi_cycle_pairings(graph, cxi, max_sources)
        lam = _cxi_lambda(graph, cxi)
    cond_b = hi is None or hi <= -1.0 + graph.params.w_tol
    if cond_b and hi is not None and lam is not None:
        lam = min(lam, -hi)
    rep = RecurrenceReport(R, rxi, cxi, bool(closed), lo, hi, lam, bool(cond_b), geo.n_constraints, warnings)
    rep.check_consistency()
    return rep


def _cxi_lambda(graph: TransitionGraph, cxi: np.ndarray) -> float | None:
    """Minus the largest pairing per unit time over cycles inside Cxi."""
    keep, s, d = _sub(cxi, graph.src, graph.dst, graph.n_nodes)
    rec = recurrent_nodes(cxi.size, s, d)
    if rec.size == 0:
        return None
    w = graph.pairing[keep]
    k, labels = strongly_connected(cxi.size, s, d)
    best = -np.inf
    for comp in np.unique(labels[rec]):
        nodes = np.flatnonzero(labels == comp)
        kk, ss, dd = _sub(nodes, s, d, cxi.size)
        best = max(best, max_cycle_mean(nodes.size, ss, dd, w[kk]).eta)
    return float(-best / graph.params.T_edge)


def _cxi_cycle_pairings(graph: TransitionGraph, cxi: np.ndarray, max_sources: int):
    """Pairings of the cheapest return cycles through Cxi boxes.

    Inside each SCC meeting Cxi: if some cycle has positive pairing the
    optimal policy cycle is reported as a witness; otherwise reduced costs
    of an optimal potential are nonnegative and Dijkstra finds, for sampled
    Cxi boxes, the return cycle of largest (least negative) pairing.
    """
    from scipy.sparse.csgraph import dijkstra

    n = graph.n_nodes
    k, labels = strongly_connected(n, graph.src, graph.dst)
    pw = graph.pairing
    found = []
    for comp in np.unique(labels[cxi]):
        nodes = np.flatnonzero(labels == comp)
        keep, s, d = _sub(nodes, graph.src, graph.dst, n)
        if keep.size == 0:
            continue
        w = pw[keep]
        cm = max_cycle_mean(nodes.size, s, d, w)
        if cm.eta > 1e-9:
            found.append(float(w[cm.cycle].sum()))
            continue
        x = cm.potential
        r = np.maximum(x[s] - w - x[d], 0.0)  # reduced costs, nonnegative since eta <= 0
        local = np.flatnonzero(np.isin(nodes, cxi))
        if local.size > max_sources:
            local = local[np.linspace(0, local.size - 1, max_sources).astype(int)]
        # cheapest parallel edge per (s, d); tiny offset keeps zero-cost edges in the sparse matrix
        order = np.lexsort((r, d, s))
        first = np.r_[True, (np.diff(s[order]) != 0) | (np.diff(d[order]) != 0)]
        e = order[first]
        mat = csr_matrix((r[e] + 1e-300, (s[e], d[e])), shape=(nodes.size, nodes.size))
        dist = dijkstra(mat, directed=True, indices=local)
        for row, u in enumerate(local):
            into = e[d[e] == u]
            ret = (dist[row, s[into]] + r[into]).min()
            found.append(float(-ret))
    if not found:
        return None, None
    # returns are sums of reduced costs, i.e. minus the cycle pairings
    return float(min(found)), float(max(found))


# ---------------------------------------------------------------- Ulam measures

class ConvergenceError(RuntimeError):
    pass


def transition_matrix(graph: TransitionGraph, restrict_to=None) -> tuple[np.ndarray, csr_matrix]:
    """Row-stochastic Ulam matrix, optionally restricted (and renormalized) to a node set."""
    nodes, p, _ = _restricted(graph, restrict_to)
    return nodes, p


def _restricted(graph: TransitionGraph, restrict_to):
    nodes = np.arange(graph.n_nodes) if restrict_to is None else np.asarray(sorted(set(map(int, restrict_to))))
    c = graph.ulam.tocsr()[nodes][:, nodes].tocsr()
    rows = np.asarray(c.sum(axis=1)).ravel()
    leak = rows == 0
    if np.any(leak):
        # boxes whose images all leave the set are kept as absorbing states
        c = c + csr_matrix((np.ones(leak.sum()), (np.flatnonzero(leak), np.flatnonzero(leak))), shape=c.shape)
        rows[leak] = 1.0
    p = csr_matrix(c.multiply(1.0 / rows[:, None]))
    return nodes, p, leak


def ergodic_measures(graph: TransitionGraph, restrict_to=None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stationary measure of every closed communicating class, as (node ids, weights).

    Absorbing states created by the restriction (boxes whose samples all
    leave the set) carry no invariant measure of the flow and are skipped.
    """
    nodes, p, leak = _restricted(graph, restrict_to)
    return [(nodes[c], pi) for c, pi in _closed_class_measures(p) if not leak[c].any()]


def _closed_class_measures(p: csr_matrix):
    n = p.shape[0]
    k, lab = connected_components(p, directed=True, connection="strong")
    coo = p.tocoo()
    leaves = np.zeros(k, dtype=bool)
    leaves[lab[coo.row[lab[coo.row] != lab[coo.col]]]] = True
    out = []
    for c in np.flatnonzero(~leaves):
        idx = np.flatnonzero(lab == c)
        out.append((idx, _stationary_closed(p[idx][:, idx])))
    return out


def _stationary_closed(q: csr_matrix) -> np.ndarray:
    m = q.shape[0]
    if m == 1:
        return np.ones(1)
    a = (q.T - identity(m, format="csr")).tolil()
    a[0, :] = 1.0
    b = np.zeros(m)
    b[0] = 1.0
    pi = spsolve(a.tocsc(), b)
    pi = np.maximum(pi, 0.0)
    return pi / pi.sum()


def ulam_measure(graph: TransitionGraph, restrict_to=None, tol: float = 1e-10, max_iter: int = 100_000) -> np.ndarray:
    """Stationary measure reached from the uniform distribution (Cesaro limit of mu P^k).

    Closed classes are solved directly and weighted by their absorption mass
    from the uniform start; a short lazy power iteration then polishes the
    result until the residual |mu P - mu|_1 is below tol. Mass absorbed by
    boxes whose samples all leave the restricted set is discarded.
    """
    nodes, p, leak = _restricted(graph, restrict_to)
    n = p.shape[0]
    u = np.full(n, 1.0 / n)
    classes = _closed_class_measures(p)
    in_closed = np.zeros(n, dtype=bool)
    for idx, _ in classes:
        in_closed[idx] = True
    trans = np.flatnonzero(~in_closed)
    mass_to = np.zeros(n)
    mass_to[in_closed] = u[in_closed]
    if trans.size:
        qtt = p[trans][:, trans]
        h = spsolve((identity(trans.size, format="csc") - qtt.T).tocsc(), u[trans])
        h = np.atleast_1d(h)
        mass_to += np.asarray(p[trans].T @ h).ravel() * in_closed
    mu = np.zeros(n)
    for idx, pi in classes:
        if not leak[idx].any():
            mu[idx] = mass_to[idx].sum() * pi
    if mu.sum() == 0:
        raise ConvergenceError("no invariant measure inside the restricted set")
    mu /= mu.sum()
    pt = p.T.tocsr()
    for _ in range(max_iter):
        res = np.abs(pt @ mu - mu).sum()
        if res < tol:
            break
        mu = 0.5 * (mu + pt @ mu)
    else:
        raise ConvergenceError(f"Ulam iteration did not reach residual {tol} (last {res:.3g})")
    out = np.zeros(graph.n_nodes)
    out[nodes] = mu
    return out


def stationarity_residual(graph: TransitionGraph, measure: np.ndarray, restrict_to=None) -> float:
    nodes, p = transition_matrix(graph, restrict_to)
    mu = measure[nodes]
    return float(np.abs(p.T @ mu - mu).max())


def asymptotic_pairing(graph: TransitionGraph, measure: np.ndarray) -> float:
    """Sum over boxes of measure times the mean contraction over the box's seeds."""
    measure = np.asarray(measure, dtype=float)
    if measure.shape != (graph.n_nodes,):
        raise ValueError("measure must have one weight per node")
    return float(measure @ graph.node_iota)


# ---------------------------------------------------------------- cache files

CACHE_MAGIC = b"OFLG"
CACHE_VERSION = 1


def _header(graph: TransitionGraph) -> dict:
    geo = graph.geometry
    head = {
        "params": graph.params.to_dict(),
        "presentation": graph.cover.presentation.to_spec(),
        "geometry": {
            "periods": geo.periods.tolist(),
            "projection": geo.projection.tolist(),
            "constraints": geo.constraints.tolist(),
            "functional": None if geo.functional is None else geo.functional.tolist(),
        },
    }
    if graph.field is not None:
        head["field"] = graph.field.sexprs()
    if graph.cls is not None:
        head["form"] = graph.cls.representative.sexprs()
    return head


def save_graph(graph: TransitionGraph, path) -> dict:
    """Write the binary cache and a JSON sidecar (path + '.json'); returns the header."""
    head = _header(graph)
    blob = json.dumps(head, sort_keys=True).encode()
    u = graph.ulam.tocoo()
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<II", CACHE_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", graph.n_nodes))
        fh.write(graph.cover.node_rep_cell.astype("<i8").tobytes())
        fh.write(graph.node_iota.astype("<f8").tobytes())
        fh.write(struct.pack("<QI", graph.n_edges, graph.klass.shape[1]))
        for arr, dt in ((graph.src, "<i8"), (graph.dst, "<i8"), (graph.weight, "<f8"),
                        (graph.weight_spread, "<f8"), (graph.count, "<i8"), (graph.klass, "<f8")):
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
        fh.write(struct.pack("<Q", u.nnz))
        for arr, dt in ((u.row, "<i8"), (u.col, "<i8"), (u.data, "<f8")):
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    side = dict(head, format="OFLG", version=CACHE_VERSION, n_nodes=graph.n_nodes, n_edges=graph.n_edges)
    with open(f"{path}.json", "w") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)
    return head


def load_graph(path, field: EquivariantVectorField | None = None, cls: CohomologyClass | None = None) -> TransitionGraph:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CACHE_MAGIC:
        raise ValueError(f"{path} is not a graph cache")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CACHE_VERSION:
        raise ValueError(f"unsupported cache version {version}")
    pos = 12
    head = json.loads(data[pos:pos + hlen])
    pos += hlen

    def take(count, dt):
        nonlocal pos
        arr = np.frombuffer(data, dtype=dt, count=count, offset=pos).copy()
        pos += arr.nbytes
        return arr

    (n,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    reps = take(n, "<i8")
    iota = take(n, "<f8")
    e, dim = struct.unpack_from("<QI", data, pos)
    pos += 12
    src, dst = take(e, "<i8"), take(e, "<i8")
    weight, spread = take(e, "<f8"), take(e, "<f8")
    count = take(e, "<i8")
    klass = take(e * dim, "<f8").reshape(e, dim)
    (nnz,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    rows, cols, vals = take(nnz, "<i8"), take(nnz, "<i8"), take(nnz, "<f8")

    params = GraphParams(**head["params"])
    pres = QuotientPresentation.from_spec(head["presentation"])
    cover = BoxCover(pres, params.resolution)
    if not np.array_equal(cover.node_rep_cell, reps):
        raise ValueError("cached node table does not match the presentation")
    g = head["geometry"]
    geo = ClassGeometry(np.array(g["periods"]), np.array(g["projection"]),
                        np.array(g["constraints"]).reshape(-1, dim),
                        None if g["functional"] is None else np.array(g["functional"]))
    ulam = csr_matrix((vals, (rows, cols)), shape=(n, n))
    return TransitionGraph(cover, params, src, dst, weight, spread, klass, count, ulam, iota, geo, field, cls)
