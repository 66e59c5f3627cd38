"""Graph algorithms against exhaustive oracles on small random digraphs."""
from collections import deque

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from orbiflow.graph import max_cycle_mean, recurrent_nodes, strongly_connected, zero_class_nodes


def random_digraph(rng, n_max, density=None, self_loops=True):
    n = int(rng.integers(1, n_max + 1))
    p = density if density is not None else rng.uniform(0.5, 3.0) / max(n, 1)
    mask = rng.random((n, n)) < p
    if not self_loops:
        np.fill_diagonal(mask, False)
    src, dst = np.nonzero(mask)
    return n, src.astype(np.int64), dst.astype(np.int64)


def on_some_cycle(n, src, dst):
    """Exhaustive DFS from every node: is the node reachable from itself by a nonempty path?"""
    succ = [[] for _ in range(n)]
    for a, b in zip(src, dst):
        succ[a].append(b)
    out = []
    for v in range(n):
        seen, stack = set(), list(succ[v])
        while stack:
            u = stack.pop()
            if u == v:
                out.append(v)
                break
            if u not in seen:
                seen.add(u)
                stack.extend(succ[u])
    return np.array(out, dtype=np.int64)


def zero_walk_nodes(n, src, dst, w, bound):
    """Nodes v with a nonempty closed walk of total weight zero: BFS in the Z^m lift with |height| <= bound."""
    w = np.asarray(w, dtype=np.int64)
    if w.ndim == 1:
        w = w[:, None]
    succ = [[] for _ in range(n)]
    for a, b, c in zip(src, dst, w):
        succ[a].append((b, tuple(c)))
    zero = (0,) * w.shape[1]
    out = []
    for v in range(n):
        seen = set()
        queue = deque((b, c) for b, c in succ[v])
        found = False
        while queue:
            u, h = queue.popleft()
            if u == v and h == zero:
                found = True
                break
            if (u, h) in seen or max(abs(x) for x in h) > bound:
                continue
            seen.add((u, h))
            for b, c in succ[u]:
                queue.append((b, tuple(x + y for x, y in zip(h, c))))
        if found:
            out.append(v)
    return np.array(out, dtype=np.int64)


def test_scc_recurrence_matches_exhaustive_search():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        n, src, dst = random_digraph(rng, 200)
        got = recurrent_nodes(n, src, dst)
        assert np.array_equal(got, on_some_cycle(n, src, dst))
        g = nx.DiGraph()
        g.add_nodes_from(range(n))
        g.add_edges_from(zip(src.tolist(), dst.tolist()))
        k, labels = strongly_connected(n, src, dst)
        assert k == nx.number_strongly_connected_components(g)


def test_zero_cycle_classification_matches_lift_search():
    rng = np.random.default_rng(99)
    for _ in range(100):
        n, src, dst = random_digraph(rng, 30)
        w = rng.integers(-3, 4, size=src.size)
        got = zero_class_nodes(n, src, dst, w[:, None].astype(float))
        want = zero_walk_nodes(n, src, dst, w, bound=3 * n * 3)
        assert np.array_equal(got, want), (n, src, dst, w)


def test_zero_simple_cycles_are_found():
    rng = np.random.default_rng(5)
    for _ in range(100):
        n, src, dst = random_digraph(rng, 12)
        w = rng.integers(-2, 3, size=src.size)
        g = nx.DiGraph()
        weight = {}
        for a, b, c in zip(src, dst, w):
            g.add_edge(int(a), int(b))
            weight[int(a), int(b)] = int(c)
        zero = set()
        for cyc in nx.simple_cycles(g):
            if sum(weight[cyc[i], cyc[(i + 1) % len(cyc)]] for i in range(len(cyc))) == 0:
                zero.update(cyc)
        got = set(zero_class_nodes(n, src, dst, w[:, None].astype(float)).tolist())
        assert zero <= got


def test_two_constraint_classification_matches_lift_search():
    rng = np.random.default_rng(17)
    for _ in range(40):
        n, src, dst = random_digraph(rng, 8)
        w = rng.integers(-1, 2, size=(src.size, 2))
        got = zero_class_nodes(n, src, dst, w.astype(float))
        want = zero_walk_nodes(n, src, dst, w, bound=2 * n)
        assert np.array_equal(got, want), (n, src, dst, w)


def _brute_cycle_mean(n, src, dst, w):
    g = nx.DiGraph()
    weight = {}
    for a, b, c in zip(src, dst, w):
        key = (int(a), int(b))
        weight[key] = max(weight.get(key, -np.inf), float(c))
        g.add_edge(*key)
    best = -np.inf
    for cyc in nx.simple_cycles(g):
        tot = sum(weight[cyc[i], cyc[(i + 1) % len(cyc)]] for i in range(len(cyc)))
        best = max(best, tot / len(cyc))
    return best


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1))
def test_max_cycle_mean_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 10))
    # strongly connected: a Hamiltonian ring plus random chords
    ring = np.arange(n)
    src = np.r_[ring, rng.integers(0, n, 2 * n)]
    dst = np.r_[(ring + 1) % n, rng.integers(0, n, 2 * n)]
    w = rng.normal(size=src.size)
    cm = max_cycle_mean(n, src, dst, w)
    assert cm.eta == pytest.approx(_brute_cycle_mean(n, src, dst, w), abs=1e-9)
    # the returned cycle attains the value and the potential certifies it
    assert np.mean(w[cm.cycle]) == pytest.approx(cm.eta, abs=1e-9)
    assert np.all(cm.potential[src] >= w - cm.eta + cm.potential[dst] - 1e-9)
