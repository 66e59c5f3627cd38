"""Uniform box covers of T^n / Gamma with cells merged into group orbits."""
from __future__ import annotations

import itertools
from functools import cached_property

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .orbifold import QuotientPresentation


class BoxCover:
    """Cells [i/res, (i+1)/res) of the torus grouped into Gamma-orbits (nodes).

    A node is represented by the smallest flat cell index in its orbit; node
    ids are assigned in increasing order of that representative.
    """

    def __init__(self, presentation: QuotientPresentation, resolution: int):
        res = int(resolution)
        if res < 2 or res & (res - 1):
            raise ValueError("resolution must be a power of two >= 2")
        for g in presentation.group:
            if any((s * res).denominator != 1 for s in g.shift):
                raise ValueError(f"group shift {g.shift} does not map {res}-cells to cells")
        self.presentation = presentation
        self.resolution = res
        self.dim = presentation.dim
        self.n_cells = res**self.dim

        centers = self.cell_centers(np.arange(self.n_cells))
        images = np.stack([self.cell_of_point(g.act(centers)) for g in presentation.group])
        rep = images.min(axis=0)
        reps, node_of_cell = np.unique(rep, return_inverse=True)
        self.node_rep_cell = reps
        self.node_of_cell = node_of_cell.astype(np.int64)
        self.n_nodes = reps.size
        # group element index taking each cell to its node's representative cell
        to_rep = np.argmax(images == rep[None, :], axis=0)
        self.cell_to_rep_gamma = to_rep.astype(np.int64)

    @property
    def diameter(self) -> float:
        return np.sqrt(self.dim) / self.resolution

    @property
    def side(self) -> float:
        return 1.0 / self.resolution

    def multi_index(self, cells) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(cells), (self.resolution,) * self.dim), axis=-1)

    def flat_index(self, multi) -> np.ndarray:
        multi = np.mod(np.asarray(multi, dtype=np.int64), self.resolution)
        return np.ravel_multi_index(tuple(np.moveaxis(multi, -1, 0)), (self.resolution,) * self.dim)

    def cell_centers(self, cells) -> np.ndarray:
        return (self.multi_index(cells) + 0.5) / self.resolution

    def cell_of_point(self, x) -> np.ndarray:
        idx = np.floor(np.mod(np.asarray(x, dtype=float), 1.0) * self.resolution).astype(np.int64)
        idx = np.minimum(idx, self.resolution - 1)
        return self.flat_index(idx)

    def node_of_point(self, x) -> np.ndarray:
        return self.node_of_cell[self.cell_of_point(x)]

    @cached_property
    def node_centers(self) -> np.ndarray:
        return self.cell_centers(self.node_rep_cell)

    def to_rep_cell(self, x) -> np.ndarray:
        """Map torus points into the representative cell of their node (by a group element)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        gi = self.cell_to_rep_gamma[self.cell_of_point(x)]
        out = np.empty_like(x)
        for k, g in enumerate(self.presentation.group):
            sel = gi == k
            if np.any(sel):
                out[sel] = g.act(x[sel])
        return out

    def cells_of_nodes(self, nodes) -> np.ndarray:
        mask = np.zeros(self.n_nodes, dtype=bool)
        mask[np.asarray(list(nodes), dtype=np.int64)] = True
        return np.flatnonzero(mask[self.node_of_cell])

    @cached_property
    def _offsets(self) -> np.ndarray:
        return np.array([o for o in itertools.product((-1, 0, 1), repeat=self.dim) if any(o)])

    @cached_property
    def adjacency(self) -> list[np.ndarray]:
        """Neighboring nodes (sharing a face or corner) of every node, excluding itself."""
        base = self.multi_index(self.node_rep_cell)
        nb = self.node_of_cell[self.flat_index(base[:, None, :] + self._offsets[None, :, :])]
        return [np.unique(row[row != i]) for i, row in enumerate(nb)]

    @cached_property
    def adjacency_with_self(self) -> list[np.ndarray]:
        """Like adjacency but keeps a node that touches another cell of its own orbit."""
        base = self.multi_index(self.node_rep_cell)
        out = []
        for i in range(self.n_nodes):
            cells = self.flat_index(base[i] + self._offsets)
            out.append(np.unique(self.node_of_cell[cells]))
        return out

    def fatten(self, nodes, width: float) -> np.ndarray:
        """Nodes whose cells lie within `width` of the union of cells of `nodes`."""
        nodes = np.asarray(sorted(set(int(v) for v in nodes)), dtype=np.int64)
        if nodes.size == 0:
            return nodes
        reach = int(np.ceil(width * self.resolution)) + 1
        offs = np.array(list(itertools.product(range(-reach, reach + 1), repeat=self.dim)))
        gap = np.maximum(np.abs(offs) - 1, 0) / self.resolution
        offs = offs[np.linalg.norm(gap, axis=1) <= width + 1e-12]
        cells = self.multi_index(self.cells_of_nodes(nodes))
        out = np.zeros(self.n_nodes, dtype=bool)
        for chunk in np.array_split(cells, max(1, len(cells) // 4096 + 1)):
            nb = self.flat_index(chunk[:, None, :] + offs[None, :, :])
            out[self.node_of_cell[nb.ravel()]] = True
        return np.flatnonzero(out)

    def components(self, nodes) -> list[np.ndarray]:
        """Connected components of a node set under box adjacency."""
        nodes = np.asarray(sorted(set(int(v) for v in nodes)), dtype=np.int64)
        if nodes.size == 0:
            return []
        pos = -np.ones(self.n_nodes, dtype=np.int64)
        pos[nodes] = np.arange(nodes.size)
        rows, cols = [], []
        for i, v in enumerate(nodes):
            nb = self.adjacency[v]
            nb = nb[pos[nb] >= 0]
            rows.extend([i] * nb.size)
            cols.extend(pos[nb].tolist())
        m = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(nodes.size, nodes.size))
        k, labels = connected_components(m, directed=False)
        return [nodes[labels == c] for c in range(k)]

    def node_distance_to_point(self, nodes, p) -> np.ndarray:
        """Quotient distance from a torus point to each node's union of cells."""
        p = np.asarray(p, dtype=float)
        out = np.full(len(nodes), np.inf)
        imgs = self.presentation.images(p)
        for j, v in enumerate(nodes):
            c = self.cell_centers(self.cells_of_nodes([v]))
            d = imgs[:, None, :] - c[None, :, :]
            d -= np.round(d)
            gap = np.maximum(np.abs(d) - 0.5 / self.resolution, 0.0)
            out[j] = np.linalg.norm(gap, axis=-1).min()
        return out

    def hausdorff_to_points(self, nodes, points) -> float:
        """Hausdorff distance between the union of node cells and a finite point set."""
        nodes = list(nodes)
        points = np.atleast_2d(points)
        if not nodes:
            return np.inf
        d_nodes = np.stack([self.node_distance_to_point(nodes, p) for p in points])
        # points -> boxes, and box centers -> points (box radius added)
        forward = d_nodes.min(axis=1).max()
        q = self.presentation
        back = max(
            min(float(q.quotient_distance(self.node_centers[v], p)) for p in points) for v in nodes
        ) + self.diameter / 2
        return max(forward, back)
