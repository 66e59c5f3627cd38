"""Flat torus quotients T^n / Gamma by finite groups of affine isometries.

Group arithmetic is exact (integer linear parts, rational shifts); geometric
queries work in floats with a 1e-9 tolerance.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

TOL = 1e-9


def _frac(value) -> Fraction:
    if isinstance(value, str):
        return Fraction(value.strip())
    if isinstance(value, float):
        return Fraction(value).limit_denominator(10**9)
    return Fraction(value)


def _mod1(f: Fraction) -> Fraction:
    return f - (f.numerator // f.denominator)


def wrap(d: np.ndarray) -> np.ndarray:
    """Shortest representative of a torus displacement, componentwise in [-1/2, 1/2]."""
    return d - np.round(d)


def solve_rational(a: Sequence[Sequence[Fraction]], b: Sequence[Fraction]) -> list[Fraction]:
    """Gauss-Jordan solve of a square system over the rationals."""
    n = len(a)
    m = [[Fraction(x) for x in row] + [Fraction(bi)] for row, bi in zip(a, b)]
    for col in range(n):
        piv = next((r for r in range(col, n) if m[r][col] != 0), None)
        if piv is None:
            raise ZeroDivisionError("singular system")
        m[col], m[piv] = m[piv], m[col]
        p = m[col][col]
        m[col] = [x / p for x in m[col]]
        for r in range(n):
            if r != col and m[r][col] != 0:
                f = m[r][col]
                m[r] = [x - f * y for x, y in zip(m[r], m[col])]
    return [m[r][n] for r in range(n)]


@dataclass(frozen=True)
class GroupElement:
    """The torus isometry x -> linear @ x + shift (mod 1)."""

    linear: tuple[tuple[int, ...], ...]
    shift: tuple[Fraction, ...]

    def __post_init__(self):
        lin = tuple(tuple(int(v) for v in row) for row in self.linear)
        n = len(lin)
        if any(len(row) != n for row in lin):
            raise ValueError("linear part must be square")
        if len(self.shift) != n:
            raise ValueError("shift has wrong dimension")
        m = np.array(lin, dtype=float)
        if not np.array_equal(m.T @ m, np.eye(n)):
            raise ValueError(f"linear part {lin} is not a signed permutation (not an isometry)")
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "shift", tuple(_mod1(_frac(s)) for s in self.shift))

    @classmethod
    def identity(cls, n: int) -> "GroupElement":
        return cls(tuple(tuple(int(i == j) for j in range(n)) for i in range(n)), (0,) * n)

    @classmethod
    def from_spec(cls, matrix, shift) -> "GroupElement":
        return cls(tuple(tuple(row) for row in matrix), tuple(_frac(s) for s in shift))

    @property
    def dim(self) -> int:
        return len(self.shift)

    @cached_property
    def matrix(self) -> np.ndarray:
        return np.array(self.linear, dtype=float)

    @cached_property
    def shift_vector(self) -> np.ndarray:
        return np.array([float(s) for s in self.shift])

    @property
    def is_identity(self) -> bool:
        return self == GroupElement.identity(self.dim)

    def compose(self, other: "GroupElement") -> "GroupElement":
        """self after other."""
        n = self.dim
        lin = tuple(
            tuple(sum(self.linear[i][k] * other.linear[k][j] for k in range(n)) for j in range(n))
            for i in range(n)
        )
        sh = tuple(
            sum((self.linear[i][k] * other.shift[k] for k in range(n)), Fraction(0)) + self.shift[i]
            for i in range(n)
        )
        return GroupElement(lin, sh)

    def inverse(self) -> "GroupElement":
        # signed permutation: inverse is the transpose
        n = self.dim
        lin_t = tuple(tuple(self.linear[j][i] for j in range(n)) for i in range(n))
        sh = tuple(-sum((lin_t[i][k] * self.shift[k] for k in range(n)), Fraction(0)) for i in range(n))
        return GroupElement(lin_t, sh)

    def act_lifted(self, x: np.ndarray) -> np.ndarray:
        """Action on R^n (no reduction mod 1)."""
        return np.asarray(x, dtype=float) @ self.matrix.T + self.shift_vector

    def act(self, x: np.ndarray) -> np.ndarray:
        return np.mod(self.act_lifted(x), 1.0)

    def to_spec(self) -> dict:
        return {"matrix": [list(r) for r in self.linear], "shift": [str(s) for s in self.shift]}


@dataclass(frozen=True)
class OrbifoldPoint:
    rep: tuple[float, ...]
    isotropy_order: int = 1

    @property
    def array(self) -> np.ndarray:
        return np.array(self.rep)


class QuotientPresentation:
    """The orbifold X = T^n / Gamma with its flat quotient metric."""

    def __init__(self, dim: int, group: Iterable[GroupElement] | None = None):
        self.dim = int(dim)
        elems = list(group) if group is not None else [GroupElement.identity(self.dim)]
        # keep order stable, identity first
        ident = GroupElement.identity(self.dim)
        uniq: list[GroupElement] = []
        for g in [ident] + elems:
            if g.dim != self.dim:
                raise ValueError("group element dimension mismatch")
            if g not in uniq:
                uniq.append(g)
        self.group: tuple[GroupElement, ...] = tuple(uniq)
        self._check_group()

    @classmethod
    def trivial(cls, dim: int) -> "QuotientPresentation":
        return cls(dim)

    @classmethod
    def generated_by(cls, dim: int, generators: Iterable[GroupElement]) -> "QuotientPresentation":
        elems = [GroupElement.identity(dim)]
        frontier = list(generators)
        while frontier:
            g = frontier.pop()
            if g in elems:
                continue
            elems.append(g)
            frontier.extend(g.compose(h) for h in list(elems))
            frontier.extend(h.compose(g) for h in list(elems))
            if len(elems) > 1000:
                raise ValueError("generated group is not finite (or too large)")
        return cls(dim, elems)

    @classmethod
    def pillowcase(cls) -> "QuotientPresentation":
        return cls.generated_by(2, [GroupElement(((-1, 0), (0, -1)), (0, 0))])

    def _check_group(self) -> None:
        s = set(self.group)
        for g in self.group:
            if g.inverse() not in s:
                raise ValueError(f"group not closed under inverses: {g}")
            for h in self.group:
                if g.compose(h) not in s:
                    raise ValueError("group not closed under composition")

    def __len__(self) -> int:
        return len(self.group)

    def __eq__(self, other) -> bool:
        return isinstance(other, QuotientPresentation) and self.dim == other.dim and set(self.group) == set(other.group)

    def __repr__(self) -> str:
        return f"QuotientPresentation(dim={self.dim}, order={len(self)})"

    @property
    def order(self) -> int:
        return len(self.group)

    @property
    def is_trivial(self) -> bool:
        return len(self.group) == 1

    @property
    def cutoff_value(self) -> float:
        return 1.0 / len(self.group)

    @cached_property
    def _mats(self) -> np.ndarray:
        return np.stack([g.matrix for g in self.group])

    @cached_property
    def _shifts(self) -> np.ndarray:
        return np.stack([g.shift_vector for g in self.group])

    def images(self, x: np.ndarray) -> np.ndarray:
        """All group images; shape (|Gamma|, ..., n), reduced mod 1."""
        x = np.asarray(x, dtype=float)
        out = np.einsum("gij,...j->g...i", self._mats, x)
        out += self._shifts.reshape((len(self),) + (1,) * (x.ndim - 1) + (self.dim,))
        return np.mod(out, 1.0)

    def orbit(self, p) -> np.ndarray:
        imgs = self.images(np.asarray(p, dtype=float))
        pts: list[np.ndarray] = []
        for q in imgs:
            if not any(np.max(np.abs(wrap(q - r))) < TOL for r in pts):
                pts.append(q)
        return np.array(pts)

    def isotropy_order(self, p) -> int:
        p = np.asarray(p, dtype=float)
        d = wrap(self.images(p) - p)
        return int(np.sum(np.max(np.abs(d), axis=-1) < TOL))

    def canonical(self, p) -> np.ndarray:
        imgs = np.round(self.images(np.asarray(p, dtype=float)), 12) % 1.0
        order = np.lexsort(imgs.T[::-1])
        return imgs[order[0]]

    def point(self, p) -> OrbifoldPoint:
        return OrbifoldPoint(tuple(float(v) for v in self.canonical(p)), self.isotropy_order(p))

    @staticmethod
    def torus_distance(x, y) -> np.ndarray:
        return np.linalg.norm(wrap(np.asarray(x, float) - np.asarray(y, float)), axis=-1)

    def quotient_distance(self, p, q) -> np.ndarray:
        """min over gamma and lattice shifts of |p - (gamma q + k)|; broadcasts over leading axes."""
        p = p.array if isinstance(p, OrbifoldPoint) else np.asarray(p, dtype=float)
        q = q.array if isinstance(q, OrbifoldPoint) else np.asarray(q, dtype=float)
        if p.shape[-1] != self.dim or q.shape[-1] != self.dim:
            raise ValueError("dimension mismatch")
        imgs = self.images(q)
        k = max(p.ndim, q.ndim)
        imgs = imgs.reshape((len(self),) + (1,) * (k - q.ndim) + q.shape)
        d = np.linalg.norm(wrap(p - imgs), axis=-1)
        return d.min(axis=0)

    def nearest_image(self, p, q):
        """Index of the minimizing gamma and the lifted image of q closest to p (in R^n)."""
        p = np.asarray(p, dtype=float)
        lifted = np.stack([g.act_lifted(q) for g in self.group])
        k = np.round(p - lifted)
        d = np.linalg.norm(p - lifted - k, axis=-1)
        i = int(np.argmin(d))
        return i, lifted[i] + k[i]

    def singular_locus(self) -> list[OrbifoldPoint]:
        n = self.dim
        found: list[np.ndarray] = []
        for g in self.group:
            if g.is_identity:
                continue
            a = [[Fraction(int(i == j) - g.linear[i][j]) for j in range(n)] for i in range(n)]
            det = round(np.linalg.det(np.array(a, dtype=float)))
            if det == 0:
                raise NotImplementedError("element with a non-isolated fixed set (mirror or subtorus)")
            for k in itertools.product(range(abs(det)), repeat=n):
                x = solve_rational(a, [g.shift[i] + k[i] for i in range(n)])
                pt = np.array([float(_mod1(v)) for v in x])
                if not any(self.quotient_distance(pt, f) < TOL for f in found):
                    found.append(pt)
        pts = [self.point(p) for p in found]
        return sorted(pts, key=lambda o: o.rep)

    def injectivity_radius(self) -> float:
        """Half the shortest non-trivial displacement scale of the lifted group on R^n.

        Takes the minimum of the lattice systole, the translation length of
        fixed-point-free lifted elements, and the distance between disjoint
        fixed sets of lifted elements; returns half of it.
        """
        n = self.dim
        candidates = [1.0]
        fixed_sets: list[tuple[np.ndarray, np.ndarray]] = []
        for g in self.group:
            if g.is_identity:
                continue
            a = g.matrix - np.eye(n)
            null = _null_space(a)
            for k in itertools.product(range(-2, 3), repeat=n):
                c = g.shift_vector + np.array(k, dtype=float)
                x0, *_ = np.linalg.lstsq(a, -c, rcond=None)
                resid = np.linalg.norm(a @ x0 + c)
                if resid > 1e-12:
                    candidates.append(resid)
                else:
                    fixed_sets.append((x0, null))
        for (p1, b1), (p2, b2) in itertools.combinations(fixed_sets, 2):
            basis = np.hstack([b1, -b2]) if b1.size or b2.size else np.zeros((n, 0))
            diff = p2 - p1
            if basis.shape[1]:
                coef, *_ = np.linalg.lstsq(basis, diff, rcond=None)
                diff = diff - basis @ coef
            d = np.linalg.norm(diff)
            if d > 1e-12:
                candidates.append(d)
        return 0.5 * min(candidates)

    def to_spec(self) -> dict:
        return {"dim": self.dim, "group": [g.to_spec() for g in self.group]}

    @classmethod
    def from_spec(cls, spec: dict) -> "QuotientPresentation":
        elems = [GroupElement.from_spec(e["matrix"], e["shift"]) for e in spec.get("group", [])]
        return cls(int(spec["dim"]), elems)


def _null_space(a: np.ndarray) -> np.ndarray:
    u, s, vt = np.linalg.svd(a)
    rank = int(np.sum(s > 1e-10))
    return vt[rank:].T
