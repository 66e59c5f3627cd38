"""Combinator expressions for periodic coefficient functions on T^n.

Grammar (prefix notation, coordinates indexed from 0)::

    expr   := number
            | "(const" number ")"
            | "(sinx" index [freq] ")"      ; sin(2 pi freq x_index)
            | "(cosx" index [freq] ")"      ; cos(2 pi freq x_index)
            | "(scale" number expr ")"
            | "(sum" expr expr+ ")"
            | "(prod" expr expr+ ")"
            | "(bump" "(" number+ ")" number ")"   ; smooth bump, center and radius
            | "(bumpx" index number number ")"     ; bump in one coordinate only
    number := decimal | integer "/" integer

Every expression evaluates on an (m, n) array of points and has an analytic
gradient, so closedness and equivariance checks can be done exactly or by
finite differences.
"""
from __future__ import annotations

import re
from fractions import Fraction

import numpy as np


def sinpi(s: np.ndarray) -> np.ndarray:
    """sin(pi s), exact zero at integers and exact +-1 at half integers."""
    s = np.mod(np.asarray(s, dtype=float), 2.0)
    sign = np.where(s >= 1.0, -1.0, 1.0)
    s = np.where(s >= 1.0, s - 1.0, s)
    s = np.where(s > 0.5, 1.0 - s, s)
    return sign * np.sin(np.pi * s)


def cospi(s: np.ndarray) -> np.ndarray:
    return sinpi(np.asarray(s, dtype=float) + 0.5)


def _num(text: str) -> float:
    if "/" in text:
        return float(Fraction(text))
    return float(text)


def _fmt(x: float) -> str:
    if float(x).is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(float(x))


class Expr:
    def __call__(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sexpr(self) -> str:
        raise NotImplementedError

    def __repr__(self) -> str:
        return self.sexpr()

    def __eq__(self, other) -> bool:
        return isinstance(other, Expr) and self.sexpr() == other.sexpr()

    def __hash__(self) -> int:
        return hash(self.sexpr())

    def __add__(self, other) -> "Expr":
        return Sum((self, as_expr(other)))

    __radd__ = __add__

    def __sub__(self, other) -> "Expr":
        return Sum((self, Scale(-1.0, as_expr(other))))

    def __rsub__(self, other) -> "Expr":
        return Sum((as_expr(other), Scale(-1.0, self)))

    def __mul__(self, other) -> "Expr":
        if isinstance(other, (int, float)):
            return Scale(float(other), self)
        return Prod((self, as_expr(other)))

    def __rmul__(self, other) -> "Expr":
        return self.__mul__(other)

    def __neg__(self) -> "Expr":
        return Scale(-1.0, self)


def as_expr(e) -> Expr:
    if isinstance(e, Expr):
        return e
    return Const(float(e))


def _pts(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[None, :] if x.ndim == 1 else x


class Const(Expr):
    def __init__(self, c: float):
        self.c = float(c)

    def __call__(self, x):
        x = _pts(x)
        return np.full(x.shape[0], self.c)

    def grad(self, x):
        return np.zeros_like(_pts(x))

    def sexpr(self):
        return f"(const {_fmt(self.c)})"


class SinX(Expr):
    def __init__(self, i: int, freq: int = 1):
        self.i, self.freq = int(i), int(freq)

    def __call__(self, x):
        return sinpi(2.0 * self.freq * _pts(x)[:, self.i])

    def grad(self, x):
        x = _pts(x)
        g = np.zeros_like(x)
        g[:, self.i] = 2 * np.pi * self.freq * cospi(2.0 * self.freq * x[:, self.i])
        return g

    def sexpr(self):
        return f"(sinx {self.i})" if self.freq == 1 else f"(sinx {self.i} {self.freq})"


class CosX(Expr):
    def __init__(self, i: int, freq: int = 1):
        self.i, self.freq = int(i), int(freq)

    def __call__(self, x):
        return cospi(2.0 * self.freq * _pts(x)[:, self.i])

    def grad(self, x):
        x = _pts(x)
        g = np.zeros_like(x)
        g[:, self.i] = -2 * np.pi * self.freq * sinpi(2.0 * self.freq * x[:, self.i])
        return g

    def sexpr(self):
        return f"(cosx {self.i})" if self.freq == 1 else f"(cosx {self.i} {self.freq})"


class Scale(Expr):
    def __init__(self, k: float, e: Expr):
        self.k, self.e = float(k), as_expr(e)

    def __call__(self, x):
        return self.k * self.e(x)

    def grad(self, x):
        return self.k * self.e.grad(x)

    def sexpr(self):
        return f"(scale {_fmt(self.k)} {self.e.sexpr()})"


class Sum(Expr):
    def __init__(self, terms):
        self.terms = tuple(as_expr(t) for t in terms)

    def __call__(self, x):
        return sum(t(x) for t in self.terms)

    def grad(self, x):
        return sum(t.grad(x) for t in self.terms)

    def sexpr(self):
        return "(sum " + " ".join(t.sexpr() for t in self.terms) + ")"


class Prod(Expr):
    def __init__(self, factors):
        self.factors = tuple(as_expr(f) for f in factors)

    def __call__(self, x):
        out = self.factors[0](x)
        for f in self.factors[1:]:
            out = out * f(x)
        return out

    def grad(self, x):
        vals = [f(x) for f in self.factors]
        total = np.zeros_like(_pts(x))
        for i, f in enumerate(self.factors):
            other = np.ones_like(vals[0])
            for j, v in enumerate(vals):
                if j != i:
                    other = other * v
            total += other[:, None] * f.grad(x)
        return total

    def sexpr(self):
        return "(prod " + " ".join(f.sexpr() for f in self.factors) + ")"


class Bump(Expr):
    """exp(1 - 1/(1 - r^2/R^2)) in the periodic distance r to center; equals 1 at the center."""

    def __init__(self, center, radius: float):
        self.center = tuple(float(c) for c in center)
        self.radius = float(radius)
        if not 0 < self.radius < 0.5:
            raise ValueError("bump radius must lie in (0, 1/2)")

    def _parts(self, x):
        x = _pts(x)
        c = np.array(self.center)
        if x.shape[1] != c.size:
            raise ValueError("bump center dimension mismatch")
        d = x - c
        d -= np.round(d)
        u = np.sum(d * d, axis=1) / self.radius**2
        inside = u < 1.0
        val = np.zeros(x.shape[0])
        denom = np.where(inside, 1.0 - u, 1.0)
        val[inside] = np.exp(1.0 - 1.0 / denom[inside])
        return d, denom, val, inside

    def __call__(self, x):
        return self._parts(x)[2]

    def grad(self, x):
        d, denom, val, inside = self._parts(x)
        fac = np.where(inside, -2.0 * val / (self.radius**2 * denom**2), 0.0)
        return fac[:, None] * d

    def sexpr(self):
        c = " ".join(_fmt(v) for v in self.center)
        return f"(bump ({c}) {_fmt(self.radius)})"


class BumpX(Expr):
    """Bump profile in coordinate i alone: exp(1 - 1/(1 - r^2/R^2)), r the periodic distance to c."""

    def __init__(self, i: int, center: float, radius: float):
        self.i, self.center, self.radius = int(i), float(center), float(radius)
        if not 0 < self.radius < 0.5:
            raise ValueError("bump radius must lie in (0, 1/2)")

    def _parts(self, x):
        d = _pts(x)[:, self.i] - self.center
        d -= np.round(d)
        u = d * d / self.radius**2
        inside = u < 1.0
        denom = np.where(inside, 1.0 - u, 1.0)
        val = np.where(inside, np.exp(1.0 - 1.0 / denom), 0.0)
        return d, denom, val, inside

    def __call__(self, x):
        return self._parts(x)[2]

    def grad(self, x):
        x = _pts(x)
        d, denom, val, inside = self._parts(x)
        g = np.zeros_like(x)
        g[:, self.i] = np.where(inside, -2.0 * val * d / (self.radius**2 * denom**2), 0.0)
        return g

    def support(self) -> tuple[float, float]:
        return self.center - self.radius, self.center + self.radius

    def sexpr(self):
        return f"(bumpx {self.i} {_fmt(self.center)} {_fmt(self.radius)})"


_TOKEN = re.compile(r"\(|\)|[^\s()]+")


def parse(text: str) -> Expr:
    tokens = _TOKEN.findall(text)
    pos = 0

    def read():
        nonlocal pos
        tok = tokens[pos]
        pos += 1
        if tok == "(":
            items = []
            while tokens[pos] != ")":
                items.append(read())
            pos += 1
            return items
        if tok == ")":
            raise ValueError("unexpected ')'")
        return tok

    try:
        tree = read()
    except IndexError:
        raise ValueError(f"unbalanced expression: {text!r}") from None
    if pos != len(tokens):
        raise ValueError(f"trailing tokens in {text!r}")
    return _build(tree)


def _build(node) -> Expr:
    if isinstance(node, str):
        return Const(_num(node))
    if not node:
        raise ValueError("empty expression")
    head, args = node[0], node[1:]
    if head == "const":
        return Const(_num(args[0]))
    if head in ("sinx", "cosx"):
        cls = SinX if head == "sinx" else CosX
        return cls(int(args[0]), int(args[1]) if len(args) > 1 else 1)
    if head == "scale":
        return Scale(_num(args[0]), _build(args[1]))
    if head == "sum":
        return Sum([_build(a) for a in args])
    if head == "prod":
        return Prod([_build(a) for a in args])
    if head == "bump":
        if not isinstance(args[0], list):
            raise ValueError("bump center must be a parenthesized list of numbers")
        return Bump([_num(v) for v in args[0]], _num(args[1]))
    if head == "bumpx":
        return BumpX(int(args[0]), _num(args[1]), _num(args[2]))
    raise ValueError(f"unknown combinator {head!r}")


def sin2pi_sum(i: int, j: int) -> Expr:
    """sin(2 pi (x_i + x_j)) written with the basic combinators."""
    return SinX(i) * CosX(j) + CosX(i) * SinX(j)


def cos2pi_sum(i: int, j: int) -> Expr:
    return CosX(i) * CosX(j) - SinX(i) * SinX(j)
