"""Fixed-step RK4 flows on T^n in lifted coordinates, Birkhoff averages and (delta, T)-cycles."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .forms import BasicOneForm, CohomologyClass, EquivariantVectorField, GPath, straight_integrals
from .orbifold import GroupElement, OrbifoldPoint

DEFAULT_STEP = 1e-3


class WindingAliasError(RuntimeError):
    """A single step would move further than half a period, so windings become ambiguous."""


def _steps(time: float, step: float) -> tuple[int, float]:
    if time < 0:
        raise ValueError("time must be nonnegative")
    if time == 0:
        return 0, step
    n = int(np.ceil(time / step - 1e-9))
    return n, time / n


def _rhs(field: EquivariantVectorField, form: BasicOneForm | None, x: np.ndarray):
    v = field(x)
    if form is None:
        return v, None
    return v, np.einsum("mn,mn->m", form(x), v)


def rk4_step(field, form, x, h):
    k1, l1 = _rhs(field, form, x)
    k2, l2 = _rhs(field, form, x + 0.5 * h * k1)
    k3, l3 = _rhs(field, form, x + 0.5 * h * k2)
    k4, l4 = _rhs(field, form, x + h * k3)
    dx = h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if np.abs(dx).max(initial=0.0) >= 0.5:
        raise WindingAliasError(f"step {h} moves more than 1/2; reduce the step")
    dl = None if form is None else h / 6.0 * (l1 + 2 * l2 + 2 * l3 + l4)
    return dx, dl


def integrate_many(field: EquivariantVectorField, x0, time: float, step: float = DEFAULT_STEP,
                   form: BasicOneForm | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Lifted endpoints after `time` and line integrals of `form` (zeros if none) for many seeds."""
    x = np.array(np.atleast_2d(x0), dtype=float)
    acc = np.zeros(len(x))
    n, h = _steps(time, step)
    for _ in range(n):
        dx, dl = rk4_step(field, form, x, h)
        x += dx
        if dl is not None:
            acc += dl
    return x, acc


@dataclass(frozen=True)
class Trajectory:
    start: np.ndarray
    step: float
    times: np.ndarray
    states: np.ndarray  # lifted, shape (k+1, n)
    integral: np.ndarray | None  # cumulative line integral of the form, or None

    @property
    def total_time(self) -> float:
        return float(self.times[-1])

    @property
    def torus_states(self) -> np.ndarray:
        return np.mod(self.states, 1.0)

    @property
    def endpoint(self) -> np.ndarray:
        return self.torus_states[-1]

    @property
    def displacement(self) -> np.ndarray:
        return self.states[-1] - self.states[0]

    def to_csv(self, path) -> None:
        n = self.states.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", *[f"lift_{i}" for i in range(n)], *[f"x_{i}" for i in range(n)]])
            for t, s, x in zip(self.times, self.states, self.torus_states):
                w.writerow([f"{t:.12g}", *[f"{v:.12g}" for v in s], *[f"{v:.12g}" for v in x]])


def integrate(field: EquivariantVectorField, x0, time: float, step: float = DEFAULT_STEP,
              form: BasicOneForm | None = None) -> Trajectory:
    x = np.asarray(x0, dtype=float).reshape(1, -1).copy()
    n, h = _steps(time, step)
    states = np.empty((n + 1, x.shape[1]))
    states[0] = x[0]
    integral = None if form is None else np.zeros(n + 1)
    for k in range(n):
        dx, dl = rk4_step(field, form, x, h)
        x += dx
        states[k + 1] = x[0]
        if integral is not None:
            integral[k + 1] = integral[k] + dl[0]
    return Trajectory(np.asarray(x0, dtype=float), h, np.arange(n + 1) * h, states, integral)


def birkhoff_average(field: EquivariantVectorField, form: BasicOneForm, x0, horizon: float,
                     step: float = DEFAULT_STEP) -> float:
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    _, acc = integrate_many(field, x0, horizon, step, form)
    return float(acc[0] / horizon)


@dataclass
class DeltaTCycle:
    base: OrbifoldPoint
    tau: float
    closing_group_element: GroupElement
    closing_gap: float
    pairing: float
    integer_class: tuple[int, ...] | None = None
    trajectory: Trajectory | None = field(default=None, repr=False)
    closing_point: np.ndarray | None = field(default=None, repr=False)

    def loop(self) -> GPath:
        """The G-loop: flow segment, straight closing segment, then the arrow back to the base."""
        k = int(round(self.tau / self.trajectory.step))
        seg = np.vstack([self.trajectory.states[: k + 1], self.closing_point[None, :]])
        base = np.asarray(self.base.rep)
        return GPath([seg, np.stack([base, base])], [self.closing_group_element.inverse(), GroupElement.identity(len(base))])

    def to_json(self) -> dict:
        return {
            "base": list(self.base.rep),
            "tau": self.tau,
            "closing_group_element": self.closing_group_element.to_spec(),
            "closing_gap": self.closing_gap,
            "pairing": self.pairing,
            "integer_class": None if self.integer_class is None else list(self.integer_class),
        }


def detect_cycle(field: EquivariantVectorField, cls: CohomologyClass, x0, delta: float, T: float,
                 horizon: float, step: float = DEFAULT_STEP) -> DeltaTCycle | None:
    """First return of the orbit to within delta of its start after time T.

    Scans the samples with t > T; within the first run of samples closer
    than delta it takes the closest one, so a periodic orbit closes at its
    period rather than at the edge of the delta-window.
    """
    eps, d_max = float("inf"), float("inf")
    if cls is not None:
        _, d_max = _scale(cls)
    if delta > d_max + 1e-12:
        raise ValueError(f"delta {delta} exceeds the scale {d_max} of the class")
    if horizon < T:
        raise ValueError("horizon must be at least T")
    pres = field.presentation
    x0 = np.mod(np.asarray(x0, dtype=float), 1.0)
    form = cls.representative
    traj = integrate(field, x0, horizon, step, form)
    late = np.flatnonzero(traj.times > T + 1e-12)
    if late.size == 0:
        return None
    d = pres.quotient_distance(traj.torus_states[late], x0)
    hits = np.flatnonzero(d < delta)
    if hits.size == 0:
        return None
    first = hits[0]
    run_end = first
    while run_end + 1 < d.size and d[run_end + 1] < delta:
        run_end += 1
    j = first + int(np.argmin(d[first: run_end + 1]))
    k = int(late[j])
    end = traj.states[k]
    gi, target = pres.nearest_image(end, x0)
    g = pres.group[gi]
    closing = float(straight_integrals(form, end, target)[0])
    pairing = float(traj.integral[k] + closing)
    integer_class = None
    if pres.is_trivial:
        integer_class = tuple(int(v) for v in np.round(target - x0))
    return DeltaTCycle(pres.point(x0), float(traj.times[k]), g, float(d[j]), pairing, integer_class,
                       traj, target)


def _scale(cls: CohomologyClass) -> tuple[float, float]:
    from .forms import compute_scale

    return compute_scale(cls)


def cycles_to_json(cycles: Sequence[DeltaTCycle], path) -> None:
    with open(path, "w") as fh:
        json.dump([c.to_json() for c in cycles], fh, indent=2)
