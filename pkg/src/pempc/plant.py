"""Controlled-system description: periodic dynamics, economic stage cost,
constraint sets and their derivatives.

A plant is either smooth (vectorized numpy dynamics, optionally with analytic
Jacobian/cost-derivative closures) or finite (explicit transition table, e.g.
the three-node graph system); finite plants refuse the differential
interfaces.
"""

from dataclasses import dataclass, field

import numpy as np


class PlantDomainError(ValueError):
    """Input outside the declared domain (e.g. parameter y outside Y)."""


class NumericDomainError(ArithmeticError):
    """An evaluation produced a non-finite value."""


class UnsupportedPlantOperation(RuntimeError):
    """Operation requires smoothness the plant does not provide."""


# ---------------------------------------------------------------------------
# constraint sets
# ---------------------------------------------------------------------------

@dataclass
class BoxSet:
    """Axis-aligned box over stacked (x, u) with optional extras.

    ``segments`` maps a coordinate index to a sorted list of disjoint
    [lo, hi] intervals (disjoint-union inputs such as chiller stages); such
    coordinates are integer decisions. ``G``/``h`` add linear inequalities
    G z <= h over the stacked vector.
    """

    lo: np.ndarray
    hi: np.ndarray
    segments: dict = field(default_factory=dict)
    G: np.ndarray | None = None
    h: np.ndarray | None = None

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if self.lo.shape != self.hi.shape:
            raise ValueError("bound shape mismatch")
        if np.any(self.lo > self.hi):
            raise ValueError("empty box")

    @property
    def dim(self):
        return self.lo.size

    def violation(self, z):
        """Largest constraint violation at z (0 when inside)."""
        z = np.asarray(z, dtype=float)
        v = float(np.max(np.maximum(self.lo - z, z - self.hi), initial=0.0))
        for i, segs in self.segments.items():
            d = min(max(s[0] - z[i], z[i] - s[1], 0.0) for s in segs)
            v = max(v, d)
        if self.G is not None:
            v = max(v, float(np.max(self.G @ z - self.h, initial=0.0)))
        return max(v, 0.0)

    def contains(self, z, tol=1e-9):
        return self.violation(z) <= tol

    def nests_within(self, outer, margin):
        """True when this set sits inside ``outer`` with the given margin.

        Segment coordinates only require containment (a degenerate segment
        such as {0} has no interior to recede into); interval coordinates
        must keep a strict margin on both sides.
        """
        for i in range(self.dim):
            if i in self.segments or i in outer.segments:
                inner = self.segments.get(i, [(self.lo[i], self.hi[i])])
                out = outer.segments.get(i, [(outer.lo[i], outer.hi[i])])
                for s in inner:
                    if not any(o[0] - 1e-12 <= s[0] and s[1] <= o[1] + 1e-12 for o in out):
                        return False
            else:
                if self.lo[i] - outer.lo[i] < margin - 1e-12:
                    return False
                if outer.hi[i] - self.hi[i] < margin - 1e-12:
                    return False
        return True

    def sample(self, rng, count):
        """Uniform box samples; segment coordinates snap into a segment."""
        z = rng.uniform(self.lo, self.hi, size=(count, self.dim))
        for i, segs in self.segments.items():
            pick = rng.integers(0, len(segs), size=count)
            for k, s in enumerate(segs):
                sel = pick == k
                z[sel, i] = rng.uniform(s[0], s[1], size=int(sel.sum()))
        return z


@dataclass
class EdgeSet:
    """Admissible (state, input) pairs of a finite plant."""

    pairs: frozenset

    def violation(self, z):
        key = (round(float(z[0])), round(float(z[1])))
        exact = abs(z[0] - key[0]) < 1e-9 and abs(z[1] - key[1]) < 1e-9
        return 0.0 if (exact and key in self.pairs) else 1.0

    def contains(self, z, tol=1e-9):
        return self.violation(z) <= tol

    @property
    def dim(self):
        return 2


# ---------------------------------------------------------------------------
# plant model
# ---------------------------------------------------------------------------

@dataclass
class FiniteTransitions:
    """Transition table: (state, input) -> (next state, stage cost)."""

    states: tuple
    table: dict  # (x, u) -> (x_next, cost)

    def edges_from(self, x):
        return [(u, nxt, c) for (xs, u), (nxt, c) in sorted(self.table.items()) if xs == x]


@dataclass
class PlantModel:
    """Discrete-time plant with period T, economic cost and constraint sets.

    ``f`` and ``cost`` must be periodic in t with period T and accept
    batched arguments (x of shape (n,) or (n, K)).  ``Z_phases``/``Zr_phases``
    hold one constraint set per phase t mod T.
    """

    name: str
    n: int
    m: int
    T: int
    f: object
    cost: object                      # cost(x, u, t, y) -> scalar / (K,)
    Z_phases: tuple
    Zr_phases: tuple
    Y_lo: np.ndarray
    Y_hi: np.ndarray
    smooth: bool = True
    f_jac: object = None              # (x, u, t) -> (A, B)
    cost_derivs: object = None        # (x, u, t, y) -> (grad (n+m,), hess)
    integer_input_mask: np.ndarray | None = None
    transitions: FiniteTransitions | None = None
    delta_int: float = 1e-3

    def Z(self, t):
        return self.Z_phases[t % self.T]

    def Z_r(self, t):
        return self.Zr_phases[t % self.T]

    def y_dim(self):
        return self.Y_lo.size

    def check_y(self, y):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if y.size != self.Y_lo.size:
            raise PlantDomainError(f"parameter dimension {y.size} != {self.Y_lo.size}")
        if np.any(y < self.Y_lo - 1e-12) or np.any(y > self.Y_hi + 1e-12):
            raise PlantDomainError(f"parameter {y} outside Y")
        return y


@dataclass
class ParameterSignal:
    """Piecewise-constant exogenous parameter y(t)."""

    change_times: tuple   # sorted, first entry 0
    values: np.ndarray    # (len(change_times), p)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if list(self.change_times) != sorted(self.change_times):
            raise ValueError("change_times must be sorted")
        if self.change_times[0] != 0:
            raise ValueError("signal must start at t=0")

    def y_at(self, t):
        idx = int(np.searchsorted(self.change_times, t, side="right") - 1)
        return self.values[idx]

    @classmethod
    def constant(cls, y):
        return cls(change_times=(0,), values=np.atleast_2d(np.asarray(y, dtype=float)))


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def step_dynamics(model: PlantModel, x, u, t):
    """One dynamics step x(t+1) = f(x(t), u(t), t); pure and deterministic."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if not np.isfinite(x).all() or not np.isfinite(u).all():
        raise NumericDomainError("non-finite state or input")
    out = np.asarray(model.f(x, u, int(t)), dtype=float)
    if not np.isfinite(out).all():
        bad = np.flatnonzero(~np.isfinite(np.atleast_1d(out)))
        raise NumericDomainError(f"dynamics produced non-finite component(s) {bad.tolist()}")
    return out


def stage_cost(model: PlantModel, x, u, t, y):
    y = model.check_y(y)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    val = model.cost(x, u, int(t), y)
    val = float(val) if np.ndim(val) == 0 else np.asarray(val, dtype=float)
    if not np.all(np.isfinite(val)):
        raise NumericDomainError("stage cost non-finite")
    return val


def fd_step(xi_norm):
    return 1e-6 * (1.0 + xi_norm)


def linearize(model: PlantModel, x, u, t):
    """Jacobians (A, B) of f at (x, u, t); analytic closure or central FD."""
    if not model.smooth:
        raise UnsupportedPlantOperation(f"plant '{model.name}' is not differentiable")
    x = np.asarray(x, dtype=float).reshape(model.n)
    u = np.asarray(u, dtype=float).reshape(model.m)
    if model.f_jac is not None:
        A, B = model.f_jac(x, u, int(t))
        return np.asarray(A, dtype=float), np.asarray(B, dtype=float)
    h = fd_step(max(np.max(np.abs(x), initial=0.0), np.max(np.abs(u), initial=0.0)))
    n, m = model.n, model.m
    # batched central differences: columns = [x+he_i, x-he_i ..., u pert]
    X = np.repeat(x[:, None], 2 * (n + m), axis=1)
    U = np.repeat(u[:, None], 2 * (n + m), axis=1)
    for i in range(n):
        X[i, 2 * i] += h
        X[i, 2 * i + 1] -= h
    for j in range(m):
        U[j, 2 * n + 2 * j] += h
        U[j, 2 * n + 2 * j + 1] -= h
    F = np.asarray(model.f(X, U, int(t)), dtype=float)
    A = (F[:, 0:2 * n:2] - F[:, 1:2 * n:2]) / (2 * h)
    B = (F[:, 2 * n::2] - F[:, 2 * n + 1::2]) / (2 * h)
    return A, B


def cost_derivatives(model: PlantModel, x, u, t, y):
    """Gradient and Hessian of the stage cost w.r.t. stacked (x, u)."""
    if not model.smooth:
        raise UnsupportedPlantOperation(f"plant '{model.name}' has non-smooth cost")
    y = model.check_y(y)
    x = np.asarray(x, dtype=float).reshape(model.n)
    u = np.asarray(u, dtype=float).reshape(model.m)
    if model.cost_derivs is not None:
        g, Hss = model.cost_derivs(x, u, int(t), y)
        return np.asarray(g, dtype=float), np.asarray(Hss, dtype=float)
    nm = model.n + model.m
    xi = np.concatenate([x, u])
    h = fd_step(np.max(np.abs(xi), initial=0.0))

    def ev(v):
        return float(model.cost(v[:model.n], v[model.n:], int(t), y))

    g = np.zeros(nm)
    Hss = np.zeros((nm, nm))
    f0 = ev(xi)
    for i in range(nm):
        e = np.zeros(nm)
        e[i] = h
        fp, fm = ev(xi + e), ev(xi - e)
        g[i] = (fp - fm) / (2 * h)
        Hss[i, i] = (fp - 2 * f0 + fm) / h ** 2
    for i in range(nm):
        for j in range(i + 1, nm):
            ei = np.zeros(nm); ei[i] = h
            ej = np.zeros(nm); ej[j] = h
            v = (ev(xi + ei + ej) - ev(xi + ei - ej)
                 - ev(xi - ei + ej) + ev(xi - ei - ej)) / (4 * h ** 2)
            Hss[i, j] = Hss[j, i] = v
    return g, Hss


def check_constraint_nesting(model: PlantModel):
    """Z_r(t) inside int Z(t) with margin delta_int, for one full period."""
    for t in range(model.T):
        zr, z = model.Z_r(t), model.Z(t)
        if isinstance(zr, EdgeSet) or isinstance(z, EdgeSet):
            continue  # finite plants: nesting has no interior notion
        if not zr.nests_within(z, model.delta_int):
            return False
    return True
