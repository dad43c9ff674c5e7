"""Periodic reference orbits: representation, shift, cost, residuals and
orbit optimization (enumeration on finite plants, multi-start SQP on smooth
plants, MILP on affine plants with discrete inputs)."""

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import optim
from .plant import BoxSet, PlantModel, UnsupportedPlantOperation, stage_cost

TOL_FEAS = 1e-6
TOL_KKT = 1e-6


class EnumerationBudgetExceeded(RuntimeError):
    pass


class OrbitSolveError(RuntimeError):
    """Solver nonconvergence; carries the last iterate and residuals."""

    def __init__(self, message, orbit=None, report=None):
        super().__init__(message)
        self.orbit = orbit
        self.report = report


@dataclass
class PeriodicReference:
    """T points (x_r(k), u_r(k)) anchored so points[0] lives at time t0."""

    X: np.ndarray  # (T, n)
    U: np.ndarray  # (T, m)
    t0: int = 0

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.U = np.atleast_2d(np.asarray(self.U, dtype=float))
        if self.X.shape[0] != self.U.shape[0]:
            raise ValueError("state/input point counts differ")

    @property
    def T(self):
        return self.X.shape[0]

    def point(self, k):
        k = k % self.T
        return self.X[k], self.U[k]

    def copy(self):
        return PeriodicReference(self.X.copy(), self.U.copy(), self.t0)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf)
        n, m = self.X.shape[1], self.U.shape[1]
        w.writerow(["k"] + [f"x_{i+1}" for i in range(n)] + [f"u_{j+1}" for j in range(m)])
        for k in range(self.T):
            w.writerow([k] + [f"{v:.17g}" for v in self.X[k]] + [f"{v:.17g}" for v in self.U[k]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text, t0=0):
        rows = list(csv.reader(io.StringIO(text)))
        head = rows[0]
        n = sum(1 for h in head if h.startswith("x_"))
        X, U = [], []
        for row in rows[1:]:
            vals = [float(v) for v in row[1:]]
            X.append(vals[:n])
            U.append(vals[n:])
        return cls(np.array(X), np.array(U), t0)


@dataclass
class OrbitResidual:
    dynamics_gap: float
    constraint_gap: float

    def feasible(self, tol=TOL_FEAS):
        return self.dynamics_gap <= tol and self.constraint_gap <= tol


def shift(r: PeriodicReference) -> PeriodicReference:
    """Rotate the orbit one step forward; shift^T is the identity on points."""
    return PeriodicReference(np.roll(r.X, -1, axis=0), np.roll(r.U, -1, axis=0), r.t0 + 1)


def cost_JT(r: PeriodicReference, model: PlantModel, y) -> float:
    """Orbit cost: sum of stage costs over one period starting at the anchor."""
    return float(sum(stage_cost(model, r.X[k], r.U[k], r.t0 + k, y) for k in range(r.T)))


def feasibility_residual(r: PeriodicReference, model: PlantModel) -> OrbitResidual:
    dyn = 0.0
    con = 0.0
    for k in range(r.T):
        if model.transitions is not None:
            # finite plants: a transition exists only if the edge is in the table
            key = (round(float(r.X[k, 0])), round(float(r.U[k, 0])))
            hit = model.transitions.table.get(key)
            ok = hit is not None and abs(hit[0] - r.X[(k + 1) % r.T, 0]) < 1e-9
            dyn = max(dyn, 0.0 if ok else 1.0)
        else:
            nxt = np.atleast_1d(model.f(r.X[k], r.U[k], r.t0 + k))
            dyn = max(dyn, float(np.max(np.abs(nxt - r.X[(k + 1) % r.T]))))
        con = max(con, model.Z_r(r.t0 + k).violation(np.concatenate([r.X[k], r.U[k]])))
    return OrbitResidual(dynamics_gap=dyn, constraint_gap=con)


# ---------------------------------------------------------------------------
# finite plants: exact enumeration
# ---------------------------------------------------------------------------

def _all_cycles(model: PlantModel, T, budget=200000):
    """All closed admissible walks of length T, as (states, inputs, costs)."""
    trans = model.transitions
    cycles = []
    count = 0
    for s0 in trans.states:
        stack = [(s0, [], [], [])]
        while stack:
            s, xs, us, cs = stack.pop()
            count += 1
            if count > budget:
                raise EnumerationBudgetExceeded(f"cycle enumeration exceeded {budget} nodes")
            k = len(us)
            if k == T:
                if s == s0:
                    cycles.append((xs, us, cs))
                continue
            for (u, nxt, c) in trans.edges_from(s):
                stack.append((nxt, xs + [s], us + [u], cs + [c]))
    return cycles


def brute_force_orbit(model: PlantModel, T, t0=0, budget=200000):
    """Exact optimal T-periodic orbit of a finite plant by cycle enumeration."""
    if model.transitions is None:
        raise UnsupportedPlantOperation("plant has no finite transition table")
    best = None
    for xs, us, cs in _all_cycles(model, T, budget):
        tot = sum(cs)
        key = (tot, us)
        if best is None or key < best[0]:
            best = (key, xs, us)
    if best is None:
        return None, np.inf
    _, xs, us = best
    r = PeriodicReference(np.array(xs, dtype=float).reshape(T, 1),
                          np.array(us, dtype=float).reshape(T, 1), t0)
    return r, best[0][0]


def _reachable_after(model: PlantModel, x0, steps):
    cur = {round(float(np.atleast_1d(x0)[0]))}
    for _ in range(steps):
        nxt = set()
        for s in cur:
            for (u, ns, c) in model.transitions.edges_from(s):
                nxt.add(ns)
        cur = nxt
    return cur


# ---------------------------------------------------------------------------
# smooth plants: stacked-variable NLP
# ---------------------------------------------------------------------------

def _orbit_nlp(model: PlantModel, T, y, t0):
    """Stacked (x_r, u_r) decision vector with wrap-around equality rows."""
    n, m = model.n, model.m
    dim = T * (n + m)

    def split(z):
        X = z[:T * n].reshape(T, n)
        U = z[T * n:].reshape(T, m)
        return X, U

    def batch(Z):
        K = Z.shape[1]
        Xs = Z[:T * n].reshape(T, n, K)
        Us = Z[T * n:].reshape(T, m, K)
        obj = np.zeros(K)
        eq = np.zeros((T * n, K))
        for k in range(T):
            nxt = model.f(Xs[k], Us[k], t0 + k)
            eq[k * n:(k + 1) * n] = nxt - Xs[(k + 1) % T]
            obj += model.cost(Xs[k], Us[k], t0 + k, y)
        return obj, eq, np.zeros((0, K))

    lb = np.empty(dim)
    ub = np.empty(dim)
    for k in range(T):
        zr = model.Z_r(t0 + k)
        lb[k * n:(k + 1) * n] = zr.lo[:n]
        ub[k * n:(k + 1) * n] = zr.hi[:n]
        lb[T * n + k * m: T * n + (k + 1) * m] = zr.lo[n:]
        ub[T * n + k * m: T * n + (k + 1) * m] = zr.hi[n:]
    return optim.NlpProblem(dim=dim, eval_batch=batch, lb=lb, ub=ub), split


def _orbit_starts(model, T, init: PeriodicReference, count, seed):
    """Unperturbed init plus sinusoidal input-profile perturbations."""
    starts = [(init.X.copy(), init.U.copy())]
    rng = np.random.default_rng(seed)
    n = model.n
    for s in range(1, count):
        zr0 = model.Z_r(init.t0)
        ulo, uhi = zr0.lo[n:], zr0.hi[n:]
        amp = rng.uniform(0.25, 0.95) * 0.5 * (uhi - ulo)
        phase = rng.uniform(0, 2 * np.pi)
        ks = np.arange(T)[:, None]
        U = np.clip(init.U + amp * np.sin(2 * np.pi * ks / T + phase), ulo, uhi)
        X = np.empty_like(init.X)
        x = init.X[0].copy()
        for k in range(T):
            X[k] = x
            zr = model.Z_r(init.t0 + k)
            x = np.clip(np.atleast_1d(model.f(x, U[k], init.t0 + k)), zr.lo[:n], zr.hi[:n])
        starts.append((X, U))
    return starts


def optimal_orbit(model: PlantModel, T, y, t0=0, init: PeriodicReference = None,
                  multi_start=5, seed=0, budget=400):
    """Locally optimal feasible T-periodic orbit and its cost.

    Finite plants are solved exactly by enumeration; smooth plants by
    multi-start SQP on the stacked orbit variables (best KKT point wins, ties
    by start index).  When the supplied init is feasible the result is never
    worse than it.
    """
    if model.transitions is not None:
        r, c = brute_force_orbit(model, T, t0)
        return r, c
    if not model.smooth:
        raise UnsupportedPlantOperation("orbit NLP needs a smooth plant")
    y = model.check_y(y)
    if init is None:
        zr = model.Z_r(t0)
        mid_x = 0.5 * (zr.lo[:model.n] + zr.hi[:model.n])
        mid_u = 0.5 * (zr.lo[model.n:] + zr.hi[model.n:])
        init = PeriodicReference(np.tile(mid_x, (T, 1)), np.tile(mid_u, (T, 1)), t0)
    p, split = _orbit_nlp(model, T, y, t0)
    best = None
    last_report = None
    for idx, (X0, U0) in enumerate(_orbit_starts(model, T, init, multi_start, seed)):
        z0 = np.concatenate([X0.ravel(), U0.ravel()])
        z, rep = optim.solve_sqp(p, z0, budget=budget, tol_kkt=TOL_KKT, tol_feas=TOL_FEAS)
        last_report = rep
        if not rep.ok:
            continue
        X, U = split(z)
        r = PeriodicReference(X, U, t0)
        res = feasibility_residual(r, model)
        if not res.feasible():
            continue
        c = cost_JT(r, model, y)
        if best is None or c < best[1] - 1e-12:
            best = (r, c, idx)
    init_res = feasibility_residual(init, model)
    if best is None:
        if init_res.feasible():
            return init.copy(), cost_JT(init, model, y)
        raise OrbitSolveError("no feasible KKT point found", orbit=init, report=last_report)
    if init_res.feasible():
        c_init = cost_JT(init, model, y)
        if best[1] > c_init + TOL_KKT:
            return init.copy(), c_init
    return best[0], best[1]


# ---------------------------------------------------------------------------
# affine plants with integer inputs: condensed MILP
# ---------------------------------------------------------------------------

def affine_terms(model: PlantModel, t):
    """A(t), B(t), e(t) of an affine plant; e from evaluating f at the origin."""
    from .plant import linearize
    A, B = linearize(model, np.zeros(model.n), np.zeros(model.m), t)
    e = np.atleast_1d(model.f(np.zeros(model.n), np.zeros(model.m), t))
    return A, B, e


def segment_encoding(segs):
    """Affine-in-index encoding lo_k = a_lo*k, hi_k = a_hi*k of segment sets.

    Returns (a_lo, a_hi, vmax) such that selecting integer v in [0, vmax]
    constrains the coordinate to [a_lo*v, a_hi*v]; raises when the segment
    geometry does not fit this pattern (sufficient for the chiller sets here).
    """
    K = len(segs)
    if K < 2 or segs[0] != (0.0, 0.0):
        raise UnsupportedPlantOperation("segment encoding expects a leading {0} stage")
    a_lo = segs[1][0]
    a_hi = segs[1][1]
    for k, (lo, hi) in enumerate(segs):
        if abs(lo - a_lo * k) > 1e-12 or abs(hi - a_hi * k) > 1e-12:
            raise UnsupportedPlantOperation("segments are not affine in the stage index")
    return a_lo, a_hi, K - 1


def optimal_orbit_milp(model: PlantModel, T, y, t0=0):
    """Global optimal orbit for affine dynamics, linear cost and integer
    stage inputs, via condensed MILP over (x_r(0), u_r stack, stage vars)."""
    n, m = model.n, model.m
    mats = [affine_terms(model, t0 + k) for k in range(T)]
    # decision z = [x0 (n), U (T*m), V (T*#seg-coords)]
    seg_coords = sorted(model.Z_r(t0).segments.keys())
    nseg = len(seg_coords)
    dim = n + T * m + T * nseg
    # rollout: x_k = Phi_k x0 + sum_j Gamma_kj u_j + d_k
    Phis = [np.eye(n)]
    for k in range(T):
        Phis.append(mats[k][0] @ Phis[-1])
    cost_row = np.zeros(dim)
    A_ub, b_ub, A_eq, b_eq = [], [], [], []
    lb = np.full(dim, -np.inf)
    ub = np.full(dim, np.inf)
    Gam = np.zeros((n, dim))   # running linear map x_k = Gam z + dvec
    Gam[:, :n] = np.eye(n)
    dvec = np.zeros(n)
    integer_idx = []
    for k in range(T):
        zr = model.Z_r(t0 + k)
        # state constraints via rollout map
        for i in range(n):
            row = Gam[i].copy()
            A_ub.append(row); b_ub.append(zr.hi[i] - dvec[i])
            A_ub.append(-row); b_ub.append(dvec[i] - zr.lo[i])
        uoff = n + k * m
        for j in range(m):
            coord = n + j
            if coord in zr.segments:
                a_lo, a_hi, vmax = segment_encoding(zr.segments[coord])
                vidx = n + T * m + k * nseg + seg_coords.index(coord)
                integer_idx.append(vidx)
                lb[vidx], ub[vidx] = 0.0, float(vmax)
                row = np.zeros(dim); row[uoff + j] = -1.0; row[vidx] = a_lo
                A_ub.append(row); b_ub.append(0.0)          # a_lo*v <= u
                row = np.zeros(dim); row[uoff + j] = 1.0; row[vidx] = -a_hi
                A_ub.append(row); b_ub.append(0.0)          # u <= a_hi*v
                lb[uoff + j], ub[uoff + j] = zr.lo[coord], zr.hi[coord]
            else:
                lb[uoff + j], ub[uoff + j] = zr.lo[coord], zr.hi[coord]
        # cost: linear stage cost gradient at origin
        g, Hs = (model.cost_derivs(np.zeros(n), np.zeros(m), t0 + k, y)
                 if model.cost_derivs else (None, None))
        if g is None or np.any(Hs):
            raise UnsupportedPlantOperation("MILP orbit path needs a linear stage cost")
        cost_row += g[:n] @ Gam
        cost_row[uoff:uoff + m] += g[n:]
        # advance rollout
        A_k, B_k, e_k = mats[k]
        Gam = A_k @ Gam
        Gam[:, uoff:uoff + m] += B_k
        dvec = A_k @ dvec + e_k
    # wrap-around: x_T = x_0
    for i in range(n):
        row = Gam[i].copy()
        row[i] -= 1.0
        A_eq.append(row); b_eq.append(-dvec[i])
    lb[:n] = -np.inf
    ub[:n] = np.inf
    lp = optim.LinearProgram(cost_row, A_ub=np.array(A_ub), b_ub=np.array(b_ub),
                             A_eq=np.array(A_eq), b_eq=np.array(b_eq), lb=lb, ub=ub)
    z, rep = optim.solve_milp(lp, integer_idx) if integer_idx else optim.solve_lp(lp)
    if z is None or not rep.ok:
        raise OrbitSolveError(f"orbit MILP failed: {rep.status}", report=rep)
    X = np.empty((T, n))
    x = z[:n]
    U = z[n:n + T * m].reshape(T, m)
    for k in range(T):
        X[k] = x
        x = np.atleast_1d(model.f(x, U[k], t0 + k))
    r = PeriodicReference(X, U, t0)
    return r, cost_JT(r, model, y)


# ---------------------------------------------------------------------------
# best reachable orbit cost
# ---------------------------------------------------------------------------

def reachable_orbit_cost(model: PlantModel, x, t, y, kappa_j, N, ingredients,
                         c_kappa=100.0, budget=200000):
    """Minimum orbit cost over references reachable in N steps into the
    terminal set while honoring the kappa improvement constraints.

    Exact by enumeration on finite plants; local SQP estimate on smooth
    plants.  Returns (orbit or None, cost); cost is +inf when infeasible.
    """
    T = len(kappa_j)
    if model.transitions is not None:
        reach = _reachable_after(model, x, N)
        best = None
        for xs, us, cs in _all_cycles(model, T, budget):
            if round(float(xs[0])) not in reach:
                continue
            dk = sum(cs) - float(np.sum(kappa_j))
            if np.all(np.isfinite(kappa_j)):
                if any(cs[j] > kappa_j[j] - c_kappa * dk + 1e-9 for j in range(T)):
                    continue
            tot = sum(cs)
            key = (tot, us)
            if best is None or key < best[0]:
                best = (key, xs, us)
        if best is None:
            return None, np.inf
        r = PeriodicReference(np.array(best[1], dtype=float).reshape(T, 1),
                              np.array(best[2], dtype=float).reshape(T, 1), t + N)
        return r, best[0][0]
    return _reachable_orbit_nlp(model, x, t, y, kappa_j, N, ingredients, c_kappa)


def _reachable_orbit_nlp(model, x, t, y, kappa_j, N, ingredients, c_kappa):
    from .terminal import terminal_membership_residual
    n, m, T = model.n, model.m, len(kappa_j)
    x = np.asarray(x, dtype=float)
    # z = [path states x(1..N), path inputs u(0..N-1), orbit X (T,n), orbit U (T,m)]
    off_xu = N * n
    off_X = off_xu + N * m
    off_U = off_X + T * n
    dim = off_U + T * m

    def parts(z):
        Xp = z[:off_xu].reshape(N, n) if N else np.zeros((0, n))
        Up = z[off_xu:off_X].reshape(N, m) if N else np.zeros((0, m))
        Xr = z[off_X:off_U].reshape(T, n)
        Ur = z[off_U:].reshape(T, m)
        return Xp, Up, Xr, Ur

    def objective(z):
        _, _, Xr, Ur = parts(z)
        return float(sum(model.cost(Xr[k], Ur[k], t + N + k, y) for k in range(T)))

    def eq(z):
        Xp, Up, Xr, Ur = parts(z)
        res = []
        prev = x
        for k in range(N):
            res.append(np.atleast_1d(model.f(prev, Up[k], t + k)) - Xp[k])
            prev = Xp[k]
        for k in range(T):
            res.append(np.atleast_1d(model.f(Xr[k], Ur[k], t + N + k)) - Xr[(k + 1) % T])
        xN = Xp[N - 1] if N else x
        if ingredients.variant == "tec":
            res.append(xN - Xr[0])
        return np.concatenate(res) if res else np.zeros(0)

    def ineq(z):
        Xp, Up, Xr, Ur = parts(z)
        rows = []
        xN = Xp[N - 1] if N else x
        if ingredients.variant != "tec":
            rows.append(terminal_membership_residual(xN, Xr[0], ingredients, t + N))
        ells = np.array([float(model.cost(Xr[k], Ur[k], t + N + k, y)) for k in range(T)])
        if np.all(np.isfinite(kappa_j)):
            dk = float(np.sum(ells) - np.sum(kappa_j))
            rows.extend(ells[j] - (kappa_j[j] - c_kappa * dk) for j in range(T))
        return np.array(rows, dtype=float) if rows else np.zeros(0)

    lb = np.full(dim, -np.inf)
    ub = np.full(dim, np.inf)
    for k in range(N):
        zk = model.Z(t + k)
        lb[k * n:(k + 1) * n] = zk.lo[:n] if isinstance(zk, BoxSet) else -np.inf
        ub[k * n:(k + 1) * n] = zk.hi[:n] if isinstance(zk, BoxSet) else np.inf
        lb[off_xu + k * m: off_xu + (k + 1) * m] = zk.lo[n:]
        ub[off_xu + k * m: off_xu + (k + 1) * m] = zk.hi[n:]
    for k in range(T):
        zr = model.Z_r(t + N + k)
        lb[off_X + k * n: off_X + (k + 1) * n] = zr.lo[:n]
        ub[off_X + k * n: off_X + (k + 1) * n] = zr.hi[:n]
        lb[off_U + k * m: off_U + (k + 1) * m] = zr.lo[n:]
        ub[off_U + k * m: off_U + (k + 1) * m] = zr.hi[n:]
    p = optim.NlpProblem(dim=dim, objective=objective, eq=eq, ineq=ineq, lb=lb, ub=ub)
    # initialize on the constant hold of x
    z0 = np.zeros(dim)
    prev = x
    for k in range(N):
        z0[off_xu + k * m: off_xu + (k + 1) * m] = np.clip(
            np.zeros(m), lb[off_xu + k * m: off_xu + (k + 1) * m],
            ub[off_xu + k * m: off_xu + (k + 1) * m])
        prev = np.atleast_1d(model.f(prev, z0[off_xu + k * m: off_xu + (k + 1) * m], t + k))
        z0[k * n:(k + 1) * n] = prev
    for k in range(T):
        z0[off_X + k * n: off_X + (k + 1) * n] = np.clip(prev, lb[off_X + k * n: off_X + (k + 1) * n],
                                                         ub[off_X + k * n: off_X + (k + 1) * n])
        z0[off_U + k * m: off_U + (k + 1) * m] = 0.5 * (lb[off_U + k * m: off_U + (k + 1) * m]
                                                        + ub[off_U + k * m: off_U + (k + 1) * m])
    z, rep = optim.solve_sqp(p, z0, budget=600)
    if not rep.ok or rep.max_violation > TOL_FEAS:
        return None, np.inf
    _, _, Xr, Ur = parts(z)
    r = PeriodicReference(Xr, Ur, t + N)
    return r, cost_JT(r, model, y)
