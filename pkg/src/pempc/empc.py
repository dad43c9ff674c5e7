"""Receding-horizon economic controller with an online-optimized artificial
periodic reference orbit.

The per-step optimization couples a condensed input stack with the orbit
variables (orbit initial state plus one input per orbit point), so the
continuous decision dimension is n + m*(T+N); with a terminal equality
constraint and a zero-length horizon the orbit is anchored at the measured
state and only the m*T orbit inputs remain.  Smooth plants solve an SQP,
affine plants with discrete inputs a MILP, finite plants an exact
enumeration.  A shifted candidate solution warm-starts every solve and
replaces the optimizer output whenever the latter is worse or violates
constraints beyond tolerance, so the closed-loop guarantees survive solver
hiccups.
"""

from dataclasses import dataclass, field

import numpy as np

from . import optim
from .orbit import (PeriodicReference, cost_JT, feasibility_residual, shift)
from .plant import (BoxSet, PlantModel, UnsupportedPlantOperation, stage_cost,
                    step_dynamics)
from .terminal import (TerminalIngredients, terminal_controller,
                       terminal_cost, terminal_membership_residual)

TOL_FEAS = 1e-6
SQRT_SMOOTHING = 1e-12  # smooths the norm term of the positive-definite cost


class InitializationError(RuntimeError):
    """The optimization problem is infeasible at t=0."""


class SolverHardFailure(RuntimeError):
    """Solver failed and no feasible candidate is available."""


@dataclass
class EmpcConfig:
    """Controller settings; ``scheme`` selects proposed/naive/tracking/
    unconstrained assembly, ``cost_variant`` the per-phase kappa constraints
    (standard) or the aggregate orbit-cost constraint with the modified
    terminal cost (modified)."""

    horizon: int
    period: int
    scheme: str = "proposed"            # proposed | naive | tracking | unconstrained
    cost_variant: str = "modified"      # standard | modified
    c_kappa: float = 100.0
    beta_mode: str = "constant"         # constant | adaptive
    beta0: float = 10.0
    beta_growth: float = 2.0
    beta_window: int = 10
    beta_tau: float = 1e-6
    beta_max: float = 1e6
    multi_step: int = 1
    w_pen: float = 1e4
    fallback_cost_tol: float = 1e-4
    fallback_viol_tol: float = 1e-3
    kappa_strict_tol: float = 1e-9
    penalty_threshold: float = TOL_FEAS
    penalty_weight: float = 1e3
    solver_budget: int = 1000
    init_feas_tol: float = TOL_FEAS
    tracking_Q: float = 0.05
    tracking_R: float = 1.0

    def validate(self, ing: TerminalIngredients | None):
        if self.horizon < 0 or self.period < 1:
            raise ValueError("need N >= 0 and T >= 1")
        if self.c_kappa < 0:
            raise ValueError("c_kappa must be nonnegative")
        if self.multi_step > 1 and (ing is None or ing.variant != "tec"):
            raise ValueError("multi-step commitment requires the TEC variant")
        if self.scheme not in ("proposed", "naive", "tracking", "unconstrained"):
            raise ValueError(f"unknown scheme {self.scheme}")
        if self.cost_variant not in ("standard", "modified"):
            raise ValueError(f"unknown cost variant {self.cost_variant}")


@dataclass
class Plan:
    """One open-loop solution: input stack, predicted states, orbit."""

    u_seq: np.ndarray            # (N, m)
    x_seq: np.ndarray            # (N+1, n); x_seq[0] = measured state
    orbit: PeriodicReference | None

    def copy(self):
        return Plan(self.u_seq.copy(), self.x_seq.copy(),
                    self.orbit.copy() if self.orbit is not None else None)


@dataclass
class PlanMetrics:
    objective: float
    max_violation: float
    kappa_residual: float
    eps_viol: float
    kappa_active: bool


@dataclass
class MpcSolution:
    plan: Plan
    metrics: PlanMetrics
    provenance: str              # optimized | candidate-fallback | committed
    delta_kappa: float = np.nan
    iterations: int = 0
    kkt_residual: float = np.nan
    status: str = ""
    penalty_fired: bool = False
    candidate_violation: float = np.nan


@dataclass
class ControllerState:
    kappa_j: np.ndarray
    beta: float
    prev_plan: Plan | None = None
    commit_left: int = 0
    kappa_history: list = field(default_factory=list)
    stagnation: int = 0

    def kappa(self):
        return float(np.sum(self.kappa_j))


# ---------------------------------------------------------------------------
# plan evaluation (shared by solver output, candidates and the validator)
# ---------------------------------------------------------------------------

def orbit_stage_costs(model, orbit, y):
    return np.array([stage_cost(model, orbit.X[k], orbit.U[k], orbit.t0 + k, y)
                     for k in range(orbit.T)])


def plan_objective(model, ing, config, t, y, beta, plan: Plan):
    """Objective of problem at time t evaluated on an explicit plan."""
    N = config.horizon
    obj = 0.0
    for k in range(N):
        obj += stage_cost(model, plan.x_seq[k], plan.u_seq[k], t + k, y)
    if config.scheme == "unconstrained":
        return obj
    ells = orbit_stage_costs(model, plan.orbit, y)
    jt = float(np.sum(ells))
    if config.scheme == "tracking":
        obj = 0.0
        T = plan.orbit.T
        for k in range(N):
            ref = plan.orbit.point((k - N) % T)
            dx = plan.x_seq[k] - ref[0]
            du = plan.u_seq[k] - ref[1]
            obj += config.tracking_Q * float(dx @ dx) + config.tracking_R * float(du @ du)
        dxN = plan.x_seq[N] - plan.orbit.X[0]
        P = ing.P_at(plan.orbit.t0)
        obj += float(dxN @ P @ dxN)
        return obj + beta * jt
    if config.scheme == "naive":
        return obj + jt
    # proposed scheme
    vf = _vf_value(model, ing, plan.x_seq[N], plan.orbit, y)
    if config.cost_variant == "modified":
        T = plan.orbit.T
        vf += float(np.sum([(T - 1 - k) / T * ells[k] for k in range(T - 1)]))
    return obj + vf + beta * jt


def _vf_value(model, ing, xN, orbit, y):
    if ing.variant == "positive_definite":
        dx = np.asarray(xN, dtype=float) - orbit.X[0]
        q = float(dx @ ing.P_at(orbit.t0) @ dx)
        return q + ing.c * (np.sqrt(q + SQRT_SMOOTHING) - np.sqrt(SQRT_SMOOTHING))
    return terminal_cost(xN, orbit, ing, model, y)


def plan_violations(model, ing, config, x, t, y, kappa_j, plan: Plan):
    """(max_violation, kappa_residual, eps_viol) of a plan at state x, time t."""
    N = config.horizon
    viol = float(np.max(np.abs(plan.x_seq[0] - np.asarray(x, dtype=float))))
    for k in range(N):
        z = np.concatenate([plan.x_seq[k], plan.u_seq[k]])
        viol = max(viol, model.Z(t + k).violation(z))
        nxt = step_dynamics(model, plan.x_seq[k], plan.u_seq[k], t + k)
        viol = max(viol, float(np.max(np.abs(nxt - plan.x_seq[k + 1]))))
    if config.scheme == "unconstrained" or plan.orbit is None:
        return viol, 0.0, 0.0
    res = feasibility_residual(plan.orbit, model)
    eps_viol = max(res.dynamics_gap, res.constraint_gap)
    viol = max(viol, eps_viol)
    if config.scheme == "naive":
        viol = max(viol, float(np.max(np.abs(plan.x_seq[N] - plan.orbit.X[0]))))
    else:
        viol = max(viol, terminal_membership_residual(plan.x_seq[N], plan.orbit.X[0],
                                                      ing, t + N))
    kres = 0.0
    if config.scheme == "proposed":
        ells = orbit_stage_costs(model, plan.orbit, y)
        if config.cost_variant == "modified":
            kres = float(np.sum(ells) - np.sum(kappa_j))
        else:
            dk = float(np.sum(ells) - np.sum(kappa_j))
            if config.period == 1:
                kres = float(ells[0] - kappa_j[0])
            else:
                kres = float(np.max(ells - kappa_j + config.c_kappa * dk))
        viol = max(viol, kres)
    return viol, kres, eps_viol


def evaluate_plan(model, ing, config, x, t, y, kappa_j, beta, plan: Plan):
    obj = plan_objective(model, ing, config, t, y, beta, plan)
    viol, kres, eps = plan_violations(model, ing, config, x, t, y, kappa_j, plan)
    return PlanMetrics(objective=obj, max_violation=viol, kappa_residual=kres,
                       eps_viol=eps, kappa_active=kres >= -1e-9)


# ---------------------------------------------------------------------------
# problem assembly: smooth condensed NLP
# ---------------------------------------------------------------------------

@dataclass
class AssembledProblem:
    nlp: optim.NlpProblem | None
    lp: optim.LinearProgram | None
    integer_indices: tuple
    decode: object                # z -> Plan
    encode: object                # Plan -> z
    n_continuous: int
    kappa_rows: int
    kappa_residual_fn: object     # z -> per-row residuals (structural tests)


def _phase_bounds(model, t0, count, which):
    lo, hi = [], []
    n = model.n
    for k in range(count):
        zset = model.Z_r(t0 + k) if which == "orbit" else model.Z(t0 + k)
        lo.append(zset.lo[n:])
        hi.append(zset.hi[n:])
    return np.concatenate(lo), np.concatenate(hi)


def build_problem(model: PlantModel, ing, config: EmpcConfig, x, t, y,
                  kappa_j, beta) -> AssembledProblem:
    """Assemble the per-step optimization problem at state x and time t."""
    config.validate(ing if config.scheme in ("proposed", "tracking") else None)
    if model.transitions is not None:
        raise UnsupportedPlantOperation("finite plants use the enumeration path")
    if model.integer_input_mask is not None and np.any(model.integer_input_mask):
        return _build_milp(model, ing, config, x, t, y, kappa_j, beta)
    return _build_nlp(model, ing, config, x, t, y, kappa_j, beta)


def _build_nlp(model, ing, config, x, t, y, kappa_j, beta):
    n, m = model.n, model.m
    N, T = config.horizon, config.period
    x = np.asarray(x, dtype=float)
    y = model.check_y(y)
    scheme = config.scheme
    has_orbit = scheme != "unconstrained"
    tec = has_orbit and scheme != "naive" and ing is not None and ing.variant == "tec"
    fixed_x0 = has_orbit and (tec or scheme == "naive") and N == 0
    off_u = 0
    off_x0 = N * m
    off_ur = off_x0 + (0 if fixed_x0 or not has_orbit else n)
    dim = off_ur + (T * m if has_orbit else 0)

    lb = np.full(dim, -np.inf)
    ub = np.full(dim, np.inf)
    if N:
        lo_u, hi_u = _phase_bounds(model, t, N, "path")
        lb[:N * m], ub[:N * m] = lo_u, hi_u
    if has_orbit and not fixed_x0:
        zr0 = model.Z_r(t + N)
        lb[off_x0:off_x0 + n] = zr0.lo[:n]
        ub[off_x0:off_x0 + n] = zr0.hi[:n]
    if has_orbit:
        lo_r, hi_r = _phase_bounds(model, t + N, T, "orbit")
        lb[off_ur:], ub[off_ur:] = lo_r, hi_r

    kappa_sum = float(np.sum(kappa_j))
    n_kappa = 0
    if scheme == "proposed":
        n_kappa = 1 if config.cost_variant == "modified" else T

    wvec = np.array([(T - 1 - k) / T for k in range(T)]) if has_orbit else None

    def rollouts(Z):
        K = Z.shape[1]
        stage = np.zeros(K)
        xk = np.repeat(x[:, None], K, axis=1)
        path_rows = []
        for k in range(N):
            uk = Z[off_u + k * m: off_u + (k + 1) * m]
            stage += model.cost(xk, uk, t + k, y)
            if k >= 1:
                zk = model.Z(t + k)
                path_rows.append(zk.lo[:n, None] - xk)
                path_rows.append(xk - zk.hi[:n, None])
            xk = model.f(xk, uk, t + k)
        if not has_orbit:
            return stage, xk, None, None, path_rows, None
        xr0 = np.repeat(x[:, None], K, axis=1) if fixed_x0 else Z[off_x0:off_x0 + n]
        xr = xr0
        ells = np.zeros((T, K))
        orbit_rows = []
        for k in range(T):
            urk = Z[off_ur + k * m: off_ur + (k + 1) * m]
            ells[k] = model.cost(xr, urk, t + N + k, y)
            if k >= 1:
                zrk = model.Z_r(t + N + k)
                orbit_rows.append(zrk.lo[:n, None] - xr)
                orbit_rows.append(xr - zrk.hi[:n, None])
            xr = model.f(xr, urk, t + N + k)
        return stage, xk, xr0, (ells, xr), path_rows, orbit_rows

    Pmat = ing.P_at(t + N) if (has_orbit and scheme != "naive"
                               and ing is not None and ing.variant != "tec") else None
    cval = ing.c if Pmat is not None and ing.variant == "positive_definite" else 0.0

    def eval_batch(Z):
        K = Z.shape[1]
        stage, xN, xr0, orbit_data, path_rows, orbit_rows = rollouts(Z)
        eq_rows = []
        ineq_rows = list(path_rows)
        obj = stage.copy()
        if has_orbit:
            ells, xr_end = orbit_data
            jt = ells.sum(axis=0)
            eq_rows.append(xr_end - xr0)
            ineq_rows.extend(orbit_rows)
            dx = xN - xr0
            if scheme == "tracking":
                # tracking stage costs reference the orbit points, so the
                # orbit states are re-rolled alongside the path
                obj = np.zeros(K)
                xr_pts = np.empty((T, n, K))
                xr = xr0
                for k in range(T):
                    xr_pts[k] = xr
                    urk = Z[off_ur + k * m: off_ur + (k + 1) * m]
                    xr = model.f(xr, urk, t + N + k)
                xk = np.repeat(x[:, None], K, axis=1)
                for k in range(N):
                    uk = Z[off_u + k * m: off_u + (k + 1) * m]
                    ref_idx = (k - N) % T
                    dxk = xk - xr_pts[ref_idx]
                    duk = uk - Z[off_ur + ref_idx * m: off_ur + (ref_idx + 1) * m]
                    obj += config.tracking_Q * np.sum(dxk * dxk, axis=0) \
                        + config.tracking_R * np.sum(duk * duk, axis=0)
                    xk = model.f(xk, uk, t + k)
                q = np.einsum("ik,ij,jk->k", dx, Pmat, dx)
                obj += q + beta * jt
                ineq_rows.append((q - ing.alpha)[None, :])
            elif scheme == "naive":
                obj = stage + jt
                eq_rows.append(xN - xr0)
            else:  # proposed
                if tec:
                    if N:
                        eq_rows.append(xN - xr0)
                    vf = np.zeros(K)
                else:
                    q = np.einsum("ik,ij,jk->k", dx, Pmat, dx)
                    if ing.variant == "positive_definite":
                        vf = q + cval * (np.sqrt(q + SQRT_SMOOTHING) - np.sqrt(SQRT_SMOOTHING))
                    elif ing.variant == "quadratic_economic":
                        vf = q.copy()
                        from .terminal import compute_adjoint
                        for col in range(K):
                            r_col = PeriodicReference(
                                _orbit_states_from(Z[:, col], model, config, x, t,
                                                   off_x0, off_ur, fixed_x0),
                                Z[off_ur:, col].reshape(T, m), t + N)
                            adj = compute_adjoint(r_col, model, ing.K, y,
                                                  mode=ing.adjoint_mode)
                            vf[col] += float(adj.p[0] @ dx[:, col])
                    else:
                        vf = q
                    ineq_rows.append((q - ing.alpha)[None, :])
                if config.cost_variant == "modified":
                    if T > 1:
                        vf = vf + wvec[:-1] @ ells[:-1]
                    ineq_rows.append((jt - kappa_sum)[None, :])
                else:
                    dk = jt - kappa_sum
                    if T == 1:
                        ineq_rows.append(ells[0][None, :] - kappa_j[0])
                    else:
                        ineq_rows.append(ells - kappa_j[:, None] + config.c_kappa * dk[None, :])
                obj = stage + vf + beta * jt
        eq = np.concatenate(eq_rows, axis=0) if eq_rows else np.zeros((0, K))
        ineq = np.concatenate(ineq_rows, axis=0) if ineq_rows else np.zeros((0, K))
        return obj, eq, ineq

    def decode(z):
        u_seq = z[off_u:off_u + N * m].reshape(N, m)
        xk = x.copy()
        xs = [xk]
        for k in range(N):
            xk = step_dynamics(model, xk, u_seq[k], t + k)
            xs.append(xk)
        orbit = None
        if has_orbit:
            X = _orbit_states_from(z, model, config, x, t, off_x0, off_ur, fixed_x0)
            orbit = PeriodicReference(X, z[off_ur:].reshape(T, m), t + N)
        return Plan(u_seq=u_seq, x_seq=np.array(xs), orbit=orbit)

    def encode(plan: Plan):
        z = np.empty(dim)
        z[off_u:off_u + N * m] = plan.u_seq.reshape(-1)
        if has_orbit:
            if not fixed_x0:
                z[off_x0:off_x0 + n] = plan.orbit.X[0]
            z[off_ur:] = plan.orbit.U.reshape(-1)
        return z

    def kappa_residual_fn(z):
        if scheme != "proposed":
            return np.zeros(0)
        plan = decode(z)
        ells = orbit_stage_costs(model, plan.orbit, y)
        if config.cost_variant == "modified":
            return np.array([float(np.sum(ells) - kappa_sum)])
        if T == 1:
            return np.array([float(ells[0] - kappa_j[0])])
        dk = float(np.sum(ells) - kappa_sum)
        return ells - kappa_j + config.c_kappa * dk

    nlp = optim.NlpProblem(dim=dim, eval_batch=eval_batch, lb=lb, ub=ub)
    return AssembledProblem(nlp=nlp, lp=None, integer_indices=(),
                            decode=decode, encode=encode, n_continuous=dim,
                            kappa_rows=n_kappa, kappa_residual_fn=kappa_residual_fn)


def _orbit_states_from(z, model, config, x, t, off_x0, off_ur, fixed_x0):
    n, m = model.n, model.m
    N, T = config.horizon, config.period
    xr = x.copy() if fixed_x0 else z[off_x0:off_x0 + n].copy()
    X = np.empty((T, n))
    U = z[off_ur:].reshape(T, m)
    for k in range(T):
        X[k] = xr
        xr = np.atleast_1d(model.f(xr, U[k], t + N + k))
    return X


# ---------------------------------------------------------------------------
# problem assembly: affine plants with discrete inputs (MILP)
# ---------------------------------------------------------------------------

def _build_milp(model, ing, config, x, t, y, kappa_j, beta):
    from .orbit import affine_terms, segment_encoding
    if ing is None or ing.variant != "tec":
        raise UnsupportedPlantOperation("integer-input plants use the TEC variant")
    if config.scheme not in ("proposed", "naive"):
        raise UnsupportedPlantOperation("MILP path supports proposed/naive schemes")
    n, m = model.n, model.m
    N, T = config.horizon, config.period
    x = np.asarray(x, dtype=float)
    y = model.check_y(y)
    fixed_x0 = N == 0
    off_u = 0
    off_x0 = N * m
    off_ur = off_x0 + (0 if fixed_x0 else n)
    ncont = off_ur + T * m
    seg_coords = sorted(model.Z(t).segments.keys())
    nseg = len(seg_coords)
    dim = ncont + (N + T) * nseg

    cost_row = np.zeros(dim)
    A_ub, b_ub, A_eq, b_eq = [], [], [], []
    lb = np.full(dim, -np.inf)
    ub = np.full(dim, np.inf)
    integer_idx = []

    def add_segment_links(zset, uoff, vblock_idx):
        for j in range(m):
            coord = n + j
            lb[uoff + j], ub[uoff + j] = zset.lo[coord], zset.hi[coord]
            if coord in zset.segments:
                a_lo, a_hi, vmax = segment_encoding(zset.segments[coord])
                vidx = ncont + vblock_idx * nseg + seg_coords.index(coord)
                integer_idx.append(vidx)
                lb[vidx], ub[vidx] = 0.0, float(vmax)
                row = np.zeros(dim)
                row[uoff + j] = -1.0
                row[vidx] = a_lo
                A_ub.append(row); b_ub.append(0.0)
                row = np.zeros(dim)
                row[uoff + j] = 1.0
                row[vidx] = -a_hi
                A_ub.append(row); b_ub.append(0.0)

    # path rollout x_k = Gam z + dvec
    Gam = np.zeros((n, dim))
    dvec = x.copy()
    stage_cost_row = np.zeros(dim)
    stage_offset = 0.0
    for k in range(N):
        zk = model.Z(t + k)
        uoff = off_u + k * m
        add_segment_links(zk, uoff, k)
        g, Hs = model.cost_derivs(np.zeros(n), np.zeros(m), t + k, y)
        if np.any(Hs):
            raise UnsupportedPlantOperation("MILP path needs a linear stage cost")
        stage_cost_row += g[:n] @ Gam
        stage_offset += float(g[:n] @ dvec)
        stage_cost_row[uoff:uoff + m] += g[n:]
        A_k, B_k, e_k = affine_terms(model, t + k)
        Gam = A_k @ Gam
        Gam[:, uoff:uoff + m] += B_k
        dvec = A_k @ dvec + e_k
        if k + 1 <= N - 1:
            zk1 = model.Z(t + k + 1)
            for i in range(n):
                row = Gam[i].copy()
                A_ub.append(row); b_ub.append(zk1.hi[i] - dvec[i])
                A_ub.append(-row); b_ub.append(dvec[i] - zk1.lo[i])
    GamN, dN = Gam.copy(), dvec.copy()

    # orbit rollout
    GamR = np.zeros((n, dim))
    dR = np.zeros(n)
    if fixed_x0:
        dR = x.copy()
    else:
        GamR[:, off_x0:off_x0 + n] = np.eye(n)
        zr0 = model.Z_r(t + N)
        lb[off_x0:off_x0 + n] = zr0.lo[:n]
        ub[off_x0:off_x0 + n] = zr0.hi[:n]
    GamR0, dR0 = GamR.copy(), dR.copy()
    jt_row = np.zeros(dim)
    jt_offset = 0.0
    ells_rows = []
    ells_offsets = []
    for k in range(T):
        zrk = model.Z_r(t + N + k)
        uoff = off_ur + k * m
        add_segment_links(zrk, uoff, N + k)
        if k >= 1:
            for i in range(n):
                row = GamR[i].copy()
                A_ub.append(row); b_ub.append(zrk.hi[i] - dR[i])
                A_ub.append(-row); b_ub.append(dR[i] - zrk.lo[i])
        g, _ = model.cost_derivs(np.zeros(n), np.zeros(m), t + N + k, y)
        er = g[:n] @ GamR
        eo = float(g[:n] @ dR)
        er[uoff:uoff + m] += g[n:]
        ells_rows.append(er)
        ells_offsets.append(eo)
        jt_row += er
        jt_offset += eo
        A_k, B_k, e_k = affine_terms(model, t + N + k)
        GamR = A_k @ GamR
        GamR[:, uoff:uoff + m] += B_k
        dR = A_k @ dR + e_k
    # wrap-around equality and TEC
    for i in range(n):
        row = GamR[i] - GamR0[i]
        A_eq.append(row); b_eq.append(dR0[i] - dR[i])
    if not fixed_x0:
        for i in range(n):
            row = GamN[i] - GamR0[i]
            A_eq.append(row); b_eq.append(dR0[i] - dN[i])

    kappa_sum = float(np.sum(kappa_j))
    n_kappa = 0
    if config.scheme == "proposed":
        if config.cost_variant == "modified":
            A_ub.append(jt_row.copy()); b_ub.append(kappa_sum - jt_offset)
            n_kappa = 1
        else:
            dk_row = jt_row
            dk_off = jt_offset - kappa_sum
            if T == 1:
                A_ub.append(ells_rows[0].copy())
                b_ub.append(float(kappa_j[0]) - ells_offsets[0])
            else:
                for j in range(T):
                    row = ells_rows[j] + config.c_kappa * dk_row
                    A_ub.append(row)
                    b_ub.append(float(kappa_j[j]) - ells_offsets[j]
                                - config.c_kappa * dk_off)
            n_kappa = T
    # objective
    cost_row = stage_cost_row.copy()
    if config.scheme == "naive":
        cost_row += jt_row
    else:
        cost_row += beta * jt_row
        if config.cost_variant == "modified" and T > 1:
            for k in range(T - 1):
                cost_row += (T - 1 - k) / T * ells_rows[k]
    lp = optim.LinearProgram(cost_row, A_ub=np.array(A_ub), b_ub=np.array(b_ub),
                             A_eq=np.array(A_eq) if A_eq else None,
                             b_eq=np.array(b_eq) if b_eq else None, lb=lb, ub=ub)

    def decode(z):
        u_seq = z[off_u:off_u + N * m].reshape(N, m)
        xs = [x.copy()]
        for k in range(N):
            xs.append(step_dynamics(model, xs[-1], u_seq[k], t + k))
        X = np.empty((T, n))
        xr = x.copy() if fixed_x0 else z[off_x0:off_x0 + n].copy()
        U = z[off_ur:ncont].reshape(T, m)
        for k in range(T):
            X[k] = xr
            xr = np.atleast_1d(model.f(xr, U[k], t + N + k))
        return Plan(u_seq=u_seq, x_seq=np.array(xs), orbit=PeriodicReference(X, U, t + N))

    def encode(plan):
        z = np.zeros(dim)
        z[off_u:off_u + N * m] = plan.u_seq.reshape(-1)
        if not fixed_x0:
            z[off_x0:off_x0 + n] = plan.orbit.X[0]
        z[off_ur:ncont] = plan.orbit.U.reshape(-1)
        # stage selectors implied by the input values
        for blk, (uvals, zset_t) in enumerate(
                [(plan.u_seq[k], t + k) for k in range(N)]
                + [(plan.orbit.U[k], t + N + k) for k in range(T)]):
            zset = model.Z(zset_t) if blk < N else model.Z_r(zset_t)
            for coord in seg_coords:
                segs = zset.segments[coord]
                uval = uvals[coord - n]
                stage = 0
                for si, (lo_s, hi_s) in enumerate(segs):
                    if lo_s - 1e-9 <= uval <= hi_s + 1e-9:
                        stage = si
                        break
                z[ncont + blk * nseg + seg_coords.index(coord)] = stage
        return z

    def kappa_residual_fn(z):
        plan = decode(z)
        ells = orbit_stage_costs(model, plan.orbit, y)
        if config.scheme != "proposed":
            return np.zeros(0)
        if config.cost_variant == "modified":
            return np.array([float(np.sum(ells) - kappa_sum)])
        if T == 1:
            return np.array([float(ells[0] - kappa_j[0])])
        dk = float(np.sum(ells) - kappa_sum)
        return ells - kappa_j + config.c_kappa * dk

    return AssembledProblem(nlp=None, lp=lp, integer_indices=tuple(integer_idx),
                            decode=decode, encode=encode, n_continuous=ncont,
                            kappa_rows=n_kappa, kappa_residual_fn=kappa_residual_fn)


# ---------------------------------------------------------------------------
# finite plants: exact enumeration
# ---------------------------------------------------------------------------

def _solve_finite(model, ing, config, x, t, y, kappa_j, beta, budget=200000):
    from .orbit import _all_cycles
    N, T = config.horizon, config.period
    s0 = round(float(np.atleast_1d(x)[0]))
    paths = [(s0, [], [], 0.0)]
    for k in range(N):
        nxt = []
        for s, us, xs, c in paths:
            for (u, ns, ec) in model.transitions.edges_from(s):
                nxt.append((ns, us + [u], xs + [s], c + ec))
            if len(nxt) > budget:
                raise optim.NumericFailure("enumeration budget exceeded")
        paths = nxt
    cycles = _all_cycles(model, T, budget)
    kappa_sum = float(np.sum(kappa_j))
    best = None
    for s_end, us, xs, cpath in paths:
        for cx, cu, cc in cycles:
            if config.scheme != "unconstrained" and round(float(cx[0])) != s_end:
                continue  # TEC: terminal state must sit on the orbit anchor
            ells = np.array(cc, dtype=float)
            jt = float(np.sum(ells))
            if config.scheme == "proposed":
                if config.cost_variant == "modified":
                    if jt > kappa_sum + 1e-12:
                        continue
                else:
                    dk = jt - kappa_sum
                    if np.any(ells > kappa_j - config.c_kappa * dk + 1e-12):
                        continue
            obj = cpath
            if config.scheme == "naive":
                obj += jt
            elif config.scheme == "proposed":
                obj += beta * jt
                if config.cost_variant == "modified":
                    obj += float(np.sum([(T - 1 - k) / T * ells[k] for k in range(T - 1)]))
            key = (obj, tuple(us), tuple(cu))
            if best is None or key < best[0]:
                best = (key, us, xs + [s_end], cx, cu)
    if best is None:
        return None
    _, us, xs, cx, cu = best
    orbit = PeriodicReference(np.array(cx, dtype=float).reshape(T, 1),
                              np.array(cu, dtype=float).reshape(T, 1), t + N)
    return Plan(u_seq=np.array(us, dtype=float).reshape(N, 1),
                x_seq=np.array(xs, dtype=float).reshape(N + 1, 1), orbit=orbit)


# ---------------------------------------------------------------------------
# candidate solution and closed-loop stepping
# ---------------------------------------------------------------------------

def candidate_solution(prev: Plan, model, ing, config, t_next=None) -> Plan:
    """Shift the previous plan one step and append the terminal controller.

    For schemes without an orbit the last input is held instead (warm-start
    material only; no feasibility claim is attached).
    """
    if prev is None:
        raise ValueError("no previous solution available")
    N = config.horizon
    if prev.orbit is None:
        if t_next is None:
            raise ValueError("orbit-free candidates need the next time index")
        u_seq = np.vstack([prev.u_seq[1:], prev.u_seq[-1:]]) if N else prev.u_seq.copy()
        xs = [prev.x_seq[1].copy()]
        for k in range(N):
            xs.append(step_dynamics(model, xs[-1], u_seq[k], t_next + k))
        return Plan(u_seq=u_seq, x_seq=np.array(xs), orbit=None)
    orbit_next = shift(prev.orbit)
    t_term = prev.orbit.t0  # = t + N of the previous problem
    if N == 0:
        u_term = terminal_controller(prev.x_seq[0], prev.orbit, ing)
        xN = step_dynamics(model, prev.x_seq[0], u_term, t_term)
        return Plan(u_seq=np.zeros((0, model.m)), x_seq=np.array([xN]), orbit=orbit_next)
    u_term = terminal_controller(prev.x_seq[N], prev.orbit, ing)
    u_seq = np.vstack([prev.u_seq[1:], u_term[None, :]])
    xN1 = step_dynamics(model, prev.x_seq[N], u_term, t_term)
    x_seq = np.vstack([prev.x_seq[1:], xN1[None, :]])
    return Plan(u_seq=u_seq, x_seq=x_seq, orbit=orbit_next)


def beta_update(state: ControllerState, metrics: PlanMetrics, config: EmpcConfig):
    """Next self-tuning weight; constant mode returns beta0."""
    if config.beta_mode == "constant":
        return config.beta0
    state.kappa_history.append(state.kappa())
    W = config.beta_window
    if len(state.kappa_history) > W:
        decrease = state.kappa_history[-W - 1] - state.kappa_history[-1]
        if decrease < config.beta_tau and metrics is not None and metrics.kappa_active:
            state.kappa_history.clear()
            return float(min(state.beta * config.beta_growth, config.beta_max))
    return state.beta


def kappa_sentinel(model: PlantModel, y_samples, seed=0, samples=200):
    """Large-but-finite initial memory state: 1e6 x the largest sampled |l|."""
    rng = np.random.default_rng(seed)
    peak = 1.0
    for t in range(model.T):
        zr = model.Z_r(t)
        if not isinstance(zr, BoxSet):
            for (xs, us), (nxt, c) in model.transitions.table.items():
                peak = max(peak, abs(c))
            continue
        pts = zr.sample(rng, samples)
        for y in y_samples:
            vals = [abs(stage_cost(model, p[:model.n], p[model.n:], t, y)) for p in pts[:50]]
            peak = max(peak, max(vals))
    return 1e6 * peak


class Controller:
    """Stateful single-instance controller implementing the closed loop."""

    def __init__(self, model: PlantModel, ing: TerminalIngredients | None,
                 config: EmpcConfig, warm_orbit: PeriodicReference = None,
                 sentinel=None):
        config.validate(ing if config.scheme in ("proposed", "tracking") else None)
        self.model = model
        self.ing = ing
        self.config = config
        self.warm_orbit = warm_orbit
        sent = kappa_sentinel(model, [model.Y_lo]) if sentinel is None else sentinel
        self.state = ControllerState(kappa_j=np.full(config.period, sent),
                                     beta=config.beta0)

    # ---------------------------------------------------------------- step
    def step(self, x, t, y):
        model, config, ing, state = self.model, self.config, self.ing, self.state
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = model.check_y(y)
        cand = None
        cand_metrics = None
        if state.prev_plan is not None:
            cand = candidate_solution(state.prev_plan, model, ing, config, t_next=t)
            cand_metrics = evaluate_plan(model, ing, config, x, t, y,
                                         state.kappa_j, state.beta, cand)
        if state.commit_left > 0 and cand is not None:
            chosen, metrics, prov = cand, cand_metrics, "committed"
            iterations, kkt, status = 0, 0.0, "committed"
            state.commit_left -= 1
        else:
            chosen, metrics, prov, iterations, kkt, status = self._solve(
                x, t, y, cand, cand_metrics)
            if config.multi_step > 1:
                state.commit_left = config.multi_step - 1
        # bookkeeping: kappa memory, penalty, beta
        delta_kappa = np.nan
        penalty_fired = False
        if chosen.orbit is not None and config.scheme in ("proposed", "naive", "tracking"):
            ells_now = orbit_stage_costs(model, chosen.orbit, y)
            delta_kappa = float(np.sum(ells_now) - np.sum(state.kappa_j))
            eps_v = metrics.eps_viol
            penalty = config.penalty_weight * eps_v if eps_v > config.penalty_threshold else 0.0
            penalty_fired = penalty > 0.0
            nxt = shift(chosen.orbit)
            kappa_next = np.array([stage_cost(model, nxt.X[j], nxt.U[j], nxt.t0 + j, y)
                                   for j in range(config.period)])
            state.kappa_j = kappa_next + penalty
        state.beta = beta_update(state, metrics, config)
        u = (chosen.u_seq[0].copy() if config.horizon > 0
             else terminal_controller(x, chosen.orbit, ing))
        state.prev_plan = chosen
        sol = MpcSolution(plan=chosen, metrics=metrics, provenance=prov,
                          delta_kappa=delta_kappa, iterations=iterations,
                          kkt_residual=kkt, status=status,
                          penalty_fired=penalty_fired,
                          candidate_violation=(cand_metrics.max_violation
                                               if cand_metrics else np.nan))
        x_next = step_dynamics(model, x, u, t)
        return u, x_next, sol

    # --------------------------------------------------------------- solve
    def _solve(self, x, t, y, cand, cand_metrics):
        model, config, ing, state = self.model, self.config, self.ing, self.state
        if model.transitions is not None:
            plan = _solve_finite(model, ing, config, x, t, y, state.kappa_j, state.beta)
            iterations, kkt, status = 0, 0.0, "enumerated"
            if plan is None:
                return self._fallback(x, t, y, cand, cand_metrics, "infeasible")
            metrics = evaluate_plan(model, ing, config, x, t, y, state.kappa_j,
                                    state.beta, plan)
        else:
            prob = build_problem(model, ing, config, x, t, y, state.kappa_j, state.beta)
            if prob.lp is not None:
                z, rep = optim.solve_milp(prob.lp, prob.integer_indices)
                if z is None:
                    return self._fallback(x, t, y, cand, cand_metrics, rep.status)
            else:
                z0 = prob.encode(cand) if cand is not None else self._initial_guess(prob, x, t)
                z, rep = optim.solve_sqp(prob.nlp, z0, budget=config.solver_budget,
                                         w_pen=config.w_pen)
            plan = prob.decode(z)
            iterations, kkt, status = rep.iterations, rep.kkt_residual, rep.status
            metrics = evaluate_plan(model, ing, config, x, t, y, state.kappa_j,
                                    state.beta, plan)
        # accept-or-fallback per the numerical safeguards
        if cand is not None:
            worse = metrics.objective > cand_metrics.objective + config.fallback_cost_tol
            violated = metrics.max_violation > config.fallback_viol_tol
            kappa_loose = metrics.kappa_residual > config.kappa_strict_tol
            if worse or violated or kappa_loose:
                return cand, cand_metrics, "candidate-fallback", iterations, kkt, status
            return plan, metrics, "optimized", iterations, kkt, status
        if metrics.max_violation > config.init_feas_tol:
            raise InitializationError(
                f"problem infeasible at t={t}: violation {metrics.max_violation:.3e} "
                f"(kappa residual {metrics.kappa_residual:.3e})")
        return plan, metrics, "optimized", iterations, kkt, status

    def _fallback(self, x, t, y, cand, cand_metrics, status):
        if cand is None:
            raise SolverHardFailure(f"solver failed at t={t} with no candidate ({status})")
        return cand, cand_metrics, "candidate-fallback", 0, np.nan, status

    def _initial_guess(self, prob, x, t):
        model, config = self.model, self.config
        N, T = config.horizon, config.period
        n, m = model.n, model.m
        if self.warm_orbit is not None:
            r = self.warm_orbit
            turns = (t + N - r.t0) % T
            for _ in range(turns):
                r = shift(r)
            r = PeriodicReference(r.X, r.U, t + N)
            u_seq = np.tile(r.U[0], (N, 1))
            xs = [np.asarray(x, dtype=float)]
            for k in range(N):
                xs.append(step_dynamics(model, xs[-1], u_seq[k], t + k))
            return prob.encode(Plan(u_seq=u_seq, x_seq=np.array(xs), orbit=r))
        z = np.where(np.isfinite(prob.nlp.lb) & np.isfinite(prob.nlp.ub),
                     0.5 * (prob.nlp.lb + prob.nlp.ub), 0.0)
        return z


# ---------------------------------------------------------------------------
# closed-loop driver and trace
# ---------------------------------------------------------------------------

@dataclass
class ClosedLoopTrace:
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    ell: np.ndarray
    kappa: np.ndarray
    beta: np.ndarray
    provenance: list
    iterations: np.ndarray
    eps_viol: np.ndarray
    delta_kappa: np.ndarray
    kappa_j: np.ndarray
    candidate_violation: np.ndarray
    penalty_fired: np.ndarray
    orbit_points: np.ndarray      # (steps, T*(n+m))
    status: list


def run_closed_loop(model, ing, config, x0, steps, y_signal, warm_orbit=None,
                    sentinel=None):
    """Simulate the closed loop for ``steps`` steps from x0."""
    ctrl = Controller(model, ing, config, warm_orbit=warm_orbit, sentinel=sentinel)
    n, m, T = model.n, model.m, config.period
    rows = dict(t=[], x=[], u=[], y=[], ell=[], kappa=[], beta=[], provenance=[],
                iterations=[], eps_viol=[], delta_kappa=[], kappa_j=[],
                candidate_violation=[], penalty_fired=[], orbit_points=[], status=[])
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    for t in range(steps):
        y = y_signal.y_at(t)
        kappa_before = ctrl.state.kappa()
        beta_before = ctrl.state.beta
        u, x_next, sol = ctrl.step(x, t, y)
        ell = stage_cost(model, x, u, t, y)
        rows["t"].append(t)
        rows["x"].append(x.copy())
        rows["u"].append(np.atleast_1d(u).copy())
        rows["y"].append(np.atleast_1d(y).copy())
        rows["ell"].append(ell)
        rows["kappa"].append(kappa_before)
        rows["beta"].append(beta_before)
        rows["provenance"].append(sol.provenance)
        rows["iterations"].append(sol.iterations)
        rows["eps_viol"].append(sol.metrics.eps_viol)
        rows["delta_kappa"].append(sol.delta_kappa)
        rows["kappa_j"].append(ctrl.state.kappa_j.copy())
        rows["candidate_violation"].append(sol.candidate_violation)
        rows["penalty_fired"].append(sol.penalty_fired)
        if sol.plan.orbit is not None:
            rows["orbit_points"].append(
                np.concatenate([sol.plan.orbit.X.ravel(), sol.plan.orbit.U.ravel()]))
        else:
            rows["orbit_points"].append(np.zeros(0))
        rows["status"].append(sol.status)
        x = x_next
    return ClosedLoopTrace(
        t=np.array(rows["t"]), x=np.array(rows["x"]), u=np.array(rows["u"]),
        y=np.array(rows["y"]), ell=np.array(rows["ell"]),
        kappa=np.array(rows["kappa"]), beta=np.array(rows["beta"]),
        provenance=rows["provenance"], iterations=np.array(rows["iterations"]),
        eps_viol=np.array(rows["eps_viol"]), delta_kappa=np.array(rows["delta_kappa"]),
        kappa_j=np.array(rows["kappa_j"]),
        candidate_violation=np.array(rows["candidate_violation"]),
        penalty_fired=np.array(rows["penalty_fired"]),
        orbit_points=np.array(rows["orbit_points"]), status=rows["status"])


def average_performance(trace: ClosedLoopTrace, window):
    """Mean closed-loop stage cost over [t_a, t_b)."""
    ta, tb = window
    if tb <= ta:
        raise ValueError("window must satisfy t_b > t_a")
    if ta < trace.t[0] or tb > trace.t[-1] + 1:
        raise ValueError("window outside trace")
    sel = (trace.t >= ta) & (trace.t < tb)
    return float(np.mean(trace.ell[sel]))
