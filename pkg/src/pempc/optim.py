"""Embedded dense solvers: simplex LP, active-set QP, SQP, branch-and-bound MILP.

All solvers are deterministic (Bland pivoting, fixed branching rules) and use
dense numpy linear algebra; problem sizes in this package stay well below a
thousand variables, so no sparse machinery is used.
"""

from dataclasses import dataclass, field
from heapq import heappush, heappop

import numpy as np

INF = np.inf

TOL_PIVOT = 1e-10
TOL_FEAS = 1e-9
TOL_RED_COST = 1e-9


class NumericFailure(RuntimeError):
    """Raised when an evaluator returns non-finite values."""


@dataclass
class SolveReport:
    status: str = "converged"  # converged | iteration-limit | infeasible | unbounded | numeric-failure
    iterations: int = 0
    kkt_residual: float = np.nan
    max_violation: float = np.nan
    objective: float = np.nan
    message: str = ""
    working_set: tuple = ()

    @property
    def ok(self):
        return self.status == "converged"


@dataclass
class LinearProgram:
    """min c'x  s.t.  A_ub x <= b_ub,  A_eq x = b_eq,  lb <= x <= ub."""

    c: np.ndarray
    A_ub: np.ndarray | None = None
    b_ub: np.ndarray | None = None
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def with_bounds(self, lb, ub):
        return LinearProgram(self.c, self.A_ub, self.b_ub, self.A_eq, self.b_eq, lb, ub)


@dataclass
class NlpProblem:
    """Smooth NLP with optional batched evaluation and analytic derivatives.

    Inequalities use the convention ineq(z) <= 0.  ``eval_batch`` maps a
    (dim, K) matrix of points to (obj (K,), eq (neq, K), ineq (nineq, K)) and
    is used for fast finite differencing when analytic Jacobians are absent.
    ``residuals``/``residual_jac`` declare a least-squares objective
    0.5*||r(z)||^2 (+ linear term via ``grad``), enabling Gauss-Newton.
    """

    dim: int
    objective: object = None
    grad: object = None
    eq: object = None
    eq_jac: object = None
    ineq: object = None
    ineq_jac: object = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    eval_batch: object = None
    residuals: object = None
    residual_jac: object = None
    integer_indices: tuple = ()
    linear: LinearProgram | None = None


# ---------------------------------------------------------------------------
# LP: two-phase primal simplex with bounded variables and Bland's rule
# ---------------------------------------------------------------------------

class _Simplex:
    """Dense tableau simplex over  A x = b,  lb <= x <= ub.

    Nonbasic variables rest at one of their finite bounds (free variables at
    zero, handled as superbasic-at-zero with a huge artificial box).  Bland's
    smallest-index rule is used for both the entering and leaving choice,
    which guarantees termination on degenerate instances.
    """

    BIG = 1e30

    def __init__(self, A, b, lb, ub):
        self.m, self.n = A.shape
        self.A = A
        self.b = b.astype(float)
        self.lb = lb.copy()
        self.ub = ub.copy()

    def solve(self, c, max_iter=None):
        m, n = self.m, self.n
        if max_iter is None:
            max_iter = 50 * (m + n + 10)
        # phase 1: artificials with identity columns
        lo = np.where(np.isfinite(self.lb), self.lb, np.where(np.isfinite(self.ub), self.ub, 0.0))
        x0 = lo
        r = self.b - self.A @ x0
        sgn = np.where(r >= 0, 1.0, -1.0)
        Afull = np.hstack([self.A, np.diag(sgn)])
        self.T = sgn[:, None] * Afull  # basis inverse of the artificial block

        self.ncol = n + m
        self.lbf = np.concatenate([self.lb, np.zeros(m)])
        self.ubf = np.concatenate([self.ub, np.full(m, INF)])
        self.basis = np.arange(n, n + m)
        self.at_upper = np.zeros(self.ncol, dtype=bool)
        self.nonbasic_val = np.where(np.isfinite(self.lbf), self.lbf,
                                     np.where(np.isfinite(self.ubf), self.ubf, 0.0))
        self.at_upper[:n] = np.isfinite(self.ub) & ~np.isfinite(self.lb)
        self.xB = np.abs(r)
        c1 = np.zeros(self.ncol)
        c1[n:] = 1.0
        it1, status = self._iterate(c1, max_iter)
        if status == "iteration-limit":
            return None, SolveReport(status="iteration-limit", iterations=it1)
        p1 = self.xB[self.basis >= n].sum() if (self.basis >= n).any() else 0.0
        if p1 > 1e-7:
            return None, SolveReport(status="infeasible", iterations=it1, objective=p1)
        # pin artificials at zero so phase 2 cannot reuse them
        self.lbf[n:] = 0.0
        self.ubf[n:] = 0.0
        self.nonbasic_val[n:] = 0.0
        c2 = np.concatenate([c, np.zeros(m)])
        it2, status = self._iterate(c2, max_iter)
        x = self._point()[:n]
        obj = float(c @ x)
        if status == "unbounded":
            return x, SolveReport(status="unbounded", iterations=it1 + it2, objective=obj)
        if status == "iteration-limit":
            return x, SolveReport(status="iteration-limit", iterations=it1 + it2, objective=obj)
        viol = self._violation(x)
        return x, SolveReport(status="converged", iterations=it1 + it2,
                              kkt_residual=0.0, max_violation=viol, objective=obj)

    def _point(self):
        x = self.nonbasic_val.copy()
        x[self.basis] = self.xB
        return x

    def _violation(self, x):
        res = self.A @ x - self.b
        v = float(np.max(np.abs(res))) if res.size else 0.0
        if np.isfinite(self.lb).any():
            v = max(v, float(np.max(np.maximum(self.lb - x, 0.0), initial=0.0)))
        if np.isfinite(self.ub).any():
            v = max(v, float(np.max(np.maximum(x - self.ub, 0.0), initial=0.0)))
        return v

    def _iterate(self, c, max_iter):
        for it in range(max_iter):
            cB = c[self.basis]
            y = cB @ self.T
            d = c - y  # reduced costs
            nonbasic = np.ones(self.ncol, dtype=bool)
            nonbasic[self.basis] = False
            fixed = self.lbf == self.ubf
            free = ~np.isfinite(self.lbf) & ~np.isfinite(self.ubf)
            can_inc = nonbasic & ~fixed & (free | ~self.at_upper) & (d < -TOL_RED_COST)
            can_dec = nonbasic & ~fixed & (free | self.at_upper) & (d > TOL_RED_COST)
            elig = np.flatnonzero(can_inc | can_dec)
            if elig.size == 0:
                return it, "optimal"
            j = int(elig[0])  # Bland: smallest index
            sigma = 1.0 if can_inc[j] else -1.0
            delta = sigma * self.T[:, j]
            # vectorized ratio test against both bounds of the basic variables
            lbB = self.lbf[self.basis]
            ubB = self.ubf[self.basis]
            with np.errstate(divide="ignore", invalid="ignore"):
                t_low = np.where((delta > TOL_PIVOT) & np.isfinite(lbB),
                                 (self.xB - lbB) / delta, INF)
                t_up = np.where((delta < -TOL_PIVOT) & np.isfinite(ubB),
                                (self.xB - ubB) / delta, INF)
            t_rows = np.minimum(t_low, t_up)
            own = self.ubf[j] - self.lbf[j] \
                if np.isfinite(self.ubf[j]) and np.isfinite(self.lbf[j]) else INF
            t_min = min(float(t_rows.min(initial=INF)), own)
            if not np.isfinite(t_min):
                return it, "unbounded"
            t_min = max(t_min, 0.0)
            ties = np.flatnonzero(t_rows <= t_min + TOL_PIVOT)
            leave_row = -1
            if ties.size and t_min < own - TOL_PIVOT or (ties.size and own == INF):
                leave_row = int(ties[np.argmin(self.basis[ties])])  # Bland on ties
            elif ties.size and t_min <= own + TOL_PIVOT and own < INF:
                # tie between a row and the entering bound: prefer the flip
                leave_row = -1
            self.xB = self.xB - t_min * delta
            if leave_row < 0:
                # bound flip of the entering variable
                self.at_upper[j] = not self.at_upper[j]
                self.nonbasic_val[j] = self.ubf[j] if self.at_upper[j] else self.lbf[j]
                continue
            leave_to_upper = t_up[leave_row] <= t_low[leave_row]
            enter_val = self.nonbasic_val[j] + sigma * t_min
            lv = self.basis[leave_row]
            self.at_upper[lv] = bool(leave_to_upper)
            self.nonbasic_val[lv] = self.ubf[lv] if leave_to_upper else self.lbf[lv]
            # pivot: single rank-one elimination on the tableau
            piv = self.T[leave_row, j]
            prow = self.T[leave_row] / piv
            col = self.T[:, j].copy()
            col[leave_row] = 0.0
            self.T -= np.outer(col, prow)
            self.T[leave_row] = prow
            self.basis[leave_row] = j
            self.xB[leave_row] = enter_val
        return max_iter, "iteration-limit"


def solve_lp(lp: LinearProgram, max_iter=None):
    """Two-phase simplex with Bland anti-cycling; distinguishes infeasible/unbounded."""
    c = np.asarray(lp.c, dtype=float)
    n = c.size
    lb = np.full(n, -INF) if lp.lb is None else np.asarray(lp.lb, dtype=float)
    ub = np.full(n, INF) if lp.ub is None else np.asarray(lp.ub, dtype=float)
    n_eq = 0 if lp.A_eq is None else np.atleast_2d(lp.A_eq).shape[0]
    n_ub = 0 if lp.A_ub is None else np.atleast_2d(lp.A_ub).shape[0]
    A = np.zeros((n_eq + n_ub, n + n_ub))
    b = np.zeros(n_eq + n_ub)
    if n_eq:
        A[:n_eq, :n] = np.atleast_2d(lp.A_eq)
        b[:n_eq] = np.asarray(lp.b_eq, dtype=float)
    if n_ub:
        A[n_eq:, :n] = np.atleast_2d(lp.A_ub)
        A[n_eq:, n:] = np.eye(n_ub)
        b[n_eq:] = np.asarray(lp.b_ub, dtype=float)
    lb_full = np.concatenate([lb, np.zeros(n_ub)])
    ub_full = np.concatenate([ub, np.full(n_ub, INF)])
    if not np.isfinite(A).all() or not np.isfinite(b).all():
        raise NumericFailure("non-finite LP data")
    sx = _Simplex(A, b, lb_full, ub_full)
    x, rep = sx.solve(np.concatenate([c, np.zeros(n_ub)]), max_iter=max_iter)
    if x is not None:
        x = x[:n]
        rep.objective = float(c @ x)
    return x, rep


# ---------------------------------------------------------------------------
# QP: primal active-set method
# ---------------------------------------------------------------------------

def _qp_feasible_start(n, A_eq, b_eq, G, h, lb, ub):
    lp = LinearProgram(np.zeros(n), A_ub=G if len(G) else None,
                       b_ub=h if len(G) else None,
                       A_eq=A_eq if len(A_eq) else None,
                       b_eq=b_eq if len(A_eq) else None, lb=lb, ub=ub)
    x, rep = solve_lp(lp)
    if rep.status != "converged":
        return None, rep
    return x, rep


def solve_qp(H, g, A_eq=None, b_eq=None, A_ub=None, b_ub=None, lb=None, ub=None,
             x0=None, max_iter=None, sigma=1e-9, warm_set=None):
    """Primal active-set QP: min 0.5 x'Hx + g'x subject to linear constraints.

    H must be symmetric PSD; a +sigma*I regularization is applied when the
    smallest eigenvalue is below sigma so every subproblem is strictly convex.
    Returns (x, lam_eq, lam_ineq, report); lam_ineq covers A_ub rows followed
    by lower- then upper-bound rows.  ``warm_set`` seeds the working set with
    row indices that are still active at the start point (cuts iterations
    sharply for sequences of similar QPs); the report carries the final
    working set in ``report.message``-free form via the ``working_set``
    attribute.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    g = np.asarray(g, dtype=float)
    n = g.size
    if not np.isfinite(H).all() or not np.isfinite(g).all():
        raise NumericFailure("non-finite QP data")
    w = np.linalg.eigvalsh(0.5 * (H + H.T))
    Hr = 0.5 * (H + H.T)
    if w[0] < sigma:
        Hr = Hr + (sigma - min(w[0], 0.0)) * np.eye(n)
    A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, dtype=float))
    b_eq = np.zeros(0) if b_eq is None else np.atleast_1d(np.asarray(b_eq, dtype=float))
    G = np.zeros((0, n)) if A_ub is None else np.atleast_2d(np.asarray(A_ub, dtype=float))
    h = np.zeros(0) if b_ub is None else np.atleast_1d(np.asarray(b_ub, dtype=float))
    # fold bounds in as inequality rows
    if lb is not None:
        lb = np.asarray(lb, dtype=float)
        idx = np.flatnonzero(np.isfinite(lb))
        rows = np.zeros((idx.size, n))
        rows[np.arange(idx.size), idx] = -1.0
        G = np.vstack([G, rows])
        h = np.concatenate([h, -lb[idx]])
    if ub is not None:
        ub = np.asarray(ub, dtype=float)
        idx = np.flatnonzero(np.isfinite(ub))
        rows = np.zeros((idx.size, n))
        rows[np.arange(idx.size), idx] = 1.0
        G = np.vstack([G, rows])
        h = np.concatenate([h, ub[idx]])
    m_ineq = G.shape[0]
    if max_iter is None:
        max_iter = 50 + 10 * (n + m_ineq + A_eq.shape[0])

    feas = None
    if x0 is not None:
        x0 = np.asarray(x0, dtype=float)
        ok = True
        if A_eq.shape[0] and np.max(np.abs(A_eq @ x0 - b_eq)) > TOL_FEAS:
            ok = False
        if m_ineq and np.max(G @ x0 - h) > TOL_FEAS:
            ok = False
        if ok:
            feas = x0
        elif A_eq.shape[0]:
            # least-squares projection onto the equalities often lands feasible
            xp = x0 + np.linalg.lstsq(A_eq, b_eq - A_eq @ x0, rcond=None)[0]
            if np.max(np.abs(A_eq @ xp - b_eq)) <= TOL_FEAS and \
                    (m_ineq == 0 or np.max(G @ xp - h) <= TOL_FEAS):
                feas = xp
    if feas is None:
        feas, rep = _qp_feasible_start(n, A_eq, b_eq, G, h, None, None)
        if feas is None:
            return None, None, None, SolveReport(status=rep.status, iterations=rep.iterations,
                                                 message="phase-1 " + rep.status)
    x = feas.astype(float)
    slack0 = h - G @ x if m_ineq else np.zeros(0)
    if warm_set is not None:
        active = [i for i in warm_set if i < m_ineq and slack0[i] < 1e-8]
    else:
        active = [i for i in range(m_ineq) if slack0[i] < 1e-8]
    lam_eq = np.zeros(A_eq.shape[0])
    lam_in = np.zeros(m_ineq)
    for it in range(max_iter):
        W = sorted(active)
        C = np.vstack([A_eq, G[W]]) if (A_eq.shape[0] or W) else np.zeros((0, n))
        kkt = np.zeros((n + C.shape[0], n + C.shape[0]))
        kkt[:n, :n] = Hr
        if C.shape[0]:
            kkt[:n, n:] = C.T
            kkt[n:, :n] = C
        rhs = np.concatenate([-(Hr @ x + g), np.zeros(C.shape[0])])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        d = sol[:n]
        lam = sol[n:]
        if np.max(np.abs(d), initial=0.0) <= 1e-11 * (1.0 + np.max(np.abs(x), initial=0.0)):
            lam_eq = lam[:A_eq.shape[0]]
            lam_W = lam[A_eq.shape[0]:]
            lam_in = np.zeros(m_ineq)
            lam_in[W] = lam_W
            if lam_W.size == 0 or lam_W.min() >= -1e-9:
                obj = float(0.5 * x @ H @ x + g @ x)
                viol = float(np.max(G @ x - h, initial=0.0))
                if A_eq.shape[0]:
                    viol = max(viol, float(np.max(np.abs(A_eq @ x - b_eq))))
                kres = _qp_kkt_residual(Hr, g, A_eq, b_eq, G, h, x, lam_eq, lam_in)
                return x, lam_eq, lam_in, SolveReport(status="converged", iterations=it,
                                                      kkt_residual=kres, max_violation=viol,
                                                      objective=obj, working_set=tuple(W))
            # Bland-style drop: smallest index among negative multipliers
            neg = [W[i] for i in range(len(W)) if lam_W[i] < -1e-9]
            active.remove(min(neg))
            continue
        # step length to the nearest blocking inactive constraint (vectorized;
        # tiny negative slacks are clamped so degenerate vertices do not churn)
        alpha = 1.0
        block = -1
        if m_ineq:
            mask = np.ones(m_ineq, dtype=bool)
            mask[active] = False
            gd = G @ d
            cand = mask & (gd > 1e-12)
            if cand.any():
                slack = np.maximum(h - G @ x, 0.0)
                ratios = np.where(cand, slack / np.where(cand, gd, 1.0), np.inf)
                amin = float(ratios.min())
                if amin <= 1.0 + 1e-12:
                    alpha = min(amin, 1.0)
                    block = int(np.flatnonzero(ratios <= amin + 1e-12)[0])
        x = x + max(alpha, 0.0) * d
        if block >= 0:
            active.append(block)
    obj = float(0.5 * x @ H @ x + g @ x)
    return x, lam_eq, lam_in, SolveReport(status="iteration-limit", iterations=max_iter, objective=obj)


def _qp_kkt_residual(H, g, A_eq, b_eq, G, h, x, lam_eq, lam_in):
    grad = H @ x + g
    if A_eq.shape[0]:
        grad = grad + A_eq.T @ lam_eq
    if G.shape[0]:
        grad = grad + G.T @ lam_in
    res = float(np.max(np.abs(grad), initial=0.0))
    if G.shape[0]:
        slack = h - G @ x
        res = max(res, float(np.max(np.abs(lam_in * slack), initial=0.0)))
        res = max(res, float(np.max(-slack, initial=0.0)))
        res = max(res, float(np.max(-lam_in, initial=0.0)))
    if A_eq.shape[0]:
        res = max(res, float(np.max(np.abs(A_eq @ x - b_eq))))
    return res


# ---------------------------------------------------------------------------
# finite differences over NlpProblem
# ---------------------------------------------------------------------------

def eval_nlp(p: NlpProblem, z):
    if p.eval_batch is not None:
        f, ce, ci = p.eval_batch(z.reshape(-1, 1))
        return float(f[0]), ce[:, 0], ci[:, 0]
    f = float(p.objective(z))
    ce = p.eq(z) if p.eq is not None else np.zeros(0)
    ci = p.ineq(z) if p.ineq is not None else np.zeros(0)
    return f, np.atleast_1d(ce), np.atleast_1d(ci)


def nlp_derivs(p: NlpProblem, z, h_scale=1e-6):
    """Gradient and constraint Jacobians, analytic when supplied else central FD."""
    n = p.dim
    have_g = p.grad is not None
    have_je = p.eq_jac is not None or p.eq is None
    have_ji = p.ineq_jac is not None or p.ineq is None
    if have_g and have_je and have_ji:
        gr = p.grad(z)
        Je = p.eq_jac(z) if p.eq_jac is not None else np.zeros((0, n))
        Ji = p.ineq_jac(z) if p.ineq_jac is not None else np.zeros((0, n))
        return np.asarray(gr, dtype=float), np.atleast_2d(Je), np.atleast_2d(Ji)
    h = h_scale * (1.0 + np.abs(z))
    if p.eval_batch is not None:
        Z = np.empty((n, 2 * n))
        Z[:, 0::2] = z[:, None] + np.diag(h)
        Z[:, 1::2] = z[:, None] - np.diag(h)
        f, ce, ci = p.eval_batch(Z)
        gr = (f[0::2] - f[1::2]) / (2 * h)
        Je = (ce[:, 0::2] - ce[:, 1::2]) / (2 * h)[None, :]
        Ji = (ci[:, 0::2] - ci[:, 1::2]) / (2 * h)[None, :]
    else:
        gr = np.zeros(n)
        f0, ce0, ci0 = eval_nlp(p, z)
        Je = np.zeros((ce0.size, n))
        Ji = np.zeros((ci0.size, n))
        for i in range(n):
            dz = np.zeros(n)
            dz[i] = h[i]
            fp, cep, cip = eval_nlp(p, z + dz)
            fm, cem, cim = eval_nlp(p, z - dz)
            gr[i] = (fp - fm) / (2 * h[i])
            Je[:, i] = (cep - cem) / (2 * h[i])
            Ji[:, i] = (cip - cim) / (2 * h[i])
    if p.grad is not None:
        gr = np.asarray(p.grad(z), dtype=float)
    if p.eq_jac is not None:
        Je = np.atleast_2d(p.eq_jac(z))
    if p.ineq_jac is not None:
        Ji = np.atleast_2d(p.ineq_jac(z))
    return gr, Je, Ji


# ---------------------------------------------------------------------------
# SQP
# ---------------------------------------------------------------------------

def solve_sqp(p: NlpProblem, x0, budget=1000, tol_kkt=1e-6, tol_feas=1e-6,
              w_pen=1e4, stall_window=25):
    """Damped BFGS / Gauss-Newton SQP with an l1 merit line search.

    The inner QP is solved with the active-set method; when the linearized
    constraints are inconsistent an elastic (slack-penalized) QP is used.
    A second-order correction counters the Maratos effect, the merit weight
    only grows from converged QP multipliers, and a stall watchdog stops the
    loop when the merit has not improved for ``stall_window`` iterations.
    Returns the best iterate found even on iteration-limit.
    """
    if p.integer_indices:
        raise ValueError("solve_sqp does not handle integer variables")
    z = np.asarray(x0, dtype=float).copy()
    n = p.dim
    lb = np.full(n, -INF) if p.lb is None else np.asarray(p.lb, dtype=float)
    ub = np.full(n, INF) if p.ub is None else np.asarray(p.ub, dtype=float)
    z = np.clip(z, lb, ub)
    B = np.eye(n)
    mu_merit = 1.0
    gL_prev = None
    z_prev = None
    best = None
    stall = 0
    it = 0
    warm_set = None

    def merit(fv, cev, civ):
        return fv + mu_merit * (np.sum(np.abs(cev)) + np.sum(np.maximum(civ, 0.0)))

    def finite(*vals):
        return all(np.all(np.isfinite(v)) for v in vals)

    f, ce, ci = eval_nlp(p, z)
    if not finite(f, ce, ci):
        raise NumericFailure("non-finite evaluation at the initial point")
    last_report = None
    for it in range(1, budget + 1):
        gr, Je, Ji = nlp_derivs(p, z)
        if p.residuals is not None and p.residual_jac is not None:
            Jr = np.atleast_2d(p.residual_jac(z))
            B = Jr.T @ Jr + 1e-10 * np.eye(n)
        viol = max(np.max(np.abs(ce), initial=0.0), np.max(ci, initial=0.0))
        # mu-independent ranking: violation beyond tolerance first, then objective
        excess = max(viol - tol_feas, 0.0)
        if best is None:
            improved = True
        elif excess < best[0] - 1e-14:
            improved = True
        else:
            improved = (excess <= best[0] + 1e-14
                        and f < best[1] - 1e-12 * (1.0 + abs(best[1])))
        if improved:
            best = (excess, f, viol, z.copy())
            stall = 0
        else:
            stall += 1
        d, le, li, rep = solve_qp(B, gr,
                                  A_eq=Je if Je.shape[0] else None, b_eq=-ce if Je.shape[0] else None,
                                  A_ub=Ji if Ji.shape[0] else None, b_ub=-ci if Ji.shape[0] else None,
                                  lb=lb - z, ub=ub - z, x0=np.zeros(n), warm_set=warm_set)
        qp_ok = d is not None and rep.status == "converged"
        if qp_ok:
            warm_set = rep.working_set
        if d is None:
            d, le, li = _elastic_qp(B, gr, Je, ce, Ji, ci, lb - z, ub - z, w_pen)
            if d is None:
                return best[3], SolveReport(status="numeric-failure", iterations=it,
                                            objective=best[1], max_violation=best[2],
                                            message="elastic QP failed")
        if qp_ok:
            kres = _nlp_kkt_residual(gr, Je, ce, Ji, ci, le, li, z, lb, ub)
            if kres <= tol_kkt and viol <= tol_feas:
                return z, SolveReport(status="converged", iterations=it, kkt_residual=kres,
                                      max_violation=viol, objective=f)
            lam_norm = max(np.max(np.abs(le), initial=0.0), np.max(np.abs(li), initial=0.0))
            mu_merit = max(mu_merit, min(1.2 * lam_norm + 1e-3, 1e7))
        if stall >= stall_window:
            break
        phi0 = merit(f, ce, ci)
        dphi = gr @ d - mu_merit * (np.sum(np.abs(ce)) + np.sum(np.maximum(ci, 0.0)))
        alpha = 1.0
        accepted = False
        tried_soc = False
        for _ in range(25):
            zt = np.clip(z + alpha * d, lb, ub)
            ft, cet, cit = eval_nlp(p, zt)
            if finite(ft, cet, cit) and merit(ft, cet, cit) <= phi0 + 1e-4 * alpha * min(dphi, 0.0):
                accepted = True
                break
            if alpha == 1.0 and not tried_soc and Je.shape[0]:
                # second-order correction: cancel the curvature kick in the equalities
                tried_soc = True
                dc = -np.linalg.lstsq(Je, cet, rcond=None)[0]
                zs = np.clip(z + d + dc, lb, ub)
                fs, ces, cis = eval_nlp(p, zs)
                if finite(fs, ces, cis) and merit(fs, ces, cis) <= phi0 + 1e-4 * min(dphi, 0.0):
                    zt, ft, cet, cit = zs, fs, ces, cis
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            zt, ft, cet, cit = z, f, ce, ci
            B = np.eye(n)
            gL_prev = None
        # damped BFGS on the Lagrangian gradient
        if accepted and p.residuals is None and qp_ok:
            gL = gr.copy()
            if Je.shape[0]:
                gL = gL + Je.T @ le
            if Ji.shape[0]:
                gL = gL + Ji.T @ li[:Ji.shape[0]]
            if gL_prev is not None:
                s = zt - z_prev
                ygrad = gL - gL_prev
                sBs = s @ B @ s
                sy = s @ ygrad
                if sBs > 1e-14:
                    theta = 1.0 if sy >= 0.2 * sBs else (0.8 * sBs) / (sBs - sy)
                    r = theta * ygrad + (1 - theta) * (B @ s)
                    B = B - np.outer(B @ s, B @ s) / sBs + np.outer(r, r) / (s @ r)
                    B = 0.5 * (B + B.T)
                    bw = np.linalg.eigvalsh(B)
                    if not np.isfinite(B).all() or bw[0] < 1e-10 or bw[-1] > 1e9:
                        B = np.eye(n)
            gL_prev, z_prev = gL, z.copy()
        z, f, ce, ci = zt, ft, cet, cit
    # final convergence audit at the best iterate (multipliers re-estimated)
    zb = best[3]
    fb, ceb, cib = eval_nlp(p, zb)
    gr, Je, Ji = nlp_derivs(p, zb)
    le, li = _multiplier_estimate(gr, Je, Ji, cib, zb, lb, ub)
    kres = _nlp_kkt_residual(gr, Je, ceb, Ji, cib, le, li, zb, lb, ub)
    violb = max(np.max(np.abs(ceb), initial=0.0), np.max(cib, initial=0.0))
    status = "converged" if (kres <= tol_kkt and violb <= tol_feas) else "iteration-limit"
    return zb, SolveReport(status=status, iterations=it, kkt_residual=kres,
                           max_violation=violb, objective=fb)


def _multiplier_estimate(gr, Je, Ji, ci, z, lb, ub):
    """Least-squares multipliers over equalities, active inequalities and
    active bounds; inactive inequality multipliers are zero."""
    n = gr.size
    cols = []
    kinds = []
    for i in range(Je.shape[0]):
        cols.append(Je[i])
        kinds.append(("eq", i))
    for i in range(Ji.shape[0]):
        if ci[i] >= -1e-7:
            cols.append(Ji[i])
            kinds.append(("in", i))
    act = 1e-6 * (1.0 + np.abs(z))
    for i in range(n):
        act_tol = act[i]
        if z[i] <= lb[i] + act_tol:
            e = np.zeros(n)
            e[i] = -1.0
            cols.append(e)
            kinds.append(("lb", i))
        if z[i] >= ub[i] - act_tol:
            e = np.zeros(n)
            e[i] = 1.0
            cols.append(e)
            kinds.append(("ub", i))
    le = np.zeros(Je.shape[0])
    li = np.zeros(Ji.shape[0])
    if not cols:
        return le, li
    Ct = np.array(cols).T
    lam, *_ = np.linalg.lstsq(Ct, -gr, rcond=None)
    for v, (kind, i) in zip(lam, kinds):
        if kind == "eq":
            le[i] = v
        elif kind == "in":
            li[i] = max(v, 0.0)
    return le, li


def _elastic_qp(B, gr, Je, ce, Ji, ci, dlb, dub, w_pen):
    """Relax linearized constraints with l1-penalized slacks."""
    n = gr.size
    ne, ni = Je.shape[0], Ji.shape[0]
    ntot = n + 2 * ne + ni
    Hb = np.zeros((ntot, ntot))
    Hb[:n, :n] = B
    Hb[n:, n:] = 1e-8 * np.eye(2 * ne + ni)
    gb = np.concatenate([gr, w_pen * np.ones(2 * ne + ni)])
    Aeq = np.hstack([Je, np.eye(ne), -np.eye(ne), np.zeros((ne, ni))]) if ne else None
    Aub = np.hstack([Ji, np.zeros((ni, 2 * ne)), -np.eye(ni)]) if ni else None
    lbb = np.concatenate([dlb, np.zeros(2 * ne + ni)])
    ubb = np.concatenate([dub, np.full(2 * ne + ni, INF)])
    x, le, li, rep = solve_qp(Hb, gb, A_eq=Aeq, b_eq=-ce if ne else None,
                              A_ub=Aub, b_ub=-ci if ni else None, lb=lbb, ub=ubb,
                              x0=None)
    if x is None:
        return None, None, None
    le = le if ne else np.zeros(0)
    li = li[:ni] if ni else np.zeros(0)
    return x[:n], le, li


def _nlp_kkt_residual(gr, Je, ce, Ji, ci, lam_eq, lam_in, z, lb, ub):
    """Stationarity/complementarity recomputed from raw multipliers."""
    g = gr.copy()
    if Je.shape[0] and lam_eq is not None and lam_eq.size == Je.shape[0]:
        g = g + Je.T @ lam_eq
    if Ji.shape[0] and lam_in is not None and lam_in.size >= Ji.shape[0]:
        g = g + Ji.T @ lam_in[:Ji.shape[0]]
    # project stationarity onto the bound box (gradient can point into bounds)
    act = 1e-6 * (1.0 + np.abs(z))
    at_lb = z <= lb + act
    at_ub = z >= ub - act
    g = np.where(at_lb, np.minimum(g, 0.0), g)
    g = np.where(at_ub, np.maximum(g, 0.0), g)
    res = float(np.max(np.abs(g), initial=0.0))
    if Ji.shape[0] and lam_in is not None:
        res = max(res, float(np.max(np.abs(lam_in[:Ji.shape[0]] * ci), initial=0.0)))
    return res


# ---------------------------------------------------------------------------
# MILP: best-first branch and bound
# ---------------------------------------------------------------------------

def solve_milp(lp: LinearProgram, integer_indices, max_nodes=100000, int_tol=1e-6,
               abs_gap=1e-9):
    """Best-first branch-and-bound with LP relaxation bounds.

    Branches on the most fractional integer variable (ties by lowest index)
    and proves optimality (gap 0 within abs_gap) unless the node budget runs
    out, in which case the incumbent and remaining gap are reported.
    """
    integer_indices = tuple(sorted(integer_indices))
    n = lp.c.size
    lb0 = np.full(n, -INF) if lp.lb is None else np.asarray(lp.lb, dtype=float).copy()
    ub0 = np.full(n, INF) if lp.ub is None else np.asarray(lp.ub, dtype=float).copy()
    for j in integer_indices:
        if not (np.isfinite(lb0[j]) and np.isfinite(ub0[j])):
            raise ValueError("integer variables must be bounded")

    def relax(lb, ub):
        x, rep = solve_lp(lp.with_bounds(lb, ub))
        return x, rep

    def fractional(x):
        fr = [(abs(x[j] - round(x[j])), j) for j in integer_indices]
        fr = [(f, j) for f, j in fr if f > int_tol]
        if not fr:
            return None
        # most fractional: distance to nearest integer closest to 0.5
        return max(fr, key=lambda t: (min(t[0], 1 - t[0]), -t[1]))[1]

    def polish(x, lb, ub):
        """Fix integers at rounded values and re-solve the LP for exactness."""
        lbf, ubf = lb.copy(), ub.copy()
        for j in integer_indices:
            v = float(np.clip(round(x[j]), lb[j], ub[j]))
            lbf[j] = ubf[j] = v
        xi, rep = relax(lbf, ubf)
        if rep.status == "converged":
            return xi, rep.objective
        return None, np.inf

    x_root, rep = relax(lb0, ub0)
    nodes = 1
    if rep.status != "converged":
        return None, SolveReport(status=rep.status, iterations=nodes, message="root relaxation")
    incumbent, inc_obj = None, np.inf
    j0 = fractional(x_root)
    if j0 is None:
        xi, obj = polish(x_root, lb0, ub0)
        if xi is not None:
            return xi, SolveReport(status="converged", iterations=nodes, objective=obj,
                                   kkt_residual=0.0, max_violation=0.0)
    else:
        xi, obj = polish(x_root, lb0, ub0)  # rounding incumbent for early pruning
        if xi is not None:
            incumbent, inc_obj = xi, obj
    heap = []
    counter = 0
    heappush(heap, (rep.objective, counter, lb0, ub0, x_root))
    while heap:
        bound, _, lb, ub, x = heappop(heap)
        if bound >= inc_obj - abs_gap:
            continue
        j = fractional(x)
        if j is None:
            xi, obj = polish(x, lb, ub)
            if xi is not None and obj < inc_obj:
                incumbent, inc_obj = xi, obj
            continue
        if nodes >= max_nodes:
            gap = inc_obj - bound
            return incumbent, SolveReport(status="iteration-limit", iterations=nodes,
                                          objective=inc_obj, message=f"gap {gap:.3e}")
        lo = float(np.floor(x[j]))
        for side in (0, 1):
            lbn, ubn = lb.copy(), ub.copy()
            if side == 0:
                ubn[j] = lo
            else:
                lbn[j] = lo + 1.0
            if lbn[j] > ubn[j]:
                continue
            xn, repn = relax(lbn, ubn)
            nodes += 1
            if repn.status != "converged":
                continue
            if repn.objective >= inc_obj - abs_gap:
                continue
            if fractional(xn) is None:
                xi, obj = polish(xn, lbn, ubn)
                if xi is not None and obj < inc_obj:
                    incumbent, inc_obj = xi, obj
                continue
            counter += 1
            heappush(heap, (repn.objective, counter, lbn, ubn, xn))
    if incumbent is None:
        return None, SolveReport(status="infeasible", iterations=nodes)
    return incumbent, SolveReport(status="converged", iterations=nodes, objective=inc_obj,
                                  kkt_residual=0.0, max_violation=0.0)
