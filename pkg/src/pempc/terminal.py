"""Terminal ingredient synthesis and verification.

Four ingredient families are supported: terminal equality constraint (TEC),
economic quadratic cost with an online adjoint correction, positive-definite
quadratic-plus-norm cost, and the sum-of-powers cost for plants with a known
incremental Lyapunov function.

The quadratic synthesis pipeline replaces the semidefinite programming used
in the source design with: (i) a Riccati/Lyapunov seed computed along sample
orbits and max-blended, (ii) a deterministic cutting-plane refinement of P
(linear programs over the matrix entries, solved with the in-house simplex)
whenever the seed fails the grid, and (iii) a mandatory grid re-verification.
The verification grid covers the reference constraint box restricted to
orbit-consistent points (one-step successors stay inside the box); corner
points whose successors leave the box cannot lie on any feasible periodic
orbit and are excluded.
"""

import configparser
import io
from dataclasses import dataclass, field

import numpy as np

from . import optim
from .orbit import PeriodicReference, shift
from .plant import PlantModel, UnsupportedPlantOperation, stage_cost

TOL_FEAS = 1e-6
ADJOINT_TOL = 1e-9


class TerminalDesignError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class TerminalIngredients:
    """Terminal cost/set/controller data for one plant.

    P and K are stored per phase (t mod period); time-invariant designs carry
    a single phase.  ``alpha`` is the constant terminal set size, ``c`` the
    norm-term weight of the positive-definite variant, ``nu`` the
    controllability horizon of the TEC variant.
    """

    variant: str                      # tec | quadratic_economic | positive_definite | sum_power
    period: int = 1
    P: np.ndarray | None = None       # (period, n, n)
    K: np.ndarray | None = None       # (period, m, n)
    alpha: float = 0.0
    c: float = 0.0
    nu: int = 1
    adjoint_mode: str = "iterative"   # iterative | explicit
    sum_a: tuple = ()                 # sum-of-powers coefficients a_k
    sum_cl: float = 1.0
    sum_rho: float = 0.5
    provenance: dict = field(default_factory=dict)

    def P_at(self, t):
        return self.P[t % self.period]

    def K_at(self, t):
        return self.K[t % self.period]

    def needs_quadratic_data(self):
        return self.variant in ("quadratic_economic", "positive_definite", "sum_power")

    def validate(self, lambda_min_tol=1e-12):
        if self.variant == "tec":
            if self.nu < 1:
                raise ValueError("TEC needs nu >= 1")
            return
        if self.P is None:
            raise ValueError(f"variant {self.variant} needs P")
        for Pt in self.P:
            if np.max(np.abs(Pt - Pt.T)) > 1e-10:
                raise ValueError("P not symmetric")
            if np.linalg.eigvalsh(Pt)[0] < lambda_min_tol:
                raise ValueError("P not positive definite")
        if self.alpha <= 0:
            raise ValueError("terminal set size must be positive")


# ---------------------------------------------------------------------------
# batched linearization helpers
# ---------------------------------------------------------------------------

def batched_jacobians(model: PlantModel, X, U, t):
    """A (G,n,n), B (G,n,m) by central differences, vectorized over points."""
    n, m = model.n, model.m
    G = X.shape[1]
    h = 1e-6
    A = np.empty((G, n, n))
    B = np.empty((G, n, m))
    for i in range(n):
        d = np.zeros((n, 1))
        d[i] = h
        A[:, :, i] = ((model.f(X + d, U, t) - model.f(X - d, U, t)) / (2 * h)).T
    for j in range(m):
        d = np.zeros((m, 1))
        d[j] = h
        B[:, :, j] = ((model.f(X, U + d, t) - model.f(X, U - d, t)) / (2 * h)).T
    return A, B


def verification_grid(model: PlantModel, t=0, n_state=20, n_input=2,
                      orbit_consistent=True):
    """Lattice over Z_r(t) with the orbit-consistency filter.

    Returns (X (n,G), U (m,G), raw_count).  With ``orbit_consistent`` the
    lattice is reduced to points whose one-step successor state stays inside
    the Z_r state box, a necessary condition for membership in any feasible
    periodic orbit.
    """
    zr = model.Z_r(t)
    n, m = model.n, model.m
    axes = [np.linspace(zr.lo[i], zr.hi[i], n_state) for i in range(n)]
    axes += [np.linspace(zr.lo[n + j], zr.hi[n + j], n_input) for j in range(m)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in mesh])
    X, U = pts[:n], pts[n:]
    raw = X.shape[1]
    if orbit_consistent:
        succ = np.asarray(model.f(X, U, t))
        lo, hi = zr.lo[:n, None], zr.hi[:n, None]
        ok = np.all((succ >= lo) & (succ <= hi), axis=0)
        X, U = X[:, ok], U[:, ok]
    return X, U, raw


# ---------------------------------------------------------------------------
# Riccati seed and cutting-plane refinement of P
# ---------------------------------------------------------------------------

def dare_gain(A, B, Q, R, S_cross=None, iters=10000, tol=1e-13):
    """Fixed point of the discrete Riccati recursion; returns (P, K)."""
    n = A.shape[0]
    P = Q + np.eye(n)
    S_cross = np.zeros((n, B.shape[1])) if S_cross is None else S_cross
    for _ in range(iters):
        M = R + B.T @ P @ B
        K = -np.linalg.solve(M, B.T @ P @ A + S_cross.T)
        Acl = A + B @ K
        Pn = Q + K.T @ R @ K + S_cross @ K + K.T @ S_cross.T + Acl.T @ P @ Acl
        Pn = 0.5 * (Pn + Pn.T)
        if np.max(np.abs(Pn - P)) < tol:
            P = Pn
            break
        P = Pn
    M = R + B.T @ P @ B
    K = -np.linalg.solve(M, B.T @ P @ A + S_cross.T)
    return P, K


def periodic_lyapunov(A_seq, Q_seq, sweeps=10000, tol=1e-12):
    """Periodic P(k) with P(k) = Q(k) + A(k)' P(k+1) A(k); raises on divergence."""
    T = len(A_seq)
    n = A_seq[0].shape[0]
    P = [Q_seq[k].copy() for k in range(T)]
    for _ in range(sweeps):
        delta = 0.0
        for k in reversed(range(T)):
            Pn = Q_seq[k] + A_seq[k].T @ P[(k + 1) % T] @ A_seq[k]
            delta = max(delta, float(np.max(np.abs(Pn - P[k]))))
            P[k] = 0.5 * (Pn + Pn.T)
        if delta < tol:
            return np.array(P)
        if delta > 1e12:
            break
    mono = np.eye(n)
    for k in range(T):
        mono = A_seq[k] @ mono
    sr = float(np.max(np.abs(np.linalg.eigvals(mono))))
    raise TerminalDesignError(
        f"periodic Lyapunov recursion diverged (monodromy spectral radius {sr:.3f})")


def _sym_indices(n):
    return [(i, j) for i in range(n) for j in range(i, n)]


def _sym_coeff(M, idx):
    return np.array([M[i, j] * (1.0 if i == j else 2.0) for (i, j) in idx])


def _vec_to_sym(p, idx, n):
    P = np.zeros((n, n))
    for k, (i, j) in enumerate(idx):
        P[i, j] = p[k]
        P[j, i] = p[k]
    return P


def residual_eigs(P, Acl, Q):
    """Largest eigenvalue of Acl' P Acl - P + Q per grid point."""
    M = np.einsum("kji,jl,klm->kim", Acl, P, Acl) - P + Q
    return np.linalg.eigvalsh(M)[:, -1]


def refine_P_cutting_plane(P_seed, Acl, Q, margin=1e-3, pfloor=0.5,
                           max_rounds=120, cuts_per_round=8, box=1e8):
    """Minimum-trace P with  Acl_g' P Acl_g - P + Q <= -margin*I  on all grid
    points and lambda_min(P) >= pfloor, via Kelley cuts solved as LPs.

    Each violated (point, eigenvector) pair contributes one linear cut in the
    entries of P; the in-house simplex solves the growing LP.  Deterministic.
    """
    n = P_seed.shape[0]
    idx = _sym_indices(n)
    nv = len(idx)
    trace_cost = np.array([1.0 if i == j else 0.0 for (i, j) in idx])
    cuts_A, cuts_b = [], []
    for i in range(n):
        w = np.eye(n)[i]
        cuts_A.append(-_sym_coeff(np.outer(w, w), idx))
        cuts_b.append(-pfloor)
    P = P_seed.copy()
    for _ in range(max_rounds):
        ev = residual_eigs(P, Acl, Q)
        worst_order = np.argsort(ev)[::-1]
        wp, Vp = np.linalg.eigh(P)
        feasible = ev[worst_order[0]] <= -0.5 * margin and wp[0] >= pfloor - 1e-9
        if feasible:
            return P
        sel = Acl[worst_order[:cuts_per_round]]
        Mres = np.einsum("kji,jl,klm->kim", sel, P, sel) - P + Q
        w_, V_ = np.linalg.eigh(Mres)
        for r, gi in enumerate(worst_order[:cuts_per_round]):
            v = V_[r][:, -1]
            Av = Acl[gi] @ v
            cuts_A.append(_sym_coeff(np.outer(Av, Av) - np.outer(v, v), idx))
            cuts_b.append(float(-v @ Q @ v) - margin)
        if wp[0] < pfloor:
            w0 = Vp[:, 0]
            cuts_A.append(-_sym_coeff(np.outer(w0, w0), idx))
            cuts_b.append(-pfloor)
        lp = optim.LinearProgram(trace_cost, A_ub=np.array(cuts_A), b_ub=np.array(cuts_b),
                                 lb=np.full(nv, -box), ub=np.full(nv, box))
        sol, rep = optim.solve_lp(lp)
        if sol is None or not rep.ok:
            raise TerminalDesignError(f"cutting-plane LP failed: {rep.status}")
        P = _vec_to_sym(sol, idx, n)
        # project tiny asymmetries / indefiniteness out before the next oracle call
        wq, Vq = np.linalg.eigh(P)
        P = (Vq * np.maximum(wq, 1e-9)) @ Vq.T
    ev = residual_eigs(P, Acl, Q)
    raise TerminalDesignError(
        f"cutting-plane refinement did not converge (worst residual {ev.max():.3e})")


@dataclass
class VerifyPReport:
    passed: bool
    worst_eig: float
    grid_points: int
    lattice_points: int
    n_violations: int
    monodromy_ok: bool
    violations: list = field(default_factory=list)


def q_star(S, K, eps):
    """Q*(r) for an affine terminal controller: (I;K)' S (I;K) + 2 eps I."""
    n = K.shape[1]
    IK = np.vstack([np.eye(n), K])
    return IK.T @ S @ IK + 2.0 * eps * np.eye(n)


def verify_P(model: PlantModel, P, K, S, grid, eps_pair=(0.045, 0.01), t=0):
    """Grid check of the decrease matrix inequality for constant (P, K).

    Reports the worst eigenvalue of A_cl' P A_cl - P + Q* + eps_tilde*I over
    the grid; a pass additionally asserts that every closed-loop
    linearization is Schur stable (monodromy contraction in the P metric).
    """
    eps, eps_t = eps_pair
    X, U, raw = grid
    A, B = batched_jacobians(model, X, U, t)
    Acl = A + np.einsum("kij,jl->kil", B, K)
    Q = q_star(S, K, eps) + eps_t * np.eye(model.n)
    ev = residual_eigs(P, Acl, Q)
    bad = np.flatnonzero(ev > 0)
    mono_ok = True
    if bad.size == 0:
        sr = np.max(np.abs(np.linalg.eigvals(Acl)), axis=1)
        mono_ok = bool(np.all(sr < 1.0))
    viols = [(int(i), float(ev[i]), X[:, i].tolist(), U[:, i].tolist()) for i in bad[:20]]
    return VerifyPReport(passed=bad.size == 0, worst_eig=float(ev.max()),
                         grid_points=X.shape[1], lattice_points=raw,
                         n_violations=int(bad.size), monodromy_ok=mono_ok,
                         violations=viols)


def design_quadratic_P(model: PlantModel, sample_orbits, S, eps_pair,
                       grid=None, y_ref=None, pfloor=0.5, margin=1e-3):
    """Constant (P, K) satisfying the grid decrease inequality.

    K comes from the Riccati gain at the first sample-orbit point (zero when
    the plant has integer inputs, so the terminal controller cannot leave the
    discrete input set).  P is seeded by per-orbit periodic Lyapunov
    solutions (max-blended) and refined by cutting planes when the seed fails
    the grid.
    """
    eps, eps_t = eps_pair
    n, m = model.n, model.m
    S = np.asarray(S, dtype=float)
    if grid is None:
        grid = verification_grid(model)
    X, U, _ = grid
    A, B = batched_jacobians(model, X, U, 0)
    r0 = sample_orbits[0]
    A0, B0 = batched_jacobians(model, r0.X[0][:, None], r0.U[0][:, None], r0.t0)
    if model.integer_input_mask is not None and np.any(model.integer_input_mask):
        K = np.zeros((m, n))
    else:
        Sxx, Sxu, Suu = S[:n, :n], S[:n, n:], S[n:, n:]
        Q_lqr = Sxx + (2 * eps + eps_t) * np.eye(n)
        R_lqr = Suu + 1e-9 * np.eye(m)
        _, K = dare_gain(A0[0], B0[0], Q_lqr, R_lqr, S_cross=Sxu)
    Q = q_star(S, K, eps) + eps_t * np.eye(n)
    # seed: periodic Lyapunov along each sample orbit, elementwise max blend
    P_seed = np.zeros((n, n))
    for r in sample_orbits:
        Ar, Br = batched_jacobians(model, r.X.T, r.U.T, r.t0)
        Acl_r = [Ar[k] + Br[k] @ K for k in range(r.T)]
        try:
            P_orb = periodic_lyapunov(Acl_r, [Q] * r.T)
        except TerminalDesignError:
            raise
        P_seed = np.maximum(P_seed, np.max(P_orb, axis=0))
    P_seed = 0.5 * (P_seed + P_seed.T)
    w, V = np.linalg.eigh(P_seed)
    P_seed = (V * np.maximum(w, pfloor)) @ V.T
    Acl = A + np.einsum("kij,jl->kil", B, K)
    ev_max = residual_eigs(P_seed, Acl, Q).max()
    if ev_max <= 0.0:
        P = P_seed
    elif ev_max <= 1e-10:
        P = P_seed * (1.0 + 1e-8)  # seed sits on the boundary; nudge inside
    else:
        P = refine_P_cutting_plane(P_seed, Acl, Q, margin=margin, pfloor=pfloor)
    return P[None, :, :], K[None, :, :]


# ---------------------------------------------------------------------------
# adjoint trajectory
# ---------------------------------------------------------------------------

@dataclass
class AdjointTrajectory:
    p: np.ndarray  # (T, n); p(T) := p(0)
    residual: float

    def at(self, k):
        return self.p[k % self.p.shape[0]]


def closed_loop_jacobians(r: PeriodicReference, model: PlantModel, K_phases):
    from .plant import linearize
    T = r.T
    out = []
    for k in range(T):
        A, B = linearize(model, r.X[k], r.U[k], r.t0 + k)
        Kk = K_phases[(r.t0 + k) % K_phases.shape[0]]
        out.append(A + B @ Kk)
    return out


def _lbar_grad(r, model, K_phases, y):
    """Gradients of lbar(x) = l(x, k_f(x)) - l(r) at the orbit points."""
    from .plant import cost_derivatives
    T = r.T
    g = np.empty((T, model.n))
    for k in range(T):
        gx, _ = cost_derivatives(model, r.X[k], r.U[k], r.t0 + k, y)
        Kk = K_phases[(r.t0 + k) % K_phases.shape[0]]
        g[k] = gx[:model.n] + Kk.T @ gx[model.n:]
    return g


def monodromy_spectral_radius(Acl_seq):
    M = np.eye(Acl_seq[0].shape[0])
    for A in Acl_seq:
        M = A @ M
    return float(np.max(np.abs(np.linalg.eigvals(M)))), M


def compute_adjoint(r: PeriodicReference, model: PlantModel, K_phases, y,
                    mode="iterative"):
    """Periodic adjoint p(.) correcting the terminal cost for the stage-cost
    gradient along the orbit.

    ``iterative`` solves the stacked nT x nT cyclic system; ``explicit``
    anchors each p(k) through the monodromy identity.  Both satisfy the
    defining recursion to 1e-9 and agree with each other.
    """
    T, n = r.T, model.n
    Acl = closed_loop_jacobians(r, model, K_phases)
    sr, _ = monodromy_spectral_radius(Acl)
    if sr >= 1.0:
        raise UnsupportedPlantOperation(
            f"monodromy spectral radius {sr:.4f} >= 1; terminal design invalid")
    g = _lbar_grad(r, model, K_phases, y)
    if mode == "iterative":
        M = np.zeros((n * T, n * T))
        rhs = np.zeros(n * T)
        for j in range(T):
            M[j * n:(j + 1) * n, j * n:(j + 1) * n] = np.eye(n)
            jn = ((j + 1) % T) * n
            M[j * n:(j + 1) * n, jn:jn + n] += -Acl[j].T
            rhs[j * n:(j + 1) * n] = g[j]
        sol = np.linalg.solve(M, rhs)
        p = sol.reshape(T, n)
    elif mode == "explicit":
        p = np.empty((T, n))
        for j in range(T):
            Abar = np.eye(n)
            rhs = np.zeros(n)
            for k in range(T):
                rhs += Abar.T @ g[(j + k) % T]
                Abar = Acl[(j + k) % T] @ Abar
            p[j] = np.linalg.solve(np.eye(n) - Abar.T, rhs)
    else:
        raise ValueError(f"unknown adjoint mode '{mode}'")
    res = 0.0
    for j in range(T):
        res = max(res, float(np.max(np.abs(Acl[j].T @ p[(j + 1) % T] - p[j] + g[j]))))
    if res > ADJOINT_TOL:
        raise TerminalDesignError(f"adjoint residual {res:.2e} exceeds {ADJOINT_TOL}")
    return AdjointTrajectory(p=p, residual=res)


# ---------------------------------------------------------------------------
# terminal cost / set evaluation
# ---------------------------------------------------------------------------

def pnorm2(dx, P):
    return float(dx @ P @ dx)


def terminal_cost(x, r: PeriodicReference, ing: TerminalIngredients,
                  model: PlantModel, y):
    """V_f(x, r_T) for the configured variant (0 for TEC)."""
    x = np.asarray(x, dtype=float)
    dx = x - r.X[0]
    if ing.variant == "tec":
        return 0.0
    P = ing.P_at(r.t0)
    q = pnorm2(dx, P)
    if ing.variant == "positive_definite":
        return q + ing.c * np.sqrt(q)
    if ing.variant == "quadratic_economic":
        adj = compute_adjoint(r, model, ing.K, y, mode=ing.adjoint_mode)
        return q + float(adj.p[0] @ dx)
    if ing.variant == "sum_power":
        vd = np.sqrt(q)
        tot = 0.0
        for k, a in enumerate(ing.sum_a, start=1):
            tot += a / (ing.sum_cl ** k * (1.0 - ing.sum_rho ** k)) * vd ** k
        return tot
    raise ValueError(f"unknown variant {ing.variant}")


def modified_reference_cost(x, r: PeriodicReference, ing: TerminalIngredients,
                            model: PlantModel, y):
    """V_f plus the weighted future orbit stage costs ((T-1-k)/T weights)."""
    T = r.T
    extra = sum(((T - 1 - k) / T) * stage_cost(model, r.X[k], r.U[k], r.t0 + k, y)
                for k in range(T - 1))
    return terminal_cost(x, r, ing, model, y) + extra


def terminal_membership_residual(x, xr0, ing: TerminalIngredients, t):
    """<= 0 inside the terminal set; TEC uses the infinity-norm gap."""
    dx = np.asarray(x, dtype=float) - np.asarray(xr0, dtype=float)
    if ing.variant == "tec":
        return float(np.max(np.abs(dx))) - TOL_FEAS
    return pnorm2(dx, ing.P_at(t)) - ing.alpha


def terminal_set_contains(x, r: PeriodicReference, ing: TerminalIngredients):
    """(contained, signed margin); margin = alpha - ||x - x_r||_P^2."""
    if ing.variant == "tec":
        gap = float(np.max(np.abs(np.asarray(x) - r.X[0])))
        return gap <= TOL_FEAS, TOL_FEAS - gap
    margin = ing.alpha - pnorm2(np.asarray(x, dtype=float) - r.X[0], ing.P_at(r.t0))
    return margin >= 0.0, margin


def sample_terminal_set(r: PeriodicReference, ing: TerminalIngredients, count, rng):
    """Uniform samples of the P-ellipsoid {||dx||_P^2 <= alpha} around x_r(0)."""
    n = r.X.shape[1]
    P = ing.P_at(r.t0)
    L = np.linalg.cholesky(P)
    W = rng.normal(size=(count, n))
    W /= np.linalg.norm(W, axis=1, keepdims=True)
    radii = rng.uniform(0.0, 1.0, size=count) ** (1.0 / n)
    balls = W * radii[:, None]
    dxs = np.sqrt(ing.alpha) * np.linalg.solve(L.T, balls.T).T
    return r.X[0][None, :] + dxs


def terminal_controller(x, r: PeriodicReference, ing: TerminalIngredients):
    if ing.variant == "tec":
        return r.U[0].copy()
    return r.U[0] + ing.K_at(r.t0) @ (np.asarray(x, dtype=float) - r.X[0])


@dataclass
class DecreaseReport:
    passed: bool
    worst_slack: float
    samples: int
    n_violations: int
    worst_case: tuple = ()


def verify_decrease(model: PlantModel, ing: TerminalIngredients, orbits, y_values,
                    sample_count=1000, seed=0, slack_tol=1e-8):
    """Sampled check of the terminal decrease inequality.

    Draws x uniformly in X_f(r), applies the terminal controller and requires
    V_f(x+, r+) - V_f(x, r) + l(x, u) - l(r(0)) <= slack_tol at every sample.
    """
    rng = np.random.default_rng(seed)
    worst = -np.inf
    worst_case = ()
    nviol = 0
    total = 0
    for r in orbits:
        r_next = shift(r)
        for y in y_values:
            y = model.check_y(y)
            if ing.variant == "tec":
                xs = r.X[0][None, :]
            else:
                xs = sample_terminal_set(r, ing, sample_count, rng)
            v_ref = stage_cost(model, r.X[0], r.U[0], r.t0, y)
            for x in xs:
                u = terminal_controller(x, r, ing)
                xp = np.atleast_1d(model.f(x, u, r.t0))
                slack = (terminal_cost(xp, r_next, ing, model, y)
                         - terminal_cost(x, r, ing, model, y)
                         + stage_cost(model, x, u, r.t0, y) - v_ref)
                total += 1
                if slack > worst:
                    worst = slack
                    worst_case = (r.t0, float(y[0]) if y.size else 0.0, x.tolist())
                if slack > slack_tol:
                    nviol += 1
    return DecreaseReport(passed=nviol == 0, worst_slack=float(worst),
                          samples=total, n_violations=nviol, worst_case=worst_case)


def design_alpha(model: PlantModel, P, K, alpha_grid, sample_orbits, y_values,
                 sample_count=200, seed=0, variant="positive_definite", c=0.0):
    """Largest grid alpha passing the sampled decrease check and keeping the
    terminal controller inside Z on the level-set boundary."""
    report = None
    for alpha in sorted(alpha_grid, reverse=True):
        ing = TerminalIngredients(variant=variant, period=P.shape[0], P=P, K=K,
                                  alpha=float(alpha), c=c)
        ok = True
        rng = np.random.default_rng(seed)
        for r in sample_orbits:
            Pt = ing.P_at(r.t0)
            L = np.linalg.cholesky(Pt)
            W = rng.normal(size=(sample_count, model.n))
            W /= np.linalg.norm(W, axis=1, keepdims=True)
            dxs = np.sqrt(alpha) * np.linalg.solve(L.T, W.T).T  # on the boundary
            for k in range(r.T):
                z = model.Z(r.t0 + k)
                Kk = ing.K_at(r.t0 + k)
                for dx in dxs:
                    xu = np.concatenate([r.X[k] + dx, r.U[k] + Kk @ dx])
                    if z.violation(xu) > 0.0:
                        ok = False
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            rep = verify_decrease(model, ing, sample_orbits, y_values,
                                  sample_count=sample_count, seed=seed)
            report = rep
            if rep.passed:
                return float(alpha), rep
    raise TerminalDesignError("no candidate terminal set size passed", report=report)


def design_c(model: PlantModel, P, K, sample_orbits, y_values, headroom=1.05):
    """Norm-term weight c = headroom * a1 / (1 - rho) over the sample orbits.

    a1 bounds the dual P-norm of the stage-cost gradient along the closed
    loop; rho is the worst one-step contraction factor of ||dx||_P over the
    orbit linearizations.
    """
    P0 = P[0]
    L = np.linalg.cholesky(P0)
    Linv = np.linalg.inv(L)
    rho2 = 0.0
    a1 = 0.0
    for r in sample_orbits:
        Acl = closed_loop_jacobians(r, model, K)
        for A in Acl:
            M = Linv @ (A.T @ P0 @ A) @ Linv.T
            rho2 = max(rho2, float(np.linalg.eigvalsh(M)[-1]))
        for y in y_values:
            g = _lbar_grad(r, model, K, model.check_y(y))
            for gk in g:
                a1 = max(a1, float(np.sqrt(gk @ np.linalg.solve(P0, gk))))
    rho = np.sqrt(min(rho2, 1.0 - 1e-12))
    if rho >= 1.0 - 1e-9:
        raise TerminalDesignError(f"no contraction on sample orbits (rho={rho:.6f})")
    return float(headroom * a1 / (1.0 - rho)), float(rho), float(a1)


# ---------------------------------------------------------------------------
# artifact serialization
# ---------------------------------------------------------------------------

def ingredients_to_text(ing: TerminalIngredients):
    out = io.StringIO()
    out.write("[ingredients]\n")
    out.write(f"variant = {ing.variant}\n")
    out.write(f"period = {ing.period}\n")
    out.write(f"alpha = {ing.alpha:.17g}\n")
    out.write(f"c = {ing.c:.17g}\n")
    out.write(f"nu = {ing.nu}\n")
    out.write(f"adjoint_mode = {ing.adjoint_mode}\n")
    if ing.variant == "sum_power":
        out.write(f"sum_a = {' '.join(f'{a:.17g}' for a in ing.sum_a)}\n")
        out.write(f"sum_cl = {ing.sum_cl:.17g}\n")
        out.write(f"sum_rho = {ing.sum_rho:.17g}\n")
    if ing.P is not None:
        out.write("\n[P]\n")
        for t in range(ing.period):
            out.write(f"phase_{t} = " + " ".join(f"{v:.17g}" for v in ing.P[t].ravel()) + "\n")
        out.write("\n[K]\n")
        for t in range(ing.period):
            out.write(f"phase_{t} = " + " ".join(f"{v:.17g}" for v in ing.K[t].ravel()) + "\n")
    if ing.provenance:
        out.write("\n[provenance]\n")
        for k, v in sorted(ing.provenance.items()):
            out.write(f"{k} = {v}\n")
    return out.getvalue()


def ingredients_from_text(text, n=None, m=None):
    cp = configparser.ConfigParser()
    cp.read_string(text)
    sec = cp["ingredients"]
    period = sec.getint("period")
    ing = TerminalIngredients(
        variant=sec.get("variant"), period=period,
        alpha=sec.getfloat("alpha"), c=sec.getfloat("c"),
        nu=sec.getint("nu"), adjoint_mode=sec.get("adjoint_mode"))
    if cp.has_option("ingredients", "sum_a"):
        ing.sum_a = tuple(float(v) for v in sec.get("sum_a").split())
        ing.sum_cl = sec.getfloat("sum_cl")
        ing.sum_rho = sec.getfloat("sum_rho")
    if cp.has_section("P"):
        Ps, Ks = [], []
        for t in range(period):
            pv = np.array([float(v) for v in cp["P"][f"phase_{t}"].split()])
            kv = np.array([float(v) for v in cp["K"][f"phase_{t}"].split()])
            nn = int(round(np.sqrt(pv.size))) if n is None else n
            mm = kv.size // nn if m is None else m
            Ps.append(pv.reshape(nn, nn))
            Ks.append(kv.reshape(mm, nn))
        ing.P = np.array(Ps)
        ing.K = np.array(Ks)
    if cp.has_section("provenance"):
        ing.provenance = dict(cp["provenance"])
    return ing
