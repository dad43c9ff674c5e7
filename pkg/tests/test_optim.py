"""Solver oracles: KKT recomputation, cross-solver agreement, enumeration."""

import itertools

import numpy as np
import pytest

from pempc.optim import (LinearProgram, NlpProblem, solve_lp, solve_milp,
                         solve_qp, solve_sqp)


# ----------------------------------------------------------------- LP

def test_lp_box_trivial():
    x, rep = solve_lp(LinearProgram(c=np.array([-1.0]), lb=np.array([0.0]), ub=np.array([2.0])))
    assert rep.ok
    assert x[0] == pytest.approx(2.0, abs=1e-9)


def test_lp_infeasible_vs_unbounded_distinguished():
    # x >= 1 and x <= 0 simultaneously
    lp = LinearProgram(c=np.array([1.0]), A_ub=np.array([[-1.0], [1.0]]),
                       b_ub=np.array([-1.0, 0.0]))
    x, rep = solve_lp(lp)
    assert rep.status == "infeasible"
    # min -x with x >= 0 only
    lp = LinearProgram(c=np.array([-1.0]), lb=np.array([0.0]))
    x, rep = solve_lp(lp)
    assert rep.status == "unbounded"


def test_lp_equalities_and_inequalities():
    # min x+y st x+y >= 1, x-y = 0.25, 0<=x,y<=1  ->  x=0.625,y=0.375
    lp = LinearProgram(c=np.array([1.0, 1.0]),
                       A_ub=np.array([[-1.0, -1.0]]), b_ub=np.array([-1.0]),
                       A_eq=np.array([[1.0, -1.0]]), b_eq=np.array([0.25]),
                       lb=np.zeros(2), ub=np.ones(2))
    x, rep = solve_lp(lp)
    assert rep.ok
    assert np.allclose(x, [0.625, 0.375], atol=1e-9)


def test_lp_beale_cycling_instance_terminates():
    # Beale's classic degenerate example; Dantzig pivoting cycles, Bland must not.
    c = np.array([-0.75, 150.0, -0.02, 6.0])
    A_ub = np.array([[0.25, -60.0, -0.04, 9.0],
                     [0.5, -90.0, -0.02, 3.0],
                     [0.0, 0.0, 1.0, 0.0]])
    b_ub = np.array([0.0, 0.0, 1.0])
    lp = LinearProgram(c, A_ub=A_ub, b_ub=b_ub, lb=np.zeros(4))
    x, rep = solve_lp(lp)
    assert rep.ok
    assert rep.objective == pytest.approx(-0.05, abs=1e-9)


def test_lp_free_variables():
    # min x st x >= -3 via row (no variable bound), x free
    lp = LinearProgram(c=np.array([1.0]), A_ub=np.array([[-1.0]]), b_ub=np.array([3.0]))
    x, rep = solve_lp(lp)
    assert rep.ok
    assert x[0] == pytest.approx(-3.0, abs=1e-9)


def test_lp_random_instances_against_vertex_enumeration():
    rng = np.random.default_rng(42)
    for _ in range(25):
        n = 3
        c = rng.normal(size=n)
        A = rng.normal(size=(5, n))
        b = rng.uniform(0.5, 2.0, size=5)
        lp = LinearProgram(c, A_ub=A, b_ub=b, lb=-np.ones(n), ub=np.ones(n))
        x, rep = solve_lp(lp)
        assert rep.ok
        # oracle: enumerate all vertices of the polytope {Ax<=b, -1<=x<=1}
        rows = np.vstack([A, np.eye(n), -np.eye(n)])
        rhs = np.concatenate([b, np.ones(n), np.ones(n)])
        best = np.inf
        for comb in itertools.combinations(range(rows.shape[0]), n):
            M = rows[list(comb)]
            if abs(np.linalg.det(M)) < 1e-10:
                continue
            v = np.linalg.solve(M, rhs[list(comb)])
            if np.all(rows @ v <= rhs + 1e-9):
                best = min(best, c @ v)
        assert rep.objective == pytest.approx(best, abs=1e-7)


# ----------------------------------------------------------------- QP

def test_qp_box_1d():
    # min (z-2)^2 s.t. z <= 1  -> z = 1
    x, le, li, rep = solve_qp(np.array([[2.0]]), np.array([-4.0]),
                              A_ub=np.array([[1.0]]), b_ub=np.array([1.0]))
    assert rep.ok
    assert x[0] == pytest.approx(1.0, abs=1e-10)


def test_qp_equality_constrained_matches_direct_kkt():
    rng = np.random.default_rng(3)
    n, m = 6, 2
    M = rng.normal(size=(n, n))
    H = M @ M.T + np.eye(n)
    g = rng.normal(size=n)
    A = rng.normal(size=(m, n))
    b = rng.normal(size=m)
    x, le, li, rep = solve_qp(H, g, A_eq=A, b_eq=b)
    kkt = np.block([[H, A.T], [A, np.zeros((m, m))]])
    sol = np.linalg.solve(kkt, np.concatenate([-g, b]))
    assert rep.ok
    assert np.allclose(x, sol[:n], atol=1e-8)


def test_qp_random_strictly_convex_kkt_residual():
    rng = np.random.default_rng(11)
    for _ in range(20):
        n = 10
        M = rng.normal(size=(n, n))
        H = M @ M.T + 0.5 * np.eye(n)
        g = rng.normal(size=n)
        G = rng.normal(size=(8, n))
        h = rng.uniform(0.1, 1.0, size=8)
        x, le, li, rep = solve_qp(H, g, A_ub=G, b_ub=h, lb=-2 * np.ones(n), ub=2 * np.ones(n))
        assert rep.ok
        assert rep.kkt_residual <= 1e-9
        assert rep.max_violation <= 1e-9


def test_qp_lp_agreement_with_sigma_regularization():
    rng = np.random.default_rng(5)
    for _ in range(10):
        n = 4
        c = rng.normal(size=n)
        A = rng.normal(size=(6, n))
        b = rng.uniform(0.5, 2.0, size=6)
        lp = LinearProgram(c, A_ub=A, b_ub=b, lb=-np.ones(n), ub=np.ones(n))
        xl, repl = solve_lp(lp)
        xq, _, _, repq = solve_qp(np.zeros((n, n)), c, A_ub=A, b_ub=b,
                                  lb=-np.ones(n), ub=np.ones(n))
        assert repl.ok and repq.ok
        assert repq.objective == pytest.approx(repl.objective, abs=1e-7)


def test_qp_infeasible_detected_by_phase1():
    x, le, li, rep = solve_qp(np.eye(1), np.zeros(1),
                              A_ub=np.array([[1.0], [-1.0]]), b_ub=np.array([-1.0, -1.0]))
    assert x is None
    assert rep.status == "infeasible"


# ----------------------------------------------------------------- SQP

def test_sqp_unconstrained_quadratic_one_shot():
    z0 = np.array([3.0, -1.0, 0.5])
    p = NlpProblem(dim=3, objective=lambda z: float(np.sum((z - z0) ** 2)),
                   grad=lambda z: 2 * (z - z0))
    x, rep = solve_sqp(p, np.zeros(3), budget=50)
    assert rep.ok
    assert np.allclose(x, z0, atol=1e-10)


def test_sqp_equality_qp_matches_kkt_oracle():
    rng = np.random.default_rng(9)
    n, m = 5, 2
    M = rng.normal(size=(n, n))
    H = M @ M.T + np.eye(n)
    g = rng.normal(size=n)
    A = rng.normal(size=(m, n))
    b = rng.normal(size=m)
    p = NlpProblem(dim=n,
                   objective=lambda z: float(0.5 * z @ H @ z + g @ z),
                   grad=lambda z: H @ z + g,
                   eq=lambda z: A @ z - b,
                   eq_jac=lambda z: A)
    x, rep = solve_sqp(p, np.zeros(n), budget=200)
    kkt = np.block([[H, A.T], [A, np.zeros((m, m))]])
    sol = np.linalg.solve(kkt, np.concatenate([-g, b]))
    assert rep.ok
    assert np.allclose(x, sol[:n], atol=1e-8)


def test_sqp_rosenbrock():
    def rosen(z):
        return float(100.0 * (z[1] - z[0] ** 2) ** 2 + (1 - z[0]) ** 2)

    p = NlpProblem(dim=2, objective=rosen)
    x, rep = solve_sqp(p, np.array([-1.2, 1.0]), budget=500)
    assert np.allclose(x, [1.0, 1.0], atol=1e-6)


def test_sqp_inequality_active_at_solution():
    # min (x+1)^2 + (y-2)^2 s.t. x >= 0, y <= 1  -> (0, 1)
    p = NlpProblem(dim=2,
                   objective=lambda z: float((z[0] + 1) ** 2 + (z[1] - 2) ** 2),
                   lb=np.array([0.0, -np.inf]), ub=np.array([np.inf, 1.0]))
    x, rep = solve_sqp(p, np.array([2.0, 0.0]), budget=100)
    assert rep.ok
    assert np.allclose(x, [0.0, 1.0], atol=1e-8)


def test_sqp_gauss_newton_least_squares():
    # 0.5*||r(z)||^2 with r(z) = M z - t
    rng = np.random.default_rng(2)
    M = rng.normal(size=(6, 3))
    t = rng.normal(size=6)
    p = NlpProblem(dim=3,
                   objective=lambda z: float(0.5 * np.sum((M @ z - t) ** 2)),
                   grad=lambda z: M.T @ (M @ z - t),
                   residuals=lambda z: M @ z - t,
                   residual_jac=lambda z: M)
    x, rep = solve_sqp(p, np.zeros(3), budget=50)
    xstar, *_ = np.linalg.lstsq(M, t, rcond=None)
    assert rep.ok
    assert np.allclose(x, xstar, atol=1e-8)


def test_sqp_batched_fd_matches_scalar_fd():
    H = np.diag([1.0, 4.0])

    def batch(Z):
        f = 0.5 * np.einsum("ik,ij,jk->k", Z, H, Z)
        ce = (Z[0] + Z[1] - 1.0).reshape(1, -1)
        ci = np.zeros((0, Z.shape[1]))
        return f, ce, ci

    p1 = NlpProblem(dim=2, eval_batch=batch)
    p2 = NlpProblem(dim=2, objective=lambda z: float(0.5 * z @ H @ z),
                    eq=lambda z: np.array([z[0] + z[1] - 1.0]))
    x1, r1 = solve_sqp(p1, np.array([2.0, 2.0]), budget=100)
    x2, r2 = solve_sqp(p2, np.array([2.0, 2.0]), budget=100)
    assert r1.ok and r2.ok
    assert np.allclose(x1, x2, atol=1e-7)
    assert np.allclose(x1, [0.8, 0.2], atol=1e-6)


def test_sqp_determinism():
    p = NlpProblem(dim=2,
                   objective=lambda z: float((z[0] - 1) ** 2 + 0.3 * (z[1] + 0.5) ** 4),
                   lb=np.array([-2.0, -2.0]), ub=np.array([2.0, 2.0]))
    x1, r1 = solve_sqp(p, np.array([1.7, 1.7]), budget=200)
    x2, r2 = solve_sqp(p, np.array([1.7, 1.7]), budget=200)
    assert np.array_equal(x1, x2)
    assert r1.iterations == r2.iterations


# ----------------------------------------------------------------- MILP

def test_milp_single_binary():
    lp = LinearProgram(c=np.array([1.0]), lb=np.array([0.0]), ub=np.array([1.0]))
    x, rep = solve_milp(lp, [0])
    assert rep.ok
    assert x[0] == pytest.approx(0.0, abs=1e-9)


def test_milp_chiller_single_step_matches_branch_enumeration():
    # cooling segments {0} u [0.75,1] u [1.5,2] encoded as 0.75*v <= q <= v, v in {0,1,2};
    # minimize rho*q + lam*(d - q) type tradeoff for several price points
    for rho, lam in [(1.0, 0.3), (0.2, 0.5), (0.5, 0.45), (2.0, 0.1)]:
        c = np.array([rho - lam, 0.0])  # vars (q, v); constant lam*d dropped
        A_ub = np.array([[-1.0, 0.75], [1.0, -1.0]])
        b_ub = np.zeros(2)
        lp = LinearProgram(c, A_ub=A_ub, b_ub=b_ub,
                           lb=np.array([0.0, 0.0]), ub=np.array([2.0, 2.0]))
        x, rep = solve_milp(lp, [1])
        assert rep.ok
        best = np.inf
        for v in (0, 1, 2):
            lo, hi = 0.75 * v, float(v)
            q = lo if c[0] >= 0 else hi
            best = min(best, c[0] * q)
        assert rep.objective == pytest.approx(best, abs=1e-9)


def test_milp_knapsack_5_binary_matches_exhaustive():
    rng = np.random.default_rng(8)
    for _ in range(5):
        vals = rng.uniform(1, 10, size=5)
        wts = rng.uniform(1, 5, size=5)
        cap = 0.5 * wts.sum()
        lp = LinearProgram(c=-vals, A_ub=wts.reshape(1, -1), b_ub=np.array([cap]),
                           lb=np.zeros(5), ub=np.ones(5))
        x, rep = solve_milp(lp, range(5))
        best = 0.0
        for bits in itertools.product([0, 1], repeat=5):
            sel = np.array(bits, dtype=float)
            if wts @ sel <= cap + 1e-12:
                best = max(best, vals @ sel)
        assert rep.ok
        assert -rep.objective == pytest.approx(best, abs=1e-9)


def test_milp_infeasible():
    lp = LinearProgram(c=np.array([1.0]), A_ub=np.array([[1.0], [-1.0]]),
                       b_ub=np.array([0.4, -0.6]), lb=np.array([0.0]), ub=np.array([1.0]))
    x, rep = solve_milp(lp, [0])
    assert rep.status == "infeasible"


def test_milp_mixed_integer_continuous():
    # min -q - 0.1 y st q <= v (v integer <= 3), q + y <= 2.5, y <= 1
    lp = LinearProgram(c=np.array([-1.0, -0.1, 0.0]),
                       A_ub=np.array([[1.0, 0.0, -1.0], [1.0, 1.0, 0.0]]),
                       b_ub=np.array([0.0, 2.5]),
                       lb=np.zeros(3), ub=np.array([np.inf, 1.0, 3.0]))
    x, rep = solve_milp(lp, [2])
    assert rep.ok
    # v=2: q=1.5? no: q <= v and q+y <= 2.5 -> best v=3 gives q=2.5-y.. enumerate
    best = np.inf
    for v in range(4):
        # q <= v, q + y <= 2.5, 0<=y<=1: maximize q + 0.1 y
        q = min(v, 2.5)
        y = min(1.0, 2.5 - q)
        best = min(best, -q - 0.1 * y)
    assert rep.objective == pytest.approx(best, abs=1e-9)
