"""Terminal ingredients: adjoints, cost variants, synthesis and verification."""

import numpy as np
import pytest

from pempc.orbit import PeriodicReference, cost_JT, shift
from pempc.plant import BoxSet, PlantModel
from pempc.scenarios import (CSTR_US, cstr_steady_state, hvac_price_signal,
                             make_cstr_plant, make_graph_plant, make_hvac_plant)
from pempc.terminal import (TerminalDesignError, TerminalIngredients,
                            compute_adjoint, design_alpha, design_c,
                            design_quadratic_P, ingredients_from_text,
                            ingredients_to_text, modified_reference_cost,
                            terminal_cost, terminal_set_contains,
                            verification_grid, verify_P, verify_decrease)


def make_linear_plant(A_seq, B_seq, g_seq):
    """Synthetic periodic linear plant with stage cost g(t)' x."""
    A_seq = [np.atleast_2d(A) for A in A_seq]
    B_seq = [np.atleast_2d(B) for B in B_seq]
    T = len(A_seq)
    n, m = A_seq[0].shape[0], B_seq[0].shape[1]
    box = BoxSet(lo=np.full(n + m, -10.0), hi=np.full(n + m, 10.0))

    def f(x, u, t):
        return A_seq[t % T] @ np.asarray(x, dtype=float) + B_seq[t % T] @ np.asarray(u, dtype=float)

    def cost(x, u, t, y):
        return g_seq[t % T] @ np.asarray(x, dtype=float)

    def cost_derivs(x, u, t, y):
        return np.concatenate([g_seq[t % T], np.zeros(m)]), np.zeros((n + m, n + m))

    def f_jac(x, u, t):
        return A_seq[t % T], B_seq[t % T]

    return PlantModel(name="lin", n=n, m=m, T=T, f=f, cost=cost,
                      Z_phases=(box,) * T, Zr_phases=(box,) * T,
                      Y_lo=np.zeros(0), Y_hi=np.zeros(0),
                      smooth=True, f_jac=f_jac, cost_derivs=cost_derivs)


def stable_periodic_system(rng, T, n, m=1):
    A_seq, B_seq, g_seq = [], [], []
    for _ in range(T):
        A_seq.append(rng.normal(size=(n, n)))
        B_seq.append(rng.normal(size=(n, m)))
        g_seq.append(rng.normal(size=n))
    mono = np.eye(n)
    for A in A_seq:
        mono = A @ mono
    scale = (0.7 / max(np.max(np.abs(np.linalg.eigvals(mono))), 1e-9)) ** (1.0 / T)
    A_seq = [A * scale for A in A_seq]
    return A_seq, B_seq, g_seq


YZERO = np.zeros(0)


# ------------------------------------------------------------------ adjoint

def test_adjoint_scalar_closed_form():
    # T=1, a_cl=0.5, lbar_x=g  ->  p = g / (1 - 0.5)
    g = 0.7
    plant = make_linear_plant([np.array([[0.5]])], [np.array([[0.0]])], [np.array([g])])
    r = PeriodicReference(np.zeros((1, 1)), np.zeros((1, 1)), 0)
    K = np.zeros((1, 1, 1))
    adj = compute_adjoint(r, plant, K, YZERO, mode="iterative")
    assert adj.p[0, 0] == pytest.approx(2 * g, abs=1e-12)


def test_adjoint_zero_gradient():
    plant = make_linear_plant([np.array([[0.5]])] * 3, [np.array([[1.0]])] * 3,
                              [np.zeros(1)] * 3)
    r = PeriodicReference(np.zeros((3, 1)), np.zeros((3, 1)), 0)
    adj = compute_adjoint(r, plant, np.zeros((3, 1, 1)), YZERO, mode="explicit")
    assert np.allclose(adj.p, 0.0)


def test_adjoint_modes_agree_random_stable():
    rng = np.random.default_rng(7)
    for _ in range(10):
        T = int(rng.integers(2, 6))
        n = int(rng.integers(2, 5))
        A_seq, B_seq, g_seq = stable_periodic_system(rng, T, n)
        plant = make_linear_plant(A_seq, B_seq, g_seq)
        r = PeriodicReference(np.zeros((T, n)), np.zeros((T, 1)), 0)
        K = np.zeros((T, 1, n))
        p1 = compute_adjoint(r, plant, K, YZERO, mode="iterative")
        p2 = compute_adjoint(r, plant, K, YZERO, mode="explicit")
        assert np.max(np.abs(p1.p - p2.p)) <= 1e-9
        assert p1.residual <= 1e-9 and p2.residual <= 1e-9


def test_adjoint_rejects_unstable_monodromy():
    plant = make_linear_plant([np.array([[1.3]])], [np.array([[0.0]])], [np.ones(1)])
    r = PeriodicReference(np.zeros((1, 1)), np.zeros((1, 1)), 0)
    from pempc.plant import UnsupportedPlantOperation
    with pytest.raises(UnsupportedPlantOperation):
        compute_adjoint(r, plant, np.zeros((1, 1, 1)), YZERO)


# ------------------------------------------------------- terminal cost forms

def _pd_ingredients(n, alpha=1.0, c=21.0, P=None):
    P = np.eye(n) if P is None else P
    return TerminalIngredients(variant="positive_definite", period=1,
                               P=P[None], K=np.zeros((1, 1, n)), alpha=alpha, c=c)


def test_terminal_cost_zero_at_reference():
    plant = make_cstr_plant()
    xs = cstr_steady_state()
    r = PeriodicReference(xs[None, :], np.array([[CSTR_US]]), 0)
    for variant in ("tec", "positive_definite", "quadratic_economic", "sum_power"):
        ing = TerminalIngredients(variant=variant, period=1, P=np.eye(3)[None],
                                  K=np.zeros((1, 1, 3)), alpha=1e-6, c=21.0,
                                  sum_a=(1.0, 0.5), sum_cl=1.0, sum_rho=0.5)
        assert terminal_cost(xs, r, ing, plant, [0.0]) == pytest.approx(0.0, abs=1e-12)


def test_positive_definite_hand_evaluation():
    plant = make_cstr_plant()
    xs = cstr_steady_state()
    rng = np.random.default_rng(1)
    M = rng.normal(size=(3, 3))
    P = M @ M.T + np.eye(3)
    ing = _pd_ingredients(3, c=21.0, P=P)
    r = PeriodicReference(xs[None, :], np.array([[CSTR_US]]), 0)
    for _ in range(10):
        dx = 1e-3 * rng.normal(size=3)
        v = terminal_cost(xs + dx, r, ing, plant, [0.5])
        q = dx @ P @ dx
        assert v == pytest.approx(q + 21.0 * np.sqrt(q), rel=1e-12)


def test_quadratic_economic_reduces_to_quadratic_when_gradient_zero():
    plant = make_linear_plant([np.array([[0.5]])], [np.array([[1.0]])], [np.zeros(1)])
    r = PeriodicReference(np.zeros((1, 1)), np.zeros((1, 1)), 0)
    ing = TerminalIngredients(variant="quadratic_economic", period=1,
                              P=np.array([[[2.0]]]), K=np.zeros((1, 1, 1)), alpha=1.0)
    assert terminal_cost(np.array([0.3]), r, ing, plant, YZERO) == pytest.approx(2 * 0.09)


def test_modified_cost_graph_half_stage():
    g = make_graph_plant(eps=0.01)
    ing = TerminalIngredients(variant="tec", period=2)
    r = PeriodicReference(np.array([[1.0], [2.0]]), np.array([[2.0], [1.0]]), 0)
    v = modified_reference_cost(np.array([1.0]), r, ing, g, YZERO)
    assert v == pytest.approx(0.5 * 1.01, abs=1e-15)  # half of l(r(0)) = (1+eps)/2


def test_modified_cost_T1_equals_terminal_cost():
    plant = make_cstr_plant()
    xs = cstr_steady_state()
    r = PeriodicReference(xs[None, :], np.array([[CSTR_US]]), 0)
    ing = _pd_ingredients(3)
    x = xs + 1e-3
    assert modified_reference_cost(x, r, ing, plant, [0.3]) == pytest.approx(
        terminal_cost(x, r, ing, plant, [0.3]), abs=1e-15)


@pytest.mark.parametrize("scenario", ["cstr", "hvac"])
def test_telescoping_identity(scenario):
    if scenario == "cstr":
        plant = make_cstr_plant()
        y = np.array([0.7])
        T = 6
    else:
        plant = make_hvac_plant()
        y = hvac_price_signal(3).y_at(0)
        T = plant.T
    rng = np.random.default_rng(12)
    n, m = plant.n, plant.m
    ing = _pd_ingredients(n, alpha=1.0, c=5.0)
    for trial in range(100):
        zr = plant.Z_r(0)
        X = rng.uniform(zr.lo[:n], zr.hi[:n], size=(T, n))
        U = rng.uniform(zr.lo[n:], zr.hi[n:], size=(T, m))
        r = PeriodicReference(X, U, t0=int(rng.integers(0, 2 * plant.T)))
        x = rng.uniform(zr.lo[:n], zr.hi[:n])
        xp = rng.uniform(zr.lo[:n], zr.hi[:n])
        rp = shift(r)
        lhs = (modified_reference_cost(xp, rp, ing, plant, y)
               - modified_reference_cost(x, r, ing, plant, y)
               - (terminal_cost(xp, rp, ing, plant, y) - terminal_cost(x, r, ing, plant, y)))
        from pempc.plant import stage_cost
        rhs = cost_JT(r, plant, y) / T - stage_cost(plant, r.X[0], r.U[0], r.t0, y)
        assert lhs == pytest.approx(rhs, abs=1e-12)


# ------------------------------------------------------------- P synthesis

def test_hvac_design_matches_scalar_riccati():
    plant = make_hvac_plant()
    # any feasible orbit works as the sample; use a mid-band hold orbit
    from pempc.orbit import optimal_orbit_milp
    y = hvac_price_signal(0).y_at(0)
    r, _ = optimal_orbit_milp(plant, plant.T, y, t0=0)
    S = np.zeros((2, 2))
    eps_pair = (0.045, 0.01)
    grid = verification_grid(plant, n_state=20, n_input=2)
    P, K = design_quadratic_P(plant, [r], S, eps_pair, grid=grid, pfloor=0.0)
    assert np.allclose(K, 0.0)  # discrete chiller inputs force an open-loop k_f
    a = np.exp(-0.5)
    p_expected = 0.1 / (1.0 - a * a)
    assert P[0, 0, 0] == pytest.approx(p_expected, abs=1e-8)
    rep = verify_P(plant, P[0], K[0], S, grid, eps_pair)
    assert rep.passed and rep.monodromy_ok
    assert rep.worst_eig <= 1e-12


def test_time_invariant_T1_matches_dare():
    # stable scalar plant with quadratic-free cost: Lyapunov fixed point
    plant = make_linear_plant([np.array([[0.8]])], [np.array([[1.0]])], [np.zeros(1)])
    r = PeriodicReference(np.zeros((1, 1)), np.zeros((1, 1)), 0)
    S = np.diag([0.0, 1.0])
    eps_pair = (0.045, 0.01)
    grid = (np.zeros((1, 4)), np.linspace(-1, 1, 4)[None, :], 4)
    P, K = design_quadratic_P(plant, [r], S, eps_pair, grid=grid, pfloor=0.0)
    # oracle: scalar DARE with Q = (2e+et), R = 1
    q = 0.1
    a, b = 0.8, 1.0
    p = q
    for _ in range(10000):
        k = -(b * p * a) / (1 + b * p * b)
        pn = q + k * k + (a + b * k) ** 2 * p
        if abs(pn - p) < 1e-15:
            break
        p = pn
    assert P[0, 0, 0] == pytest.approx(p, abs=1e-8)


def test_verify_P_zero_P_fails_everywhere():
    plant = make_cstr_plant()
    grid = verification_grid(plant, n_state=6, n_input=2)
    S = np.diag([0.0, 0.0, 0.0, 1.0])
    rep = verify_P(plant, np.zeros((3, 3)), np.zeros((1, 3)), S, grid)
    assert not rep.passed
    assert rep.n_violations == rep.grid_points


def test_cstr_design_coarse_grid():
    plant = make_cstr_plant()
    xs = cstr_steady_state()
    steady = PeriodicReference(xs[None, :], np.array([[CSTR_US]]), 0)
    S = np.diag([0.0, 0.0, 0.0, 1.0])
    eps_pair = (0.045, 0.01)
    grid = verification_grid(plant, n_state=8, n_input=2)
    P, K = design_quadratic_P(plant, [steady], S, eps_pair, grid=grid)
    rep = verify_P(plant, P[0], K[0], S, grid, eps_pair)
    assert rep.passed and rep.monodromy_ok
    c, rho, a1 = design_c(plant, P, K, [steady], [np.array([0.0]), np.array([1.0])])
    assert 0.0 < c < 1000.0
    assert rho < 1.0
    ing = TerminalIngredients(variant="positive_definite", period=1, P=P, K=K,
                              alpha=1.2e-8, c=c)
    rep2 = verify_decrease(plant, ing, [steady], [np.array([0.0]), np.array([1.0])],
                           sample_count=200, seed=0)
    assert rep2.passed, f"worst slack {rep2.worst_slack}"
    # deliberately broken: drop the norm term; the -x2 gradient defeats it
    ing_bad = TerminalIngredients(variant="positive_definite", period=1, P=P, K=K,
                                  alpha=1.2e-8, c=0.0)
    rep3 = verify_decrease(plant, ing_bad, [steady], [np.array([0.0])],
                           sample_count=200, seed=0)
    assert not rep3.passed


def test_design_alpha_monotone_and_constraint_bound():
    plant = make_cstr_plant()
    xs = cstr_steady_state()
    steady = PeriodicReference(xs[None, :], np.array([[CSTR_US]]), 0)
    S = np.diag([0.0, 0.0, 0.0, 1.0])
    grid = verification_grid(plant, n_state=8, n_input=2)
    P, K = design_quadratic_P(plant, [steady], S, (0.045, 0.01), grid=grid)
    c, _, _ = design_c(plant, P, K, [steady], [np.array([0.0])])
    alpha_grid = np.geomspace(1.2e-9, 1.2e-7, 5)
    alpha, rep = design_alpha(plant, P, K, alpha_grid, [steady], [np.array([0.0])],
                              sample_count=100, c=c)
    assert alpha in alpha_grid
    # shrinking monotonicity: everything below the accepted alpha passes too
    for a in alpha_grid[alpha_grid < alpha]:
        a2, _ = design_alpha(plant, P, K, [a], [steady], [np.array([0.0])],
                             sample_count=100, c=c)
        assert a2 == a


def test_terminal_set_membership_margin():
    n = 3
    P = np.eye(n)
    ing = _pd_ingredients(n, alpha=1.2e-8, P=P)
    r = PeriodicReference(np.zeros((1, n)), np.zeros((1, 1)), 0)
    inside, margin = terminal_set_contains(np.zeros(n), r, ing)
    assert inside and margin == pytest.approx(1.2e-8)
    dx = np.full(n, np.sqrt(2e-8 / 3))  # ||dx||_P^2 = 2e-8 > alpha
    inside, margin = terminal_set_contains(dx, r, ing)
    assert not inside


def test_artifact_roundtrip():
    rng = np.random.default_rng(4)
    M = rng.normal(size=(3, 3))
    P = (M @ M.T + np.eye(3))[None]
    K = rng.normal(size=(1, 1, 3))
    ing = TerminalIngredients(variant="positive_definite", period=1, P=P, K=K,
                              alpha=1.2e-8, c=21.25, nu=3,
                              provenance={"grid": "16000", "worst_slack": "-1e-9"})
    text = ingredients_to_text(ing)
    back = ingredients_from_text(text)
    assert back.variant == ing.variant
    assert back.alpha == ing.alpha
    assert back.c == ing.c
    assert np.array_equal(back.P, ing.P)
    assert np.array_equal(back.K, ing.K)
    assert back.provenance["grid"] == "16000"
