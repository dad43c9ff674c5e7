"""Benchmark scenarios: three-node graph counterexample, building-cooling
(HVAC) with discrete chiller stages, and the continuous stirred-tank reactor.

Constants that the source problems leave open (HVAC thermal parameters,
comfort bands, synthetic price curves) are fixed here; see the design notes
in each builder.
"""

import numpy as np

from .plant import (BoxSet, EdgeSet, FiniteTransitions, ParameterSignal,
                    PlantModel)

# --------------------------------------------------------------------- graph

GRAPH_EPS_DEFAULT = 0.01


def make_graph_plant(eps=GRAPH_EPS_DEFAULT):
    """Finite three-state system with f(x,u)=u and the admissible edges
    0->0 (cost 1), 0->1 (0), 1->2 (1+eps), 2->1 (-1); optimal 2-orbit (1,2)."""
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    table = {
        (0, 0): (0, 1.0),
        (0, 1): (1, 0.0),
        (1, 2): (2, 1.0 + eps),
        (2, 1): (1, -1.0),
    }
    trans = FiniteTransitions(states=(0, 1, 2), table=table)
    edges = EdgeSet(pairs=frozenset(table.keys()))

    def f(x, u, t):
        return np.asarray(u, dtype=float)

    def cost(x, u, t, y):
        if np.ndim(x) > 1:
            raise ValueError("finite plant cost is not batched")
        key = (round(float(np.atleast_1d(x)[0])), round(float(np.atleast_1d(u)[0])))
        if key not in table:
            raise ValueError(f"inadmissible edge {key}")
        return table[key][1]

    return PlantModel(
        name="graph", n=1, m=1, T=2, f=f, cost=cost,
        Z_phases=(edges, edges), Zr_phases=(edges, edges),
        Y_lo=np.zeros(0), Y_hi=np.zeros(0),
        smooth=False, transitions=trans)


# ---------------------------------------------------------------------- CSTR

CSTR_H = 0.05
CSTR_US = 0.1491
CSTR_ZR = BoxSet(lo=np.array([0.05, 0.05, 0.05, 0.059]),
                 hi=np.array([0.4, 0.2, 0.2, 0.439]))
CSTR_Z = BoxSet(lo=np.array([0.03, 0.03, 0.03, 0.049]),
                hi=np.array([1.0, 1.0, 1.0, 0.449]))


def cstr_ode(x, u):
    x1, x2, x3 = x
    e1 = np.exp(-1.0 / x3)
    e2 = np.exp(-0.55 / x3)
    r1 = 1e4 * x1 ** 2 * e1
    r2 = 400.0 * x1 * e2
    return np.stack([1.0 - x1 - r1 - r2, r1 - x2, np.broadcast_to(u[0] - x3, x3.shape)])


def cstr_rk4(x, u):
    h = CSTR_H
    k1 = cstr_ode(x, u)
    k2 = cstr_ode(x + 0.5 * h * k1, u)
    k3 = cstr_ode(x + 0.5 * h * k2, u)
    k4 = cstr_ode(x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def cstr_steady_state(u=CSTR_US):
    """Equilibrium of the continuous dynamics at fixed input (Newton)."""
    x = np.array([0.08, 0.08, u])
    for _ in range(60):
        F = cstr_ode(x, np.array([u]))
        J = np.zeros((3, 3))
        for i in range(3):
            d = np.zeros(3)
            d[i] = 1e-8
            J[:, i] = (cstr_ode(x + d, np.array([u])) - cstr_ode(x - d, np.array([u]))) / 2e-8
        step = np.linalg.solve(J, F)
        x = x - step
        if np.max(np.abs(step)) < 1e-14:
            break
    return x


def make_cstr_plant():
    """Three-state reactor, RK4-discretized at h=0.05, cost -x2 + y (u-u_s)^2."""

    def f(x, u, t):
        return cstr_rk4(np.asarray(x, dtype=float), np.atleast_1d(np.asarray(u, dtype=float)))

    def cost(x, u, t, y):
        x = np.asarray(x, dtype=float)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        val = -x[1] + y[0] * (u[0] - CSTR_US) ** 2
        return val

    def cost_derivs(x, u, t, y):
        g = np.array([0.0, -1.0, 0.0, 2.0 * y[0] * (u[0] - CSTR_US)])
        H = np.zeros((4, 4))
        H[3, 3] = 2.0 * y[0]
        return g, H

    return PlantModel(
        name="cstr", n=3, m=1, T=1, f=f, cost=cost,
        Z_phases=(CSTR_Z,), Zr_phases=(CSTR_ZR,),
        Y_lo=np.zeros(1), Y_hi=np.ones(1),
        smooth=True, cost_derivs=cost_derivs)


def cstr_switching_signal(horizon=2000):
    """Documented stand-in for the published switching-parameter experiment:
    y=0 (dynamic operation) with unit-weight episodes on [185,246) and
    [400,470)."""
    times = [0, 185, 246, 400, 470]
    vals = [[0.0], [1.0], [0.0], [1.0], [0.0]]
    keep = [i for i, t in enumerate(times) if t < horizon]
    return ParameterSignal(change_times=tuple(times[i] for i in keep),
                           values=np.array([vals[i] for i in keep]))


# ---------------------------------------------------------------------- HVAC

HVAC_T = 24
HVAC_K = 0.5          # heat-loss coefficient, thermal mass 1, hourly steps
HVAC_A = float(np.exp(-HVAC_K))
HVAC_B = -(1.0 - HVAC_A) / HVAC_K
HVAC_SEGMENTS = [(0.0, 0.0), (0.75, 1.0), (1.5, 2.0)]  # {0} u [.75,1] u [1.5,2]


def hvac_ambient(t):
    """Periodic disturbance e(t) from sinusoidal ambient temperature/heat."""
    tau = np.asarray(t) % HVAC_T
    t_amb = 1.0 * (1.0 + np.cos(2 * np.pi * (tau - 14) / 24.0))
    q_amb = 0.3 * (1.0 + np.cos(2 * np.pi * (tau - 13) / 24.0))
    return (1.0 - HVAC_A) * (t_amb + q_amb / HVAC_K)


def hvac_comfort(t):
    tau = int(t) % HVAC_T
    half = 0.25 if 8 <= tau <= 19 else 0.5
    return -half, half


def hvac_price_base():
    t = np.arange(HVAC_T, dtype=float)
    return (0.2 + 0.8 * np.exp(-((t - 9.0) / 2.5) ** 2)
            + 0.7 * np.exp(-((t - 19.0) / 2.5) ** 2))


def hvac_price_signal(seed, days=7):
    """Per-day multiplicative perturbation in [0.8, 1.2] of the base curve."""
    rng = np.random.default_rng(seed)
    base = hvac_price_base()
    times, vals = [], []
    for d in range(days):
        times.append(24 * d)
        vals.append(base * rng.uniform(0.8, 1.2))
    return ParameterSignal(change_times=tuple(times), values=np.array(vals))


def make_hvac_plant():
    """Scalar cooling plant x+ = A x + B q + e(t) with three chiller stages."""
    zs, zrs = [], []
    for t in range(HVAC_T):
        lo, hi = hvac_comfort(t)
        zs.append(BoxSet(lo=np.array([lo, 0.0]), hi=np.array([hi, 2.0]),
                         segments={1: HVAC_SEGMENTS}))
        d = 1e-3
        zrs.append(BoxSet(lo=np.array([lo + d, 0.0]), hi=np.array([hi - d, 2.0]),
                          segments={1: HVAC_SEGMENTS}))

    def f(x, u, t):
        x = np.asarray(x, dtype=float)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return HVAC_A * x + HVAC_B * u + hvac_ambient(int(t))

    def cost(x, u, t, y):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return y[int(t) % HVAC_T] * u[0]

    def f_jac(x, u, t):
        return np.array([[HVAC_A]]), np.array([[HVAC_B]])

    def cost_derivs(x, u, t, y):
        return np.array([0.0, y[int(t) % HVAC_T]]), np.zeros((2, 2))

    return PlantModel(
        name="hvac", n=1, m=1, T=HVAC_T, f=f, cost=cost,
        Z_phases=tuple(zs), Zr_phases=tuple(zrs),
        Y_lo=np.zeros(HVAC_T), Y_hi=np.full(HVAC_T, 3.0),
        smooth=True, f_jac=f_jac, cost_derivs=cost_derivs,
        integer_input_mask=np.array([True]))
