"""Oracles and instance generators shared by the module and acceptance tests."""

import numpy as np

from mpcmobo import kkt_sensitivity as ks
from mpcmobo import nlp_mpc
from mpcmobo.nlp_mpc import MpcProblem, SolveStatus


def _active_set(problem, sol):
    H = nlp_mpc.build_nlp(problem, sol.theta, sol.x_k).inequalities(sol.z)
    return sol.mu > -H


def central_differences(problem, theta, x, base, step=1e-5):
    """Central differences of the policy and the value, plus whether every step kept the active set."""
    th = np.asarray(theta, float)
    act = _active_set(problem, base)
    dpi = np.zeros((th.size, problem.nu))
    dv = np.zeros(th.size)
    same = True
    for j in range(th.size):
        h = step * max(1.0, abs(th[j]))
        tp, tm = th.copy(), th.copy()
        tp[j] += h
        tm[j] -= h
        sp = nlp_mpc.solve(problem, tp, x, base)
        sm = nlp_mpc.solve(problem, tm, x, base)
        assert sp.status is sm.status is SolveStatus.CONVERGED
        same &= np.array_equal(_active_set(problem, sp), act) and np.array_equal(_active_set(problem, sm), act)
        dpi[j] = (sp.u0 - sm.u0) / (2 * h)
        dv[j] = (sp.value - sm.value) / (2 * h)
    return dpi, dv, same


def sensitivity_instances(problem, n, seed=0, max_tries=400):
    """Random strictly complementary CSTR instances with their finite differences.

    Returns ``(instances, excluded)``. Each instance is ``(theta, x_k,
    solution, fd_policy, fd_value)``; ``excluded`` counts draws dropped
    because a finite-difference step changed the active set. About one in
    three starts outside the volume bound so a slack constraint is strictly
    active.
    """
    rng = np.random.default_rng(seed)
    base = nlp_mpc.ThetaVector.initial().to_array()
    out, excluded = [], 0
    for t in range(max_tries):
        th = base.copy()
        th[1:9] *= rng.uniform(0.5, 2.0, size=8)
        th[0] = rng.uniform(-10, 10)
        th[9:] = rng.uniform(-20, 20, size=5)
        x = np.array([rng.uniform(102, 108), rng.uniform(0.10, 0.14), rng.uniform(428, 438)])
        if t % 3 == 0:
            x[0] = rng.uniform(110.5, 112.0)
        sol = nlp_mpc.solve(problem, th, x)
        if sol.status is not SolveStatus.CONVERGED:
            continue
        if ks.kkt_system(problem, sol, th).degenerate:
            continue
        dpi, dv, same = central_differences(problem, th, x, sol)
        if not same:
            excluded += 1
            continue
        out.append((th, x, sol, dpi, dv))
        if len(out) == n:
            return out, excluded
    raise RuntimeError(f"only {len(out)} strictly complementary instances in {max_tries} tries")


def normwise_error(a, b):
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))


# -- a linear-quadratic harness with a closed-form solution --------------

A_LIN = np.array([[0.0, 1.0], [-2.0, -0.5]])
B_LIN = np.array([[0.0], [1.0]])
Q_LIN, R_LIN, T_LIN = np.array([2.0, 1.0]), np.array([0.5]), np.array([3.0, 2.0])
DT_LIN = 0.1


def linear_problem(gamma=1.0, N=10):
    big = 1e3
    return MpcProblem(N=N, gamma=gamma, slack_weight=np.full(2, 1e5), terminal_slack_weight=np.full(2, 1e5),
                      x_ref=np.zeros(2), u_ref=np.zeros(1), state_lb=np.full(2, -big), state_ub=np.full(2, big),
                      control_lb=np.full(1, -big), control_ub=np.full(1, big), dt=DT_LIN,
                      model=nlp_mpc.linear_model(A_LIN, B_LIN))


def linear_theta(theta_c=0.0, g=None):
    return np.r_[theta_c, Q_LIN, R_LIN, T_LIN, np.zeros(3) if g is None else g]


def rk4_matrices(A, B, h):
    # classical RK4 applied to x' = Ax + Bu with held u is exactly these polynomials
    I = np.eye(A.shape[0])
    Ad = I + h * A + h**2 * A @ A / 2 + h**3 * A @ A @ A / 6 + h**4 * A @ A @ A @ A / 24
    Bd = (h * I + h**2 * A / 2 + h**3 * A @ A / 6 + h**4 * A @ A @ A / 24) @ B
    return Ad, Bd


def riccati(N):
    Ad, Bd = rk4_matrices(A_LIN, B_LIN, DT_LIN)
    Q, R = np.diag(Q_LIN), np.diag(R_LIN)
    P = np.diag(T_LIN)
    for _ in range(N):
        K = np.linalg.solve(R + Bd.T @ P @ Bd, Bd.T @ P @ Ad)
        P = Q + Ad.T @ P @ (Ad - Bd @ K)
    return P, K
