"""Compatible deterministic policy gradient with batch LSTD critics.

The critic uses the MPC's own sensitivities as features: the advantage is
``A^w = Psi^T w`` with ``Psi_k = grad_theta pi (u_k - pi(x_k))`` and the state
value is ``V^nu = V_theta + grad_theta V_theta^T nu``. Both weight vectors are
fitted per episode in closed form.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import mpmath
import numpy as np

from . import kkt_sensitivity as ks
from . import nlp_mpc
from .nlp_mpc import MpcController, MpcProblem, SolverError

logger = logging.getLogger(__name__)

LAMBDA_REG = 1e-8
EXPLORATION_FRACTION = 0.02
SOLVE_DIGITS = 40


class SingularSystemError(np.linalg.LinAlgError):
    """The LSTD normal matrix carries no information beyond the regularization."""

    def __init__(self, name: str, rank: int, dim: int):
        super().__init__(f"{name} has effective rank {rank} of {dim}; "
                         "the episode carried no excitation for this critic")
        self.rank = rank
        self.dim = dim


@dataclass
class EpisodeLog:
    """Per-step record of one closed-loop episode.

    Arrays are stacked along the first axis, one row per step ``k``. The
    ``terminal_*`` fields describe the state reached after the last step,
    where the policy is evaluated once more for the closed-loop cost.
    """

    x: np.ndarray            # (T, nx)
    u: np.ndarray            # (T, nu) executed, with exploration
    pi: np.ndarray           # (T, nu) noiseless policy
    cost: np.ndarray         # (T,) L(x_k, u_k)
    cost_pi: np.ndarray      # (T,) L(x_k, pi(x_k))
    x_next: np.ndarray       # (T, nx)
    v: np.ndarray            # (T,) V_theta(x_k)
    v_next: np.ndarray       # (T,) V_theta(x_{k+1})
    grad_v: np.ndarray       # (T, ntheta)
    dpi: np.ndarray          # (T, ntheta, nu)
    terminal_pi: np.ndarray = field(default_factory=lambda: np.zeros(0))
    terminal_cost_pi: float = np.nan
    fallback: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    condition: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.fallback.size == 0:
            self.fallback = np.zeros(len(self), dtype=bool)
        if self.condition.size == 0:
            self.condition = np.full(len(self), np.nan)

    def __len__(self) -> int:
        return int(self.x.shape[0])

    @property
    def ntheta(self) -> int:
        return int(self.grad_v.shape[1])

    @property
    def psi(self) -> np.ndarray:
        """Compatible features ``Psi_k``; exactly zero where ``u_k == pi(x_k)``."""
        return np.einsum("kij,kj->ki", self.dpi, self.u - self.pi)

    @property
    def value_trace(self) -> np.ndarray:
        """``V_theta`` along the closed loop, ``T + 1`` entries."""
        return np.r_[self.v, self.v_next[-1:]]

    @property
    def cost_pi_trace(self) -> np.ndarray:
        """``L(x_k, pi(x_k))`` for ``k = 0..T`` (the last from the terminal state)."""
        return np.r_[self.cost_pi, self.terminal_cost_pi]

    # -- serialization ---------------------------------------------------

    def _header(self) -> list[str]:
        nx, nu, nt = self.x.shape[1], self.u.shape[1], self.ntheta
        return (["k"] + [f"x{j}" for j in range(nx)] + [f"u{j}" for j in range(nu)]
                + ["L", "V", "Vnext"] + [f"gradV{j}" for j in range(nt)] + [f"psi{j}" for j in range(nt)]
                + [f"pi{j}" for j in range(nu)] + ["L_pi"] + [f"xnext{j}" for j in range(nx)]
                + [f"dpi{i}_{j}" for i in range(nt) for j in range(nu)] + ["fallback", "cond"])

    def to_csv(self, path) -> None:
        """Write one row per step followed by a terminal row (``k = T``).

        The terminal row carries the final state, the policy there and its
        stage cost; the remaining columns are empty.
        """
        psi = self.psi
        header = self._header()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(len(self)):
                row = ([k] + list(self.x[k]) + list(self.u[k]) + [self.cost[k], self.v[k], self.v_next[k]]
                       + list(self.grad_v[k]) + list(psi[k]) + list(self.pi[k]) + [self.cost_pi[k]]
                       + list(self.x_next[k]) + list(self.dpi[k].ravel())
                       + [int(self.fallback[k]), self.condition[k]])
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
            nx, nu = self.x.shape[1], self.u.shape[1]
            term = [""] * len(header)
            term[0] = len(self)
            term[1:1 + nx] = [repr(float(v)) for v in self.x_next[-1]]
            i_pi = header.index("pi0")
            term[i_pi:i_pi + nu] = [repr(float(v)) for v in self.terminal_pi]
            term[header.index("L_pi")] = repr(float(self.terminal_cost_pi))
            w.writerow(term)

    @classmethod
    def from_csv(cls, path) -> "EpisodeLog":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        col = {name: i for i, name in enumerate(header)}
        nx = sum(1 for h in header if h.startswith("x") and h[1:].isdigit())
        nu = sum(1 for h in header if h.startswith("u") and h[1:].isdigit())
        nt = sum(1 for h in header if h.startswith("gradV"))
        steps, term = body[:-1], body[-1]
        data = np.array([[float(v) for v in r] for r in steps]) if steps else np.zeros((0, len(header)))

        def block(prefix, n):
            i = col[f"{prefix}0"]
            return data[:, i:i + n]

        dpi = data[:, col["dpi0_0"]:col["dpi0_0"] + nt * nu].reshape(-1, nt, nu)
        i_pi = col["pi0"]
        return cls(
            x=block("x", nx), u=block("u", nu), pi=block("pi", nu), cost=data[:, col["L"]],
            cost_pi=data[:, col["L_pi"]], x_next=block("xnext", nx), v=data[:, col["V"]],
            v_next=data[:, col["Vnext"]], grad_v=block("gradV", nt), dpi=dpi,
            terminal_pi=np.array([float(v) for v in term[i_pi:i_pi + nu]]),
            terminal_cost_pi=float(term[col["L_pi"]]),
            fallback=data[:, col["fallback"]].astype(bool), condition=data[:, col["cond"]])


@dataclass
class CriticParams:
    """Fitted critic weights; the residuals belong to the multiprecision solutions."""

    w: np.ndarray
    nu: np.ndarray
    lambda_reg: float = LAMBDA_REG
    residual_w: float = np.nan
    residual_nu: float = np.nan


def value_approx(nu, v_theta, grad_v_theta):
    """``V^nu(x) = V_theta(x) + grad_theta V_theta(x)^T nu`` (vectorized over rows)."""
    return np.asarray(v_theta) + np.asarray(grad_v_theta) @ np.asarray(nu)


def advantage(w, psi):
    return np.asarray(psi) @ np.asarray(w)


def _effective_rank(xi: np.ndarray, lambda_reg: float) -> int:
    # directions whose curvature does not exceed the Tikhonov term carry no data
    s = np.linalg.eigvalsh(xi)
    return int(np.sum(s > lambda_reg))


def _regularized_solve(xi, b, lambda_reg, name):
    """Solve ``(xi + lambda I) sol = b`` in multiprecision.

    The normal matrices reach condition numbers near ``1e17`` with entries
    around ``1e9``, so no float64 vector has a residual anywhere near the
    critic's tolerance. The system, with its float64 entries taken exactly,
    is solved with ``SOLVE_DIGITS`` significant digits. Returns the solution
    rounded to float64 and the residual of the multiprecision solution.
    """
    rank = _effective_rank(xi, lambda_reg)
    if rank == 0:
        raise SingularSystemError(name, rank, xi.shape[0])
    A = xi + lambda_reg * np.eye(xi.shape[0])
    with mpmath.workdps(SOLVE_DIGITS):
        A_mp = mpmath.matrix(A.tolist())
        b_mp = mpmath.matrix([float(v) for v in b])
        sol = mpmath.lu_solve(A_mp, b_mp)
        res = max(abs(v) for v in A_mp * sol - b_mp)
        return np.array([float(v) for v in sol]), float(res)


def normal_residual(A, sol, b) -> float:
    """``||A sol - b||_inf`` accumulated in extended precision."""
    r = A.astype(np.longdouble) @ np.asarray(sol, dtype=np.longdouble) - np.asarray(b, dtype=np.longdouble)
    return float(np.max(np.abs(r)))


def lstdv_system(log: EpisodeLog, gamma: float):
    G = log.grad_v
    td = log.cost + gamma * log.v_next - log.v
    return G.T @ G, G.T @ td


def lstdq_system(log: EpisodeLog, nu, gamma: float):
    psi = log.psi
    delta = log.cost + gamma * log.v_next - value_approx(nu, log.v, log.grad_v)
    return psi.T @ psi, psi.T @ delta


def lstdv_update(log: EpisodeLog, gamma: float, lambda_reg: float = LAMBDA_REG) -> np.ndarray:
    """Value-correction weights from the regularized LSTD normal equations.

    Raises:
        SingularSystemError: if no eigenvalue of the normal matrix exceeds ``lambda_reg``.
    """
    xi, b = lstdv_system(log, gamma)
    return _regularized_solve(xi, b, lambda_reg, "Xi_nu")[0]


def lstdq_update(log: EpisodeLog, nu, gamma: float, lambda_reg: float = LAMBDA_REG) -> np.ndarray:
    """Advantage weights; the TD error uses ``V_theta`` at the successor and ``V^nu`` at the state.

    Raises:
        SingularSystemError: on an on-policy log (all features zero).
    """
    xi, b = lstdq_system(log, nu, gamma)
    return _regularized_solve(xi, b, lambda_reg, "Xi_w")[0]


def fit_critic(log: EpisodeLog, gamma: float, lambda_reg: float = LAMBDA_REG) -> CriticParams:
    nu, res_nu = _regularized_solve(*lstdv_system(log, gamma), lambda_reg, "Xi_nu")
    w, res_w = _regularized_solve(*lstdq_system(log, nu, gamma), lambda_reg, "Xi_w")
    return CriticParams(w, nu, lambda_reg, res_w, res_nu)


def policy_gradient(log: EpisodeLog, w):
    """Average of ``g_k = grad pi grad pi^T w`` and the per-step norms ``||g_k||``."""
    w = np.asarray(w, dtype=float)
    proj = np.einsum("kij,i->kj", log.dpi, w)
    g = np.einsum("kij,kj->ki", log.dpi, proj)
    return g.mean(axis=0), np.linalg.norm(g, axis=1)


def gradient_descent_step(theta, gradient, alpha: float, nx: int = 3, nu: int = 2) -> np.ndarray:
    if not alpha >= 0:
        raise ValueError("learning rate must be nonnegative")
    th = np.asarray(theta, dtype=float)
    return nlp_mpc.clamp_theta(th - alpha * np.asarray(gradient, dtype=float), nx=nx, nu=nu)


def exploration_scale(control_lb, control_ub, fraction: float = EXPLORATION_FRACTION) -> np.ndarray:
    return fraction * (np.asarray(control_ub, float) - np.asarray(control_lb, float))


def explore(pi, rng: np.random.Generator, sigma, control_lb, control_ub) -> np.ndarray:
    """Gaussian perturbation of the policy, clipped to the control box."""
    u = np.asarray(pi, float) + np.asarray(sigma, float) * rng.standard_normal(np.size(pi))
    return np.clip(u, control_lb, control_ub)


class RolloutError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


def rollout(problem: MpcProblem, theta, x0, plant_step: Callable, stage_cost: Callable, steps: int,
            rng: Optional[np.random.Generator] = None, sigma=None) -> EpisodeLog:
    """Run the MPC in closed loop on ``plant_step`` and record critic features.

    ``sigma`` is the per-input standard deviation of the exploration noise;
    ``None`` or zero gives the noiseless policy.

    Raises:
        RolloutError: when an MPC solve or a sensitivity computation breaks down.
    """
    ctrl = MpcController(problem, theta)
    th = ctrl.theta
    nt, nxu = problem.ntheta, (problem.nx, problem.nu)
    sigma = np.zeros(problem.nu) if sigma is None else np.broadcast_to(np.asarray(sigma, float), (problem.nu,))
    if rng is None:
        rng = np.random.default_rng(0)

    X, U, PI, Lc, Lpi, XN, V, GV, DPI, FB, CND = ([] for _ in range(11))
    x = np.asarray(x0, dtype=float)
    sol = _solve_step(ctrl, x, 0)
    for k in range(steps):
        try:
            sens = ks.policy_sensitivity(sol, problem, th)
            grad_v = ks.lagrangian_grad_theta(sol, problem, th)
        except (ks.SensitivityError, ks.StaleSolutionError) as exc:
            raise RolloutError(k, str(exc)) from exc
        pi = sol.u0
        u = explore(pi, rng, sigma, problem.control_lb, problem.control_ub) if np.any(sigma > 0) else pi.copy()
        x_next = np.asarray(plant_step(x, u), dtype=float)
        if not np.all(np.isfinite(x_next)):
            raise RolloutError(k, "plant state became non-finite")
        X.append(x); U.append(u); PI.append(pi); XN.append(x_next)
        Lc.append(stage_cost(x, u)); Lpi.append(stage_cost(x, pi))
        V.append(sol.value); GV.append(grad_v); DPI.append(sens.matrix)
        FB.append(sens.fallback); CND.append(sens.condition)
        sol = _solve_step(ctrl, x_next, k + 1)
        x = x_next

    v = np.array(V)
    v_next = np.r_[v[1:], sol.value] if steps else np.zeros(0)
    return EpisodeLog(
        x=np.array(X).reshape(-1, nxu[0]), u=np.array(U).reshape(-1, nxu[1]), pi=np.array(PI).reshape(-1, nxu[1]),
        cost=np.array(Lc), cost_pi=np.array(Lpi), x_next=np.array(XN).reshape(-1, nxu[0]), v=v, v_next=v_next,
        grad_v=np.array(GV).reshape(-1, nt), dpi=np.array(DPI).reshape(-1, nt, nxu[1]),
        terminal_pi=sol.u0, terminal_cost_pi=float(stage_cost(x, sol.u0)),
        fallback=np.array(FB, dtype=bool), condition=np.array(CND, dtype=float))


def _solve_step(ctrl: MpcController, x, k: int):
    try:
        sol = ctrl.solve(x)
    except Exception as exc:  # casadi raises plain RuntimeError on evaluation failures
        raise RolloutError(k, f"MPC solve raised {exc!r}") from exc
    if sol.status is not nlp_mpc.SolveStatus.CONVERGED:
        raise RolloutError(k, f"MPC solve ended with status {sol.status.value} "
                              f"(KKT error {sol.kkt_error:.3g})")
    return sol


__all__ = [
    "LAMBDA_REG", "SingularSystemError", "EpisodeLog", "CriticParams", "value_approx", "advantage",
    "lstdv_update", "lstdq_update", "fit_critic", "policy_gradient", "gradient_descent_step",
    "exploration_scale", "explore", "rollout", "RolloutError", "normal_residual", "SolverError",
]
