"""Parameterized MPC as a slack-relaxed multiple-shooting NLP.

The decision vector is laid out as ``z = [x_0..x_N, u_0..u_{N-1}, eta_0..eta_N]``
(row-major per stage). Inequalities are collected in the ``H(z) <= 0``
convention, in this order:

* control lower bounds ``u_lb - u_i`` for every stage,
* control upper bounds ``u_i - u_ub``,
* soft state lower bounds ``x_lb - x_i - eta_i`` for ``i = 0..N``,
* soft state upper bounds ``x_i - x_ub - eta_i``,
* slack nonnegativity ``-eta_i``.

The Lagrangian is ``Phi + lam^T G + mu^T H`` with ``mu >= 0``.
Problems are solved by IPOPT and then polished with Newton steps on the
identified active set, which gives exact complementarity and KKT residuals
near machine precision.
"""

from __future__ import annotations

import csv
import enum
import logging
import weakref
from dataclasses import dataclass, field
from typing import Callable, Optional

import casadi as ca
import numpy as np

from . import ode_sim

logger = logging.getLogger(__name__)

PD_FLOOR = 1e-6
KKT_TOL = 1e-8


class SolverError(RuntimeError):
    """The MPC could not be solved to a usable accuracy."""


# ----------------------------------------------------------------------
# parameters
# ----------------------------------------------------------------------


@dataclass
class ThetaVector:
    """MPC cost parameters: offset, diagonal weights and linear weights."""

    theta_c: float
    q_diag: np.ndarray
    r_diag: np.ndarray
    t_diag: np.ndarray
    g_lin: np.ndarray

    def __post_init__(self):
        self.theta_c = float(self.theta_c)
        self.q_diag = np.asarray(self.q_diag, dtype=float).copy()
        self.r_diag = np.asarray(self.r_diag, dtype=float).copy()
        self.t_diag = np.asarray(self.t_diag, dtype=float).copy()
        self.g_lin = np.asarray(self.g_lin, dtype=float).copy()
        nx, nu = self.q_diag.size, self.r_diag.size
        if self.t_diag.size != nx or self.g_lin.size != nx + nu:
            raise ValueError("inconsistent theta block sizes")
        if not np.all(np.isfinite(self.to_array())):
            raise ValueError("theta must be finite")

    @property
    def nx(self) -> int:
        return self.q_diag.size

    @property
    def nu(self) -> int:
        return self.r_diag.size

    @property
    def dim(self) -> int:
        return theta_dim(self.nx, self.nu)

    def to_array(self) -> np.ndarray:
        return np.r_[self.theta_c, self.q_diag, self.r_diag, self.t_diag, self.g_lin]

    @classmethod
    def from_array(cls, arr, nx: int = 3, nu: int = 2) -> "ThetaVector":
        a = np.asarray(arr, dtype=float).ravel()
        if a.size != theta_dim(nx, nu):
            raise ValueError(f"theta has {a.size} entries, expected {theta_dim(nx, nu)}")
        s = theta_slices(nx, nu)
        return cls(a[0], a[s["q"]], a[s["r"]], a[s["t"]], a[s["g"]])

    def clamped(self, floor: float = PD_FLOOR) -> "ThetaVector":
        return ThetaVector(self.theta_c, np.maximum(self.q_diag, floor), np.maximum(self.r_diag, floor),
                           np.maximum(self.t_diag, floor), self.g_lin)

    @classmethod
    def initial(cls) -> "ThetaVector":
        """RL-cost weights for Q and R, ``T = Q``, no offset and no linear term."""
        q = ode_sim.STAGE_STATE_WEIGHTS
        return cls(0.0, q, ode_sim.STAGE_CONTROL_WEIGHTS, q, np.zeros(5))


def theta_dim(nx: int = 3, nu: int = 2) -> int:
    return 1 + nx + nu + nx + nx + nu


def theta_slices(nx: int = 3, nu: int = 2) -> dict:
    i = 1
    out = {"c": slice(0, 1)}
    for key, n in (("q", nx), ("r", nu), ("t", nx), ("g", nx + nu)):
        out[key] = slice(i, i + n)
        i += n
    return out


def theta_names(nx: int = 3, nu: int = 2) -> list[str]:
    return (["theta_c"] + [f"q{j}" for j in range(nx)] + [f"r{j}" for j in range(nu)]
            + [f"t{j}" for j in range(nx)] + [f"g{j}" for j in range(nx + nu)])


def weight_mask(nx: int = 3, nu: int = 2) -> np.ndarray:
    """Boolean mask of the theta entries that must stay positive."""
    s = theta_slices(nx, nu)
    m = np.zeros(theta_dim(nx, nu), dtype=bool)
    for key in ("q", "r", "t"):
        m[s[key]] = True
    return m


def clamp_theta(theta: np.ndarray, floor: float = PD_FLOOR, nx: int = 3, nu: int = 2) -> np.ndarray:
    out = np.array(theta, dtype=float, copy=True)
    m = weight_mask(nx, nu)
    out[m] = np.maximum(out[m], floor)
    return out


def _as_theta_array(theta, nx: int, nu: int) -> np.ndarray:
    arr = theta.to_array() if isinstance(theta, ThetaVector) else np.asarray(theta, dtype=float).ravel()
    if arr.size != theta_dim(nx, nu):
        raise ValueError(f"theta has {arr.size} entries, expected {theta_dim(nx, nu)}")
    if np.any(arr[weight_mask(nx, nu)] < PD_FLOOR * (1 - 1e-12)):
        raise ValueError("diagonal weights must be >= 1e-6")
    return arr


# ----------------------------------------------------------------------
# problem
# ----------------------------------------------------------------------


def cstr_model(variant: ode_sim.ModelVariant = ode_sim.MISSPECIFIED,
               params: ode_sim.CstrParams = ode_sim.DEFAULT_PARAMS) -> Callable:
    def f(x, u):
        return ca.vertcat(*ode_sim.cstr_rhs(x, u, params, variant, exp=ca.exp))
    return f


def linear_model(A, B) -> Callable:
    """Continuous-time ``x' = A x + B u`` usable as a substitute MPC model."""
    A_dm, B_dm = ca.DM(np.asarray(A, float)), ca.DM(np.asarray(B, float))

    def f(x, u):
        return ca.mtimes(A_dm, x) + ca.mtimes(B_dm, u)
    return f


@dataclass(eq=False)
class MpcProblem:
    """Everything about the MPC except the cost parameters and the initial state.

    ``model`` is a continuous-time vector field ``f(x, u)`` built from casadi
    expressions; by default it is the misspecified CSTR.
    """

    N: int = 10
    gamma: float = 0.99
    slack_weight: np.ndarray = field(default_factory=lambda: np.full(3, 1e5))
    terminal_slack_weight: np.ndarray = field(default_factory=lambda: np.full(3, 1e5))
    x_ref: np.ndarray = field(default_factory=lambda: ode_sim.X_REF.copy())
    u_ref: np.ndarray = field(default_factory=lambda: ode_sim.U_REF.copy())
    state_lb: np.ndarray = field(default_factory=lambda: ode_sim.STATE_LB.copy())
    state_ub: np.ndarray = field(default_factory=lambda: ode_sim.STATE_UB.copy())
    control_lb: np.ndarray = field(default_factory=lambda: ode_sim.CONTROL_LB.copy())
    control_ub: np.ndarray = field(default_factory=lambda: ode_sim.CONTROL_UB.copy())
    variant: ode_sim.ModelVariant = ode_sim.MISSPECIFIED
    dt: float = ode_sim.DT
    model: Optional[Callable] = None
    kkt_tol: float = KKT_TOL
    max_iter: int = 200

    def __post_init__(self):
        for name in ("slack_weight", "terminal_slack_weight", "x_ref", "u_ref",
                     "state_lb", "state_ub", "control_lb", "control_ub"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).copy())
        if self.N < 1:
            raise ValueError("horizon N must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if np.any(self.state_lb >= self.state_ub) or np.any(self.control_lb >= self.control_ub):
            raise ValueError("lower bounds must be below upper bounds")
        if self.model is None:
            self.model = cstr_model(self.variant)

    @property
    def nx(self) -> int:
        return self.x_ref.size

    @property
    def nu(self) -> int:
        return self.u_ref.size

    @property
    def ntheta(self) -> int:
        return theta_dim(self.nx, self.nu)


# ----------------------------------------------------------------------
# NLP construction
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class Layout:
    nx: int
    nu: int
    N: int

    @property
    def n_x(self) -> int:
        return self.nx * (self.N + 1)

    @property
    def n_u(self) -> int:
        return self.nu * self.N

    @property
    def nz(self) -> int:
        return 2 * self.n_x + self.n_u

    @property
    def x_slice(self) -> slice:
        return slice(0, self.n_x)

    @property
    def u_slice(self) -> slice:
        return slice(self.n_x, self.n_x + self.n_u)

    @property
    def eta_slice(self) -> slice:
        return slice(self.n_x + self.n_u, self.nz)

    @property
    def u0_index(self) -> np.ndarray:
        return np.arange(self.n_x, self.n_x + self.nu)

    @property
    def neq(self) -> int:
        return self.nx * (self.N + 1)

    @property
    def nineq(self) -> int:
        return 2 * self.n_u + 3 * self.n_x

    def ineq_blocks(self) -> dict:
        sizes = (("u_lower", self.n_u), ("u_upper", self.n_u), ("x_lower", self.n_x),
                 ("x_upper", self.n_x), ("eta_nonneg", self.n_x))
        out, i = {}, 0
        for name, n in sizes:
            out[name] = slice(i, i + n)
            i += n
        return out

    def split(self, z):
        z = np.asarray(z, dtype=float)
        return (z[self.x_slice].reshape(self.N + 1, self.nx),
                z[self.u_slice].reshape(self.N, self.nu),
                z[self.eta_slice].reshape(self.N + 1, self.nx))

    def join(self, X, U, E) -> np.ndarray:
        return np.r_[np.ravel(X), np.ravel(U), np.ravel(E)]


class MpcNlp:
    """Symbolic description of the MPC with numeric evaluators.

    Parameters ``p = [x_k, theta]`` enter only through the initial-state
    constraint and the objective.
    """

    def __init__(self, problem: MpcProblem):
        self.problem = problem
        nx, nu, N = problem.nx, problem.nu, problem.N
        self.layout = lay = Layout(nx, nu, N)
        self.ntheta = problem.ntheta

        xs, us = ca.SX.sym("x", nx), ca.SX.sym("u", nu)
        step = ode_sim.rk4(problem.model, xs, us, problem.dt)
        self.F = ca.Function("F", [xs, us], [step])

        z = ca.SX.sym("z", lay.nz)
        p = ca.SX.sym("p", nx + self.ntheta)
        x_k, th = p[:nx], p[nx:]
        s = theta_slices(nx, nu)
        th_c = th[0]
        q, r, t = th[s["q"]], th[s["r"]], th[s["t"]]
        g = th[s["g"]]
        X = [z[i * nx:(i + 1) * nx] for i in range(N + 1)]
        U = [z[lay.n_x + i * nu: lay.n_x + (i + 1) * nu] for i in range(N)]
        E = [z[lay.n_x + lay.n_u + i * nx: lay.n_x + lay.n_u + (i + 1) * nx] for i in range(N + 1)]
        xr, ur = ca.DM(problem.x_ref), ca.DM(problem.u_ref)
        Gam, Gam_f = ca.DM(problem.slack_weight), ca.DM(problem.terminal_slack_weight)
        gam = problem.gamma

        phi = th_c
        for i in range(N):
            dx, du = X[i] - xr, U[i] - ur
            phi += gam ** i * (ca.dot(q, dx * dx) + ca.dot(r, du * du) + ca.dot(Gam, E[i]))
            phi += ca.dot(g[:nx], X[i]) + ca.dot(g[nx:], U[i])
        dxN = X[N] - xr
        phi += gam ** N * (ca.dot(t, dxN * dxN) + ca.dot(Gam_f, E[N])) + ca.dot(g[:nx], X[N])

        G = ca.vertcat(X[0] - x_k, *[X[i + 1] - self.F(X[i], U[i]) for i in range(N)])
        ulb, uub = ca.DM(problem.control_lb), ca.DM(problem.control_ub)
        xlb, xub = ca.DM(problem.state_lb), ca.DM(problem.state_ub)
        H = ca.vertcat(*[ulb - U[i] for i in range(N)], *[U[i] - uub for i in range(N)],
                       *[xlb - X[i] - E[i] for i in range(N + 1)],
                       *[X[i] - xub - E[i] for i in range(N + 1)],
                       *[-E[i] for i in range(N + 1)])

        lam = ca.SX.sym("lam", lay.neq)
        mu = ca.SX.sym("mu", lay.nineq)
        lag = phi + ca.dot(lam, G) + ca.dot(mu, H)
        grad_phi = ca.gradient(phi, z)
        grad_lag = ca.gradient(lag, z)

        self._z, self._p = z, p
        self.f_phi = ca.Function("phi", [z, p], [phi])
        self.f_grad_phi = ca.Function("grad_phi", [z, p], [grad_phi])
        self.f_G = ca.Function("G", [z, p], [G])
        self.f_JG = ca.Function("JG", [z, p], [ca.jacobian(G, z)])
        self.f_H = ca.Function("H", [z], [H])
        self.f_JH = ca.Function("JH", [z], [ca.jacobian(H, z)])
        self.f_hess = ca.Function("hess_lag", [z, p, lam, mu], [ca.hessian(lag, z)[0]])
        self.f_dphi_dtheta = ca.Function("dphi_dtheta", [z, p], [ca.gradient(phi, th)])
        self.f_dgradlag_dtheta = ca.Function("dgl_dtheta", [z, p, lam, mu],
                                             [ca.jacobian(grad_lag, p)[:, nx:]])

        # IPOPT view: control and slack bounds as simple bounds, soft state
        # constraints as two one-sided general constraints each
        g_soft_u = ca.vertcat(*[X[i] - E[i] for i in range(N + 1)])
        g_soft_l = ca.vertcat(*[X[i] + E[i] for i in range(N + 1)])
        self._ipopt_nlp = {"x": z, "p": p, "f": phi, "g": ca.vertcat(G, g_soft_u, g_soft_l)}
        inf = np.inf
        self.lbx = np.r_[np.full(lay.n_x, -inf), np.tile(problem.control_lb, N), np.zeros(lay.n_x)]
        self.ubx = np.r_[np.full(lay.n_x, inf), np.tile(problem.control_ub, N), np.full(lay.n_x, inf)]
        self.lbg = np.r_[np.zeros(lay.neq), np.full(lay.n_x, -inf), np.tile(problem.state_lb, N + 1)]
        self.ubg = np.r_[np.zeros(lay.neq), np.tile(problem.state_ub, N + 1), np.full(lay.n_x, inf)]
        self._solver = None

    # -- evaluators ------------------------------------------------------

    def phi(self, z, p) -> float:
        return float(self.f_phi(z, p))

    def grad_phi(self, z, p) -> np.ndarray:
        return np.asarray(self.f_grad_phi(z, p)).ravel()

    def G(self, z, p) -> np.ndarray:
        return np.asarray(self.f_G(z, p)).ravel()

    def JG(self, z, p) -> np.ndarray:
        return np.asarray(ca.densify(self.f_JG(z, p)))

    def H(self, z) -> np.ndarray:
        return np.asarray(self.f_H(z)).ravel()

    def JH(self, z) -> np.ndarray:
        return np.asarray(ca.densify(self.f_JH(z)))

    def hess_lag(self, z, p, lam, mu) -> np.ndarray:
        return np.asarray(ca.densify(self.f_hess(z, p, lam, mu)))

    def dphi_dtheta(self, z, p) -> np.ndarray:
        return np.asarray(self.f_dphi_dtheta(z, p)).ravel()

    def dgradlag_dtheta(self, z, p, lam, mu) -> np.ndarray:
        return np.asarray(ca.densify(self.f_dgradlag_dtheta(z, p, lam, mu)))

    # -- solver plumbing -------------------------------------------------

    @property
    def ipopt(self):
        if self._solver is None:
            opts = {
                "ipopt.print_level": 0,
                "ipopt.sb": "yes",
                "ipopt.tol": 1e-10,
                "ipopt.acceptable_tol": 1e-6,
                # relaxed bounds let the slacks go slightly negative, which the 1e5 penalty turns into visible value errors
                "ipopt.bound_relax_factor": 0.0,
                "ipopt.max_iter": int(self.problem.max_iter),
                "print_time": False,
                "show_eval_warnings": False,
            }
            self._solver = ca.nlpsol("mpc", "ipopt", self._ipopt_nlp, opts)
        return self._solver

    def duals_from_ipopt(self, lam_x, lam_g):
        lay = self.layout
        lam_x = np.asarray(lam_x).ravel()
        lam_g = np.asarray(lam_g).ravel()
        lam = lam_g[:lay.neq].copy()
        lx_u = lam_x[lay.u_slice]
        lx_e = lam_x[lay.eta_slice]
        lg_su = lam_g[lay.neq:lay.neq + lay.n_x]
        lg_sl = lam_g[lay.neq + lay.n_x:]
        mu = np.r_[np.maximum(-lx_u, 0), np.maximum(lx_u, 0), np.maximum(-lg_sl, 0),
                   np.maximum(lg_su, 0), np.maximum(-lx_e, 0)]
        return lam, mu

    def duals_to_ipopt(self, lam, mu):
        lay = self.layout
        b = lay.ineq_blocks()
        lam_x = np.zeros(lay.nz)
        lam_x[lay.u_slice] = mu[b["u_upper"]] - mu[b["u_lower"]]
        lam_x[lay.eta_slice] = -mu[b["eta_nonneg"]]
        lam_g = np.r_[lam, mu[b["x_upper"]], -mu[b["x_lower"]]]
        return lam_x, lam_g


_NLP_CACHE: "weakref.WeakKeyDictionary[MpcProblem, MpcNlp]" = weakref.WeakKeyDictionary()


def get_nlp(problem: MpcProblem) -> MpcNlp:
    nlp = _NLP_CACHE.get(problem)
    if nlp is None:
        nlp = _NLP_CACHE[problem] = MpcNlp(problem)
    return nlp


@dataclass
class ParametricNlp:
    """An :class:`MpcNlp` bound to a parameter value ``p = [x_k, theta]``."""

    nlp: MpcNlp
    p: np.ndarray

    @property
    def layout(self) -> Layout:
        return self.nlp.layout

    def objective(self, z) -> float:
        return self.nlp.phi(z, self.p)

    def gradient(self, z) -> np.ndarray:
        return self.nlp.grad_phi(z, self.p)

    def equalities(self, z) -> np.ndarray:
        return self.nlp.G(z, self.p)

    def inequalities(self, z) -> np.ndarray:
        return self.nlp.H(z)

    def eq_jacobian(self, z) -> np.ndarray:
        return self.nlp.JG(z, self.p)

    def ineq_jacobian(self, z) -> np.ndarray:
        return self.nlp.JH(z)

    def lagrangian_hessian(self, z, lam, mu) -> np.ndarray:
        return self.nlp.hess_lag(z, self.p, lam, mu)


def build_nlp(problem: MpcProblem, theta, x_k) -> ParametricNlp:
    """Return the NLP of ``problem`` at cost parameters ``theta`` and state ``x_k``."""
    th = _as_theta_array(theta, problem.nx, problem.nu)
    xk = np.asarray(x_k, dtype=float).ravel()
    if xk.size != problem.nx:
        raise ValueError(f"x_k must have {problem.nx} entries")
    return ParametricNlp(get_nlp(problem), np.r_[xk, th])


# ----------------------------------------------------------------------
# solutions
# ----------------------------------------------------------------------


class SolveStatus(enum.Enum):
    CONVERGED = "Converged"
    MAX_ITER = "MaxIter"
    INFEASIBLE = "Infeasible"


@dataclass
class NlpSolution:
    z: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    value: float
    status: SolveStatus
    residuals: dict
    p: np.ndarray
    layout: Layout
    iterations: int = 0
    polished: bool = False

    @property
    def x(self) -> np.ndarray:
        return self.layout.split(self.z)[0]

    @property
    def u(self) -> np.ndarray:
        return self.layout.split(self.z)[1]

    @property
    def eta(self) -> np.ndarray:
        return self.layout.split(self.z)[2]

    @property
    def u0(self) -> np.ndarray:
        return self.u[0].copy()

    @property
    def theta(self) -> np.ndarray:
        return self.p[self.layout.nx:].copy()

    @property
    def x_k(self) -> np.ndarray:
        return self.p[:self.layout.nx].copy()

    @property
    def kkt_error(self) -> float:
        return max(self.residuals.values())

    def usable(self, tol: float = 1e-4) -> bool:
        if self.status is SolveStatus.CONVERGED:
            return True
        return self.status is SolveStatus.MAX_ITER and self.kkt_error < tol

    def shifted(self, x_next) -> "NlpSolution":
        """Shift-by-one warm start for the next sampling instant."""
        X, U, E = self.layout.split(self.z)
        X = np.vstack([X[1:], X[-1:]])
        X[0] = np.asarray(x_next, dtype=float)
        U = np.vstack([U[1:], U[-1:]])
        E = np.vstack([E[1:], E[-1:]])
        lay = self.layout
        nb = lay.ineq_blocks()

        def shift(v, width, n):
            blk = v.reshape(n, width)
            return np.vstack([blk[1:], blk[-1:]]).ravel()

        mu = np.concatenate([
            shift(self.mu[nb["u_lower"]], lay.nu, lay.N), shift(self.mu[nb["u_upper"]], lay.nu, lay.N),
            shift(self.mu[nb["x_lower"]], lay.nx, lay.N + 1), shift(self.mu[nb["x_upper"]], lay.nx, lay.N + 1),
            shift(self.mu[nb["eta_nonneg"]], lay.nx, lay.N + 1)])
        lam = shift(self.lam, lay.nx, lay.N + 1)
        return NlpSolution(lay.join(X, U, E), lam, mu, np.nan, self.status, {}, self.p, lay)

    def to_csv(self, path) -> None:
        """One row per horizon index: ``i, x(nx), u(nu), eta(nx)``; ``u_N`` is empty."""
        X, U, E = self.layout.split(self.z)
        lay = self.layout
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i"] + [f"x{j}" for j in range(lay.nx)] + [f"u{j}" for j in range(lay.nu)]
                       + [f"eta{j}" for j in range(lay.nx)])
            for i in range(lay.N + 1):
                u = [repr(float(v)) for v in U[i]] if i < lay.N else [""] * lay.nu
                w.writerow([i] + [repr(float(v)) for v in X[i]] + u + [repr(float(v)) for v in E[i]])


def kkt_residuals(pnlp: ParametricNlp, z, lam, mu) -> dict:
    """Infinity norms of stationarity, primal and dual feasibility, complementarity."""
    g = pnlp.gradient(z)
    JG, JH = pnlp.eq_jacobian(z), pnlp.ineq_jacobian(z)
    Hv = pnlp.inequalities(z)
    Gv = pnlp.equalities(z)
    stat = g + JG.T @ lam + JH.T @ mu
    return {
        "stationarity": float(np.max(np.abs(stat))),
        "primal": float(max(np.max(np.abs(Gv)), np.max(np.maximum(Hv, 0.0)))),
        "dual": float(np.max(np.maximum(-mu, 0.0))),
        "complementarity": float(np.max(np.abs(np.minimum(mu, -Hv)))),
    }


def _polish(pnlp: ParametricNlp, z, lam, mu, max_newton: int = 8, max_passes: int = 6):
    """Newton iterations on the KKT equations of the guessed active set."""
    lay = pnlp.layout
    z, lam, mu = z.copy(), lam.copy(), mu.copy()
    active = mu > -pnlp.inequalities(z)
    for _ in range(max_passes):
        idx = np.flatnonzero(active)
        nA = idx.size
        mu_a = mu[idx].copy()
        for it in range(max_newton):
            JG = pnlp.eq_jacobian(z)
            JA = pnlp.ineq_jacobian(z)[idx]
            r_stat = pnlp.gradient(z) + JG.T @ lam + JA.T @ mu_a
            r_eq = pnlp.equalities(z)
            r_act = pnlp.inequalities(z)[idx]
            F = np.r_[r_stat, r_eq, r_act]
            # always take one step: it pins active slacks at zero, which the interior-point iterate only approaches
            if it > 0 and np.max(np.abs(F)) < 1e-13 * max(1.0, np.max(np.abs(pnlp.gradient(z)))):
                break
            mu_full = np.zeros(lay.nineq)
            mu_full[idx] = mu_a
            W = pnlp.lagrangian_hessian(z, lam, mu_full)
            n_c = lay.neq + nA
            C = np.vstack([JG, JA])
            K = np.block([[W, C.T], [C, np.zeros((n_c, n_c))]])
            try:
                d = np.linalg.solve(K, -F)
            except np.linalg.LinAlgError:
                d = np.linalg.lstsq(K, -F, rcond=None)[0]
            if not np.all(np.isfinite(d)):
                return None
            z = z + d[:lay.nz]
            lam = lam + d[lay.nz:lay.nz + lay.neq]
            mu_a = mu_a + d[lay.nz + lay.neq:]
        mu = np.zeros(lay.nineq)
        mu[idx] = mu_a
        Hv = pnlp.inequalities(z)
        drop = active & (mu < 0.0)
        add = ~active & (Hv > 0.0)
        if not drop.any() and not add.any():
            return z, lam, mu
        active = (active & ~drop) | add
    return None


def _solve_ipopt(pnlp: ParametricNlp, z0, lam0=None, mu0=None):
    nlp = pnlp.nlp
    kwargs = dict(x0=z0, p=pnlp.p, lbx=nlp.lbx, ubx=nlp.ubx, lbg=nlp.lbg, ubg=nlp.ubg)
    if lam0 is not None and mu0 is not None:
        lam_x, lam_g = nlp.duals_to_ipopt(lam0, mu0)
        kwargs.update(lam_x0=lam_x, lam_g0=lam_g)
    sol = nlp.ipopt(**kwargs)
    stats = nlp.ipopt.stats()
    z = np.asarray(sol["x"]).ravel()
    lam, mu = nlp.duals_from_ipopt(sol["lam_x"], sol["lam_g"])
    return z, lam, mu, stats


def cold_start(problem: MpcProblem, x_k) -> np.ndarray:
    """Reference-hold initial guess: ``x_0 = x_k``, later states at ``x_r``, inputs at ``u_r``."""
    lay = get_nlp(problem).layout
    X = np.tile(problem.x_ref, (lay.N + 1, 1))
    X[0] = np.asarray(x_k, dtype=float)
    U = np.tile(problem.u_ref, (lay.N, 1))
    E = np.zeros((lay.N + 1, lay.nx))
    E[0] = np.maximum(0.0, problem.state_lb - X[0]) + np.maximum(0.0, X[0] - problem.state_ub)
    return lay.join(X, U, E)


def solve(problem: MpcProblem, theta, x_k, warm_start: Optional[NlpSolution] = None) -> NlpSolution:
    """Solve the MPC to a KKT point.

    The returned status is ``Converged`` when stationarity, primal and dual
    feasibility and complementarity all satisfy ``problem.kkt_tol``;
    otherwise the best iterate is returned with ``MaxIter`` or, if the
    numbers broke down, ``Infeasible``.
    """
    pnlp = build_nlp(problem, theta, x_k)
    tol = problem.kkt_tol
    if warm_start is not None:
        z0 = warm_start.z.copy()
        z0[:problem.nx] = pnlp.p[:problem.nx]
        lam0, mu0 = warm_start.lam, warm_start.mu
    else:
        z0, lam0, mu0 = cold_start(problem, x_k), None, None

    z, lam, mu, stats = _solve_ipopt(pnlp, z0, lam0, mu0)
    iters = int(stats.get("iter_count", 0))
    finite = np.all(np.isfinite(z)) and np.all(np.isfinite(lam)) and np.all(np.isfinite(mu))
    if not finite and warm_start is not None:
        return solve(problem, theta, x_k, None)

    best = None
    if finite:
        polished = _polish(pnlp, z, lam, mu)
        candidates = [(z, lam, mu, False)]
        if polished is not None and all(np.all(np.isfinite(v)) for v in polished):
            candidates.insert(0, (*polished, True))
        for cz, clam, cmu, flag in candidates:
            res = kkt_residuals(pnlp, cz, clam, cmu)
            err = max(res.values())
            if best is None or err < best[4]:
                best = (cz, clam, cmu, res, err, flag)
            if err <= tol:
                break

    if best is None or not np.isfinite(best[4]):
        status = SolveStatus.INFEASIBLE
        res = {k: np.inf for k in ("stationarity", "primal", "dual", "complementarity")}
        return NlpSolution(z, lam, mu, np.nan, status, res, pnlp.p, pnlp.layout, iters, False)

    cz, clam, cmu, res, err, flag = best
    status = SolveStatus.CONVERGED if err <= tol else SolveStatus.MAX_ITER
    if status is not SolveStatus.CONVERGED and warm_start is not None:
        retry = solve(problem, theta, x_k, None)
        if retry.status is SolveStatus.CONVERGED or retry.kkt_error < err:
            return retry
    return NlpSolution(cz, clam, cmu, pnlp.objective(cz), status, res, pnlp.p, pnlp.layout, iters, flag)


def _require_usable(sol: NlpSolution) -> NlpSolution:
    if not sol.usable():
        raise SolverError(f"MPC solve failed with status {sol.status.value} "
                          f"(KKT error {sol.kkt_error:.3g})")
    return sol


def policy(problem: MpcProblem, theta, x_k, warm_start: Optional[NlpSolution] = None) -> np.ndarray:
    """First control of the optimal input sequence."""
    return _require_usable(solve(problem, theta, x_k, warm_start)).u0


def value(problem: MpcProblem, theta, x_k, warm_start: Optional[NlpSolution] = None) -> float:
    """Optimal MPC cost ``V_theta(x_k)``."""
    return _require_usable(solve(problem, theta, x_k, warm_start)).value


class MpcController:
    """Receding-horizon wrapper that owns the warm-start cache of one rollout."""

    def __init__(self, problem: MpcProblem, theta):
        self.problem = problem
        self.theta = _as_theta_array(theta, problem.nx, problem.nu)
        self._last: Optional[NlpSolution] = None

    def reset(self) -> None:
        self._last = None

    def solve(self, x_k) -> NlpSolution:
        warm = self._last.shifted(x_k) if self._last is not None else None
        sol = solve(self.problem, self.theta, x_k, warm)
        if sol.usable():
            self._last = sol
        else:
            self._last = None
        return sol
