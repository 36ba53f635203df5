"""Sensitivities of the MPC solution map with respect to the cost parameters.

The primal-dual KKT residual of the MPC is

    R(y, x_k, theta) = [grad_z L, G, diag(mu) H],   y = (z, lam, mu),

and at a strictly complementary KKT point the implicit-function theorem gives
``dy/dtheta = -(dR/dy)^{-1} dR/dtheta``. The policy sensitivity is the block
of that derivative belonging to the first control. The value sensitivity is
the partial derivative of the Lagrangian in theta at fixed ``y``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack

from .nlp_mpc import MpcProblem, NlpSolution, SolveStatus, build_nlp, solve

logger = logging.getLogger(__name__)

DEGENERACY_TOL = 1e-7
COND_LIMIT = 1e12


class StaleSolutionError(ValueError):
    """Sensitivities were requested for a solution that did not converge."""


class SensitivityError(RuntimeError):
    """The KKT Jacobian is singular."""


@dataclass
class KktSystem:
    residual: np.ndarray
    jac_y: np.ndarray
    jac_theta: np.ndarray
    active: np.ndarray
    weakly_active: np.ndarray

    @property
    def degenerate(self) -> bool:
        return bool(self.weakly_active.any())


@dataclass
class PolicySensitivity:
    """``d pi / d theta`` as an ``(ntheta, nu)`` matrix plus diagnostics."""

    matrix: np.ndarray
    condition: float
    degenerate: bool = False
    fallback: bool = False
    notes: dict = field(default_factory=dict)


def _check_converged(solution: NlpSolution) -> None:
    if solution.status is not SolveStatus.CONVERGED:
        raise StaleSolutionError(f"solution status is {solution.status.value}, expected Converged")


def kkt_residual(problem: MpcProblem, solution: NlpSolution, theta=None) -> np.ndarray:
    th = solution.theta if theta is None else theta
    pnlp = build_nlp(problem, th, solution.x_k)
    z, lam, mu = solution.z, solution.lam, solution.mu
    stat = (pnlp.gradient(z) + pnlp.eq_jacobian(z).T @ lam + pnlp.ineq_jacobian(z).T @ mu)
    return np.r_[stat, pnlp.equalities(z), mu * pnlp.inequalities(z)]


def kkt_system(problem: MpcProblem, solution: NlpSolution, theta=None) -> KktSystem:
    """Assemble ``R``, ``dR/dy`` and ``dR/dtheta`` at the solution."""
    th = solution.theta if theta is None else theta
    pnlp = build_nlp(problem, th, solution.x_k)
    nlp = pnlp.nlp
    lay = pnlp.layout
    z, lam, mu = solution.z, solution.lam, solution.mu
    JG, JH = pnlp.eq_jacobian(z), pnlp.ineq_jacobian(z)
    Hv = pnlp.inequalities(z)
    W = pnlp.lagrangian_hessian(z, lam, mu)

    nz, ne, ni = lay.nz, lay.neq, lay.nineq
    jac_y = np.zeros((nz + ne + ni, nz + ne + ni))
    jac_y[:nz, :nz] = W
    jac_y[:nz, nz:nz + ne] = JG.T
    jac_y[:nz, nz + ne:] = JH.T
    jac_y[nz:nz + ne, :nz] = JG
    jac_y[nz + ne:, :nz] = mu[:, None] * JH
    jac_y[nz + ne:, nz + ne:] = np.diag(Hv)

    jac_theta = np.zeros((nz + ne + ni, nlp.ntheta))
    jac_theta[:nz] = nlp.dgradlag_dtheta(z, pnlp.p, lam, mu)

    stat = pnlp.gradient(z) + JG.T @ lam + JH.T @ mu
    residual = np.r_[stat, pnlp.equalities(z), mu * Hv]
    weak = (mu < DEGENERACY_TOL) & (np.abs(Hv) < DEGENERACY_TOL)
    active = mu >= -Hv
    return KktSystem(residual, jac_y, jac_theta, active, weak)


def lagrangian_grad_theta(solution: NlpSolution, problem: MpcProblem, theta=None) -> np.ndarray:
    """``grad_theta L`` at fixed primal-dual point; equals ``grad_theta V_theta``.

    Constraints do not depend on theta, so only the objective contributes.
    """
    _check_converged(solution)
    th = solution.theta if theta is None else theta
    pnlp = build_nlp(problem, th, solution.x_k)
    return pnlp.nlp.dphi_dtheta(solution.z, pnlp.p)


value_sensitivity = lagrangian_grad_theta


def _factorize(jac: np.ndarray):
    """Equilibrated LU factorization with a reciprocal condition estimate."""
    r, c, _, _, _, info = lapack.dgeequ(jac)
    if info != 0:
        raise SensitivityError(f"KKT Jacobian has an all-zero row or column (info={info})")
    scaled = (r[:, None] * jac) * c[None, :]
    lu, piv = sla.lu_factor(scaled, check_finite=False)
    if np.any(np.diag(lu) == 0.0):
        raise SensitivityError("KKT Jacobian is singular")
    anorm = np.max(np.sum(np.abs(scaled), axis=0))
    rcond, info = lapack.dgecon(lu, anorm, norm="1")
    cond = np.inf if rcond == 0 else 1.0 / rcond
    return (lu, piv), r, c, cond


def _ift_solve(system: KktSystem):
    (lu, piv), r, c, cond = _factorize(system.jac_y)
    rhs = -(r[:, None] * system.jac_theta)
    dy = c[:, None] * sla.lu_solve((lu, piv), rhs, check_finite=False)
    if not np.all(np.isfinite(dy)):
        raise SensitivityError("non-finite sensitivity")
    return dy, cond


def solution_sensitivity(solution: NlpSolution, problem: MpcProblem, theta=None):
    """Full ``dy/dtheta`` (rows ordered as ``(z, lam, mu)``) and the condition estimate."""
    _check_converged(solution)
    return _ift_solve(kkt_system(problem, solution, theta))


def fd_policy_sensitivity(problem: MpcProblem, theta, x_k, base: NlpSolution | None = None,
                          step: float = 1e-5, central: bool = False) -> np.ndarray:
    """Finite-difference ``d pi / d theta``, one- or two-sided, warm-started at ``base``."""
    th = np.asarray(theta, dtype=float)
    if base is None:
        base = solve(problem, th, x_k)
    u_base = base.u0
    out = np.zeros((th.size, problem.nu))
    for j in range(th.size):
        h = step * max(1.0, abs(th[j]))
        tp = th.copy()
        tp[j] += h
        up = solve(problem, tp, x_k, base).u0
        if central:
            tm = th.copy()
            tm[j] -= h
            um = solve(problem, tm, x_k, base).u0
            out[j] = (up - um) / (2 * h)
        else:
            out[j] = (up - u_base) / h
    return out


def policy_sensitivity(solution: NlpSolution, problem: MpcProblem, theta=None) -> PolicySensitivity:
    """``d pi_theta(x_k) / d theta`` as an ``(ntheta, nu)`` matrix.

    Weakly active constraints or a condition estimate above ``1e12`` switch to
    one-sided finite differences; the result is then flagged.

    Raises:
        StaleSolutionError: if the solution did not converge.
        SensitivityError: if the KKT Jacobian is singular.
    """
    _check_converged(solution)
    th = solution.theta if theta is None else np.asarray(theta, dtype=float)
    system = kkt_system(problem, solution, th)
    lay = solution.layout
    degenerate = system.degenerate
    cond = np.nan
    if not degenerate:
        dy, cond = _ift_solve(system)
        if cond <= COND_LIMIT:
            matrix = dy[lay.u0_index].T.copy()
            return PolicySensitivity(matrix, cond)
    logger.debug("degenerate KKT point (weak=%d, cond=%.3g); using finite differences",
                 int(system.weakly_active.sum()), cond)
    matrix = fd_policy_sensitivity(problem, th, solution.x_k, solution)
    # the offset column is structurally zero; re-solving it only adds noise
    matrix[0] = 0.0
    return PolicySensitivity(matrix, cond, degenerate=True, fallback=True,
                             notes={"weakly_active": int(system.weakly_active.sum())})
