import numpy as np
import pytest

from mpcmobo import kkt_sensitivity as ks
from mpcmobo import nlp_mpc
from mpcmobo.nlp_mpc import MpcProblem, SolveStatus

from helpers import linear_problem, linear_theta, normwise_error, sensitivity_instances


@pytest.fixture(scope="module")
def instances(cstr_problem):
    return sensitivity_instances(cstr_problem, 4, seed=11)[0]


def test_offset_entries_are_exact(cstr_problem, instances):
    for th, x, sol, *_ in instances:
        sens = ks.policy_sensitivity(sol, cstr_problem, th)
        assert not sens.fallback
        assert np.all(sens.matrix[0] == 0.0)
        assert ks.lagrangian_grad_theta(sol, cstr_problem, th)[0] == 1.0


def test_stage_weight_entry_by_hand(cstr_problem):
    th = nlp_mpc.ThetaVector.initial().to_array()
    sol = nlp_mpc.solve(cstr_problem, th, [104.0, 0.13, 431.0])
    grad = ks.lagrangian_grad_theta(sol, cstr_problem)
    dx = sol.x[:-1] - cstr_problem.x_ref
    disc = cstr_problem.gamma ** np.arange(cstr_problem.N)
    np.testing.assert_allclose(grad[1:4], disc @ (dx * dx), rtol=1e-12)
    dxN = sol.x[-1] - cstr_problem.x_ref
    np.testing.assert_allclose(grad[6:9], cstr_problem.gamma ** cstr_problem.N * dxN**2, rtol=1e-12)
    np.testing.assert_allclose(grad[9:12], sol.x.sum(axis=0), rtol=1e-12)
    np.testing.assert_allclose(grad[12:14], sol.u.sum(axis=0), rtol=1e-12)


def test_sensitivities_match_central_differences(cstr_problem, instances):
    for th, x, sol, dpi, dv in instances:
        sens = ks.policy_sensitivity(sol, cstr_problem, th)
        assert normwise_error(sens.matrix, dpi) <= 1e-3
        assert normwise_error(ks.lagrangian_grad_theta(sol, cstr_problem, th), dv) <= 1e-4


def test_instance_with_active_slack_is_covered(cstr_problem, instances):
    assert any(inst[2].eta[0, 0] > 0 for inst in instances)


def test_linear_quadratic_control_weight_sensitivity():
    prob = linear_problem()
    th = linear_theta()
    x = np.array([0.8, -0.4])
    sol = nlp_mpc.solve(prob, th, x)
    sens = ks.policy_sensitivity(sol, prob, th)
    fd = ks.fd_policy_sensitivity(prob, th, x, sol, central=True)
    j = 3  # the single control weight
    assert abs(sens.matrix[j, 0] - fd[j, 0]) <= 1e-4 * abs(fd[j, 0])


def test_kkt_residual_small_at_solution(cstr_problem, instances):
    th, x, sol, *_ = instances[0]
    assert np.max(np.abs(ks.kkt_residual(cstr_problem, sol, th))) <= 1e-8 * max(1.0, np.max(np.abs(sol.mu)))


def test_full_jacobian_shape(cstr_problem, instances):
    th, x, sol, *_ = instances[0]
    dy, cond = ks.solution_sensitivity(sol, cstr_problem, th)
    lay = sol.layout
    assert dy.shape == (lay.nz + lay.neq + lay.nineq, 14)
    assert np.isfinite(cond) and cond < ks.COND_LIMIT


def test_stale_solution_rejected(theta0):
    prob = MpcProblem(max_iter=1)
    sol = nlp_mpc.solve(prob, theta0, [111.0, 0.12, 433.0])
    assert sol.status is SolveStatus.MAX_ITER
    with pytest.raises(ks.StaleSolutionError):
        ks.lagrangian_grad_theta(sol, prob)
    with pytest.raises(ks.StaleSolutionError):
        ks.policy_sensitivity(sol, prob)


def test_weakly_active_point_uses_fallback(cstr_problem, theta0):
    # an input bound that is just reached: the multiplier vanishes with the constraint
    sol = nlp_mpc.solve(cstr_problem, theta0, [105.0, 0.12, 433.0])
    forced = nlp_mpc.NlpSolution(sol.z.copy(), sol.lam, sol.mu.copy(), sol.value, sol.status, sol.residuals,
                                 sol.p, sol.layout)
    lay = sol.layout
    b = lay.ineq_blocks()
    i_upper_qs = np.arange(lay.nineq)[b["u_upper"]][0]
    forced.z[lay.u0_index[0]] = cstr_problem.control_ub[0]
    forced.mu[i_upper_qs] = 0.0
    system = ks.kkt_system(cstr_problem, forced)
    assert system.degenerate
    sens = ks.policy_sensitivity(forced, cstr_problem)
    assert sens.fallback and sens.degenerate
    assert np.all(np.isfinite(sens.matrix))
