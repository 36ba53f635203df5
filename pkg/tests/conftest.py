import numpy as np
import pytest

from mpcmobo import cdpg, nlp_mpc, ode_sim


@pytest.fixture(scope="session")
def cstr_problem():
    return nlp_mpc.MpcProblem()


@pytest.fixture(scope="session")
def theta0():
    return nlp_mpc.ThetaVector.initial().to_array()


@pytest.fixture(scope="session")
def short_episode(cstr_problem, theta0):
    """A 12-step exploratory episode on the true plant, shared by critic and objective tests."""
    rng = np.random.default_rng(3)
    sigma = cdpg.exploration_scale(cstr_problem.control_lb, cstr_problem.control_ub)
    return cdpg.rollout(cstr_problem, theta0, [105.5, 0.121, 433.4], ode_sim.rk4_step,
                        ode_sim.rl_stage_cost, 12, rng, sigma)


def pytest_configure(config):
    config.acceptance_lines = {}


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_lines", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
