import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mpcmobo import ode_sim
from mpcmobo.ode_sim import CstrParams, ModelVariant, StageCost

X_REF = np.array([105.0, 0.12, 433.0])
U_REF = np.array([100.0, 110.0])


def hand_rhs(x, u, b=(1.0, 1.0, 1.0, 1.0, 1.0)):
    # transcribed term by term from the reactor balance with the tabulated constants
    V, Ca, T = x
    qs, qc = u
    q_o, C_ao, T_o, T_co = 100.0, 1.0, 350.0, 350.0
    k0, E_R = 7.2e10, 1e4
    k1 = 2e5 * 7.2e10 / 1000.0
    k2 = 1000.0 / 1000.0
    k3 = 7e5 / 1000.0
    arr = np.exp(-E_R / T)
    return np.array([
        q_o - qs,
        b[0] * q_o / V * (C_ao - Ca) - b[1] * k0 * arr * Ca,
        q_o / V * (T_o - T) + b[2] * k1 * arr * Ca + b[3] * k2 * qc / V * (1 - np.exp(-b[4] * k3 / qc)) * (T_co - T),
    ])


def test_derived_constants_match_table():
    p = CstrParams()
    assert p.k1 == pytest.approx(1.44e13, rel=1e-15)
    assert p.k2 == 1.0
    assert p.k3 == 700.0


def test_volume_balance_zero_at_matching_flows():
    f = ode_sim.vector_field([100.0, 1.0, 350.0], [100.0, 110.0])
    assert f[0] == 0.0


def test_true_plant_matches_hand_transcription():
    f = ode_sim.vector_field(X_REF, U_REF)
    np.testing.assert_allclose(f, hand_rhs(X_REF, U_REF), rtol=1e-12, atol=0)


def test_misspecified_matches_hand_transcription():
    x, u = np.array([101.0, 0.2, 440.0]), np.array([95.0, 80.0])
    f = ode_sim.vector_field(x, u, variant=ode_sim.MISSPECIFIED)
    np.testing.assert_allclose(f, hand_rhs(x, u, (1.1, 1.2, 1.15, 0.9, 1.2)), rtol=1e-12, atol=0)


def test_unit_biases_reproduce_true_plant_bitwise():
    x, u = np.array([99.0, 0.3, 455.0]), np.array([120.0, 60.0])
    unit = ModelVariant("custom", 1.0, 1.0, 1.0, 1.0, 1.0)
    assert np.array_equal(ode_sim.vector_field(x, u, variant=unit), ode_sim.vector_field(x, u))


def test_variants_differ_when_concentration_positive():
    x, u = np.array([105.0, 0.12, 433.0]), U_REF
    assert not np.allclose(ode_sim.vector_field(x, u), ode_sim.vector_field(x, u, variant=ode_sim.MISSPECIFIED))


def test_variant_from_name():
    assert ModelVariant.from_name("perfect") == ode_sim.TRUE_PLANT
    assert ModelVariant.from_name("Misspecified") == ode_sim.MISSPECIFIED
    with pytest.raises(ValueError):
        ModelVariant.from_name("other")


@pytest.mark.parametrize("state,control,field", [
    ([0.0, 0.1, 430.0], U_REF, "V"),
    ([-3.0, 0.1, 430.0], U_REF, "V"),
    ([100.0, np.nan, 430.0], U_REF, "Ca"),
    ([100.0, 0.1, 430.0], [100.0, 0.0], "qc"),
    ([100.0, 0.1, 430.0], [np.inf, 100.0], "qs"),
])
def test_domain_errors_name_the_field(state, control, field):
    with pytest.raises(ode_sim.DomainError, match=field):
        ode_sim.vector_field(state, control)


def test_rk4_fixed_point_with_zero_field():
    x = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(ode_sim.rk4(lambda x, u: 0.0 * x, x, None, 0.05), x)


def test_rk4_scalar_decay_against_exponential():
    h = 0.05
    got = ode_sim.rk4(lambda x, u: -x, np.array([1.0]), None, h)[0]
    # one classical step reproduces the degree-4 Taylor polynomial of exp(-h) exactly
    assert abs(got - (1 - h + h**2 / 2 - h**3 / 6 + h**4 / 24)) < 1e-15
    # and is off from exp(-h) by the fifth-order remainder only
    assert abs(got - np.exp(-h)) <= h**5 / 120


def test_rk4_global_error_order():
    def integrate(h):
        x = np.array([1.0])
        for _ in range(int(round(1.0 / h))):
            x = ode_sim.rk4(lambda x, u: -x, x, None, h)
        return abs(x[0] - np.exp(-1.0))
    ratio = integrate(0.1) / integrate(0.05)
    assert 12.0 <= ratio <= 20.0


def test_rk4_step_against_two_half_steps():
    one = ode_sim.rk4_step(X_REF, U_REF)
    half = ode_sim.rk4_step(ode_sim.rk4_step(X_REF, U_REF, 0.025), U_REF, 0.025)
    np.testing.assert_allclose(one, half, rtol=1e-6)


def test_rk4_step_rejects_nonpositive_dt():
    with pytest.raises(ValueError):
        ode_sim.rk4_step(X_REF, U_REF, 0.0)


def test_stage_cost_zero_at_reference():
    assert ode_sim.rl_stage_cost(X_REF, U_REF) == 0.0


def test_stage_cost_volume_violation_by_hand():
    assert ode_sim.rl_stage_cost([111.0, 0.12, 433.0], U_REF) == pytest.approx(100360.0, rel=1e-14)


def test_stage_cost_reference_override():
    refs = (np.array([100.0, 0.1, 430.0]), np.array([90.0, 90.0]))
    assert ode_sim.rl_stage_cost(refs[0], refs[1], refs) == 0.0


def test_clip_control_enforces_box():
    np.testing.assert_array_equal(ode_sim.clip_control([10.0, 200.0]), [55.0, 140.0])


def test_initial_state_within_box():
    rng = np.random.default_rng(0)
    lo, hi = ode_sim.DEFAULT_INITIAL_BOX
    for _ in range(50):
        x = ode_sim.sample_initial_state(rng)
        assert np.all(x >= lo) and np.all(x <= hi)


states = st.tuples(st.floats(50, 150), st.floats(-1, 2), st.floats(300, 600))
controls = st.tuples(st.floats(0, 200), st.floats(0, 200))


@settings(max_examples=200, deadline=None)
@given(states, controls)
def test_stage_cost_nonnegative_and_quadratic_inside_box(x, u):
    cost = StageCost()
    val = cost(x, u)
    assert val >= 0.0
    if np.all(cost.violation(x) == 0.0):
        dx, du = np.subtract(x, X_REF), np.subtract(u, U_REF)
        quad = dx @ (np.array([10.0, 5000.0, 10.0]) * dx) + du @ (10.0 * du)
        assert val == pytest.approx(quad, rel=1e-12, abs=1e-12)
