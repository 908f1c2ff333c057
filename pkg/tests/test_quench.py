import numpy as np
import pytest
from scipy.integrate import solve_ivp

from services.errors import BlowUpError, CapabilityError, ParameterError, PreconditionError
from services.flows import stream_function_flow
from services.quench import (
    IgnitionNonlinearity,
    ReactionSystem,
    bump_temperature,
    check_range,
    compare_with_linear,
    critical_amplitude_search,
    ignition_eval,
    l1_balance_residual,
    quench_detector,
    run_reaction,
    uniform_temperature,
)


# -----------------------------
# Нелинейность
# -----------------------------
def test_ignition_profile():
    f = IgnitionNonlinearity(0.5)
    assert ignition_eval(f, 0.2) == 0.0
    assert ignition_eval(f, 0.5) == 0.0
    assert ignition_eval(f, 1.0) == 0.0
    assert ignition_eval(f, 0.75) == pytest.approx(1.0)
    assert f.lipschitz == pytest.approx(8.0)
    with pytest.raises(ParameterError):
        ignition_eval(f, 1.5)
    with pytest.raises(ParameterError):
        IgnitionNonlinearity(1.0)


def test_check_range_clips_roundoff_and_rejects_blowup():
    vals = np.array([-1e-13, 0.5, 1.0 + 1e-13])
    clipped = check_range(vals)
    assert clipped.min() == 0.0 and clipped.max() == 1.0
    with pytest.raises(BlowUpError, match="reduce dt"):
        check_range(np.array([-1e-6, 0.5]))
    with pytest.raises(BlowUpError, match="raise K"):
        check_range(np.array([0.5, 1.0 + 1e-6]), hint="raise K")


def test_bump_validation():
    system = ReactionSystem.build(None, 4)
    with pytest.raises(ParameterError):
        bump_temperature(system, width=0.0)
    with pytest.raises(ParameterError):
        bump_temperature(system, amplitude=0.9, background=0.2)
    with pytest.raises(ParameterError):
        bump_temperature(system, axis="x")


def test_under_resolved_bump_is_a_parameter_error():
    system = ReactionSystem.build(None, 8)
    with pytest.raises(ParameterError, match="K=8"):
        bump_temperature(system, amplitude=0.9, background=0.0, width=0.05)
    # та же ширина разрешается на более частой решётке
    T0 = bump_temperature(ReactionSystem.build(None, 32), amplitude=0.9, background=0.0, width=0.05)
    assert T0.values.min() >= 0.0


def test_method_falls_back_to_rk4_without_eigendecomposition():
    shear = stream_function_flow("shear", 2)
    assert ReactionSystem.build(None, 8).method == "eigsplit"
    assert ReactionSystem.build(shear, 8).method == "eigsplit"
    assert ReactionSystem.build(shear, 32).method == "strang-rk4"
    with pytest.raises(CapabilityError, match="eigsplit"):
        ReactionSystem.build(shear, 32, method="eigsplit")


# -----------------------------
# Прогоны
# -----------------------------
def test_uniform_state_follows_the_reaction_ode():
    f = IgnitionNonlinearity(0.5)
    system = ReactionSystem.build(None, 4)
    run = run_reaction(system, uniform_temperature(system, 0.8), 0.0, f, 0.5, 1e-3)
    ref = solve_ivp(lambda t, y: f.rate(y), (0.0, 0.5), [0.8], rtol=1e-12, atol=1e-14)
    assert run.int_T[-1] == pytest.approx(ref.y[0, -1], abs=1e-8)
    np.testing.assert_allclose(run.sup_T, run.min_T, atol=1e-12)
    assert not quench_detector(run, 0.5).quenched


def test_l1_balance_converges_with_dt():
    f = IgnitionNonlinearity(0.5)
    system = ReactionSystem.build(None, 8)
    T0 = bump_temperature(system, amplitude=0.35, background=0.6, width=0.12)

    def residual(dt):
        return l1_balance_residual(run_reaction(system, T0, 0.0, f, 0.1, dt))

    r1, r2 = residual(0.002), residual(0.001)
    assert r1 / r2 >= 2.0**1.9
    assert r2 <= 1e-5


def test_comparison_with_linear_problem():
    f = IgnitionNonlinearity(0.5)
    system = ReactionSystem.build(None, 8)
    T0 = bump_temperature(system)
    check = compare_with_linear(system, T0, 0.0, f, 0.05, 0.005)
    assert check.passed
    assert check.c == pytest.approx(8.0)
    broken = compare_with_linear(system, T0, 0.0, f, 0.05, 0.005, c=0.0)
    assert not broken.passed
    assert broken.max_violation > 0


def test_shear_does_not_touch_a_layered_profile():
    f = IgnitionNonlinearity(0.5)
    system = ReactionSystem.build(stream_function_flow("shear", 2), 8)
    T0 = bump_temperature(system, axis="y")
    still = run_reaction(system, T0, 0.0, f, 0.05, 0.005)
    stirred = run_reaction(system, T0, 1000.0, f, 0.05, 0.005)
    np.testing.assert_allclose(stirred.sup_T, still.sup_T, atol=1e-9)


def test_shear_on_a_fine_lattice_runs_without_eigendecomposition():
    f = IgnitionNonlinearity(0.5)
    system = ReactionSystem.build(stream_function_flow("shear", 2), 32)
    assert system.method == "strang-rk4"
    T0 = bump_temperature(system, axis="y")
    still = run_reaction(system, T0, 0.0, f, 0.01, 0.005)
    stirred = run_reaction(system, T0, 10.0, f, 0.01, 0.005)
    np.testing.assert_allclose(stirred.sup_T, still.sup_T, atol=1e-9)
    assert stirred.min_T.min() >= 0.0 and stirred.sup_T.max() <= 1.0


def test_comparison_bound_holds_under_shear_over_unit_time():
    f = IgnitionNonlinearity(0.5)
    system = ReactionSystem.build(stream_function_flow("shear", 2), 8)
    check = compare_with_linear(system, bump_temperature(system), 10.0, f, 1.0, 0.01)
    assert check.passed
    assert check.c == pytest.approx(8.0)


def test_narrow_bump_quenches_for_good():
    f = IgnitionNonlinearity(0.5)
    system = ReactionSystem.build(None, 8)
    run = run_reaction(system, bump_temperature(system), 0.0, f, 0.05, 1e-3)
    verdict = quench_detector(run, 0.5)
    assert verdict.quenched
    assert verdict.t_quench <= 0.05
    assert verdict.final


# -----------------------------
# Поиск критической амплитуды
# -----------------------------
def test_search_needs_subcritical_heat():
    f = IgnitionNonlinearity(0.5)
    system = ReactionSystem.build(None, 4)
    with pytest.raises(PreconditionError):
        critical_amplitude_search(system, f, uniform_temperature(system, 0.8), 0.1, 0.01)


def test_search_returns_zero_for_cold_data():
    f = IgnitionNonlinearity(0.5)
    system = ReactionSystem.build(None, 8)
    result = critical_amplitude_search(system, f, bump_temperature(system, amplitude=0.3), 0.1, 0.01)
    assert result.found
    assert result.amplitude == 0.0
