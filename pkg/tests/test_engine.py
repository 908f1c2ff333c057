import math

import numpy as np
import pytest

import dissipator.config as config
from services import engine, metrics
from services.engine import (
    EvolutionConfig,
    SemigroupStepper,
    check_conditional_decay,
    check_dissipation_budget,
    check_monotone_decay,
    dense_oracle_evolve,
    energy_identity_residual,
    estimate_bound_constant,
    evolve,
    evolve_adaptive,
    free_evolve,
    free_vs_damped_gap,
    propagate,
    rescaling_consistency,
)
from services.errors import DimensionError, OracleSizeError, ParameterError, PreconditionError
from services.operators import build_constant_flow_generator, build_free_jacobi
from services.spectral import GammaLadder, SpectralState, basis_vector


def _free(N):
    return build_free_jacobi(N).handle(), GammaLadder.diagonal(N)


def _random_state(N, rng):
    c = rng.standard_normal(N) + 1j * rng.standard_normal(N)
    return SpectralState(c, f"abstract-{N}").normalized()


# -----------------------------
# Конфиг
# -----------------------------
def test_config_needs_exactly_one_form():
    with pytest.raises(ParameterError):
        EvolutionConfig(t_end=1.0, dt=0.1)
    with pytest.raises(ParameterError):
        EvolutionConfig(t_end=1.0, dt=0.1, amplitude=1.0, epsilon=1.0)
    with pytest.raises(ParameterError):
        EvolutionConfig(t_end=1.0, dt=-0.1, amplitude=1.0)
    with pytest.raises(ParameterError):
        EvolutionConfig(t_end=1.0, dt=0.1, amplitude=1.0, method="euler")


def test_config_derives_the_other_form():
    cfg = EvolutionConfig(t_end=1.0, dt=0.1, epsilon=0.25)
    assert cfg.A == 4.0
    assert cfg.drive == 1.0 and cfg.damping == 0.25
    assert EvolutionConfig(t_end=1.0, dt=0.1, amplitude=0.0).eps == math.inf
    assert EvolutionConfig(t_end=1.0, dt=0.3, amplitude=1.0).n_steps == 3


# -----------------------------
# Шаги
# -----------------------------
def test_pure_heat_is_exact():
    L, ladder = _free(8)
    cfg = EvolutionConfig(t_end=1.0, dt=0.01, amplitude=0.0)
    traj = evolve(L, ladder, cfg, basis_vector(8, 1, L.basis))
    assert traj.norm_l2[-1] == pytest.approx(math.exp(-1.0), rel=1e-12)
    assert energy_identity_residual(traj.ledger) <= 1e-12


def test_strang_splitting_is_second_order():
    L, ladder = _free(16)
    phi0 = basis_vector(16, 1, L.basis)
    exact = propagate(L, ladder, 1.0, 1.0, phi0, 0.5, 0.05, method="dense-oracle").coeffs

    def error(dt):
        approx = propagate(L, ladder, 1.0, 1.0, phi0, 0.5, dt, method="eigsplit").coeffs
        return float(np.linalg.norm(approx - exact))

    e1, e2 = error(0.01), error(0.005)
    assert e2 < e1 / 3.0
    assert e2 <= 1e-4


def test_rk4_unitary_matches_eigen_split(rng):
    L, ladder = _free(16)
    phi0 = _random_state(16, rng)
    a = propagate(L, ladder, 1.0, 1.0, phi0, 0.2, 1e-3, method="eigsplit").coeffs
    b = propagate(L, ladder, 1.0, 1.0, phi0, 0.2, 1e-3, method="strang-rk4").coeffs
    assert np.linalg.norm(a - b) <= 1e-9


def test_oracle_size_limit(monkeypatch):
    monkeypatch.setattr(config, "ORACLE_MAX_DIM", 8)
    L, ladder = _free(16)
    with pytest.raises(OracleSizeError):
        SemigroupStepper(L, ladder, 1.0, 1.0, "dense-oracle")
    with pytest.raises(OracleSizeError):
        dense_oracle_evolve(L, ladder, 1.0, 0.1, basis_vector(16, 1, L.basis))


def test_free_evolution_at_zero_time_is_identity(rng):
    L, _ = _free(16)
    phi0 = _random_state(16, rng)
    np.testing.assert_allclose(free_evolve(L, 0.0, phi0).coeffs, phi0.coeffs, atol=1e-12)


def test_free_evolution_of_constant_flow_is_a_phase(rng):
    alpha = np.array([(math.sqrt(5.0) - 1.0) / 2.0, math.sqrt(2.0)])
    L = build_constant_flow_generator(alpha, 4)
    phi0 = _random_state(L.dim, rng)
    phase = np.exp(2j * np.pi * (L.lattice.modes @ alpha) * 0.7)
    out = free_evolve(L, 0.7, phi0)
    np.testing.assert_allclose(out.coeffs, phase * phi0.coeffs, atol=1e-12)
    assert out.norm == pytest.approx(1.0, abs=1e-10)


def test_oracle_without_flow_is_exact_heat(rng):
    L = build_constant_flow_generator((0.0, 0.0), 2)
    ladder = GammaLadder.torus(L.lattice)
    phi0 = _random_state(L.dim, rng)
    out = dense_oracle_evolve(L, ladder, 5.0, 0.01, phi0)
    np.testing.assert_allclose(out.coeffs, np.exp(-ladder.lambdas * 0.01) * phi0.coeffs, rtol=1e-12, atol=1e-15)


def test_oracle_semigroup_property(rng):
    L, ladder = _free(16)
    phi0 = _random_state(16, rng)
    once = dense_oracle_evolve(L, ladder, 3.0, 0.5, phi0)
    twice = dense_oracle_evolve(L, ladder, 3.0, 0.3, dense_oracle_evolve(L, ladder, 3.0, 0.2, phi0))
    np.testing.assert_allclose(once.coeffs, twice.coeffs, atol=1e-10)


def test_evolve_checks_dimensions():
    L, ladder = _free(8)
    cfg = EvolutionConfig(t_end=0.1, dt=0.01, amplitude=1.0)
    with pytest.raises(DimensionError):
        evolve(L, ladder, cfg, basis_vector(4, 1, "abstract-4"))


# -----------------------------
# Энергетика
# -----------------------------
def test_energy_identity_converges_with_dt(rng):
    L, ladder = _free(16)
    phi0 = _random_state(16, rng)

    def residual(dt):
        cfg = EvolutionConfig(t_end=1.0, dt=dt, amplitude=2.0)
        return energy_identity_residual(evolve(L, ladder, cfg, phi0).ledger)

    r1, r2 = residual(0.01), residual(0.005)
    assert r2 < r1 / 2.5
    assert r2 <= 1e-3


def test_energy_identity_is_second_order_at_large_n():
    # гладкое φ₀ = e_1: вся масса в нижней моде
    N = 128
    L, ladder = _free(N)
    phi0 = basis_vector(N, 1, L.basis)

    def residual(dt):
        cfg = EvolutionConfig(t_end=1.0, dt=dt, amplitude=1.0)
        return energy_identity_residual(evolve(L, ladder, cfg, phi0).ledger)

    r1, r2 = residual(1e-3), residual(5e-4)
    assert r1 / r2 >= 2.0**1.9
    assert r1 <= 1e-4


def test_trajectory_invariants_hold(rng):
    L, ladder = _free(32)
    phi0 = _random_state(32, rng)
    cfg = EvolutionConfig(t_end=1.0, dt=1e-3, amplitude=5.0, sample_stride=100)
    traj = evolve(L, ladder, cfg, phi0)
    assert check_monotone_decay(traj).passed
    budget = check_dissipation_budget(traj.ledger)
    assert budget.passed
    assert budget.value <= 0.5 + 1e-6
    # λ_n ≥ 1, поэтому условие ‖φ‖₁² ≥ ‖φ‖² выполнено всегда
    assert check_conditional_decay(traj, 1.0).passed
    assert len(traj.samples) == 11
    assert traj.final.norm == pytest.approx(traj.norm_l2[-1])


def test_adaptive_refinement_logs_events(tmp_path):
    L, ladder = _free(8)
    phi0 = SpectralState(np.ones(8), L.basis).normalized()
    events = tmp_path / "events.jsonl"
    metrics.configure(events, "adaptive-test")
    cfg = EvolutionConfig(t_end=0.5, dt=0.1, amplitude=2.0)
    traj = evolve_adaptive(L, ladder, cfg, phi0)
    assert energy_identity_residual(traj.ledger) / 0.5 < engine.ADAPTIVE_TOL
    assert traj.dt < 0.1
    refined = [e for e in metrics.read_events(events) if e["event_type"] == "step_refined"]
    assert refined
    assert refined[0]["run_id"] == "adaptive-test"


# -----------------------------
# Свободная и затухающая эволюции
# -----------------------------
@pytest.mark.parametrize("eps", [1e-1, 1e-2, 1e-3])
def test_free_damped_gap_within_bound(eps, rng):
    L = build_constant_flow_generator((1.0, math.sqrt(2.0)), 2)
    ladder = GammaLadder.torus(L.lattice)
    phi0 = SpectralState(_random_state(L.dim, rng).coeffs, L.basis)
    report = free_vs_damped_gap(L, ladder, eps, 1.0, phi0, dt=1e-2)
    assert report.within_bound
    assert report.measured <= report.bound
    assert np.all(np.diff(report.running_max) >= 0)


def test_unity_bound_needs_commuting_operator():
    L, ladder = _free(8)
    with pytest.raises(PreconditionError):
        free_vs_damped_gap(L, ladder, 0.1, 1.0, basis_vector(8, 1, L.basis))


def test_rescaling_forms_agree():
    L, ladder = _free(16)
    phi0 = basis_vector(16, 2, L.basis)
    assert rescaling_consistency(L, ladder, 10.0, 0.1, phi0, 1e-2, method="dense-oracle") <= 1e-10


def test_bound_constant_for_constant_flow():
    L = build_constant_flow_generator((1.0, 0.0), 1)
    ladder = GammaLadder.torus(L.lattice)
    assert estimate_bound_constant(L, ladder) == pytest.approx(1.0, rel=1e-10)
