import math
from fractions import Fraction

import numpy as np
import pytest

from services.errors import ParameterError, ResonanceError, SizeError
from services.flows import (
    TimeChangedFlowSpec,
    build_density_F,
    default_q_hat,
    lacunary_q_hat,
    liouville_alpha,
    relabel_from_density,
    relabel_to_lebesgue,
    skew_coordinates,
    solve_homology,
    stream_function_flow,
)

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def test_liouville_alpha_exact_value():
    value, exact = liouville_alpha(3)
    assert exact == Fraction(110001, 10**6)
    assert value == pytest.approx(0.110001, abs=1e-15)
    with pytest.raises(ParameterError):
        liouville_alpha(0)


def test_homology_residual_for_golden_rotation():
    sol = solve_homology(default_q_hat(), GOLDEN, 64)
    assert sol.residual() <= 1e-10
    assert sol.min_denominator > 0


def test_homology_resonance_only_matters_where_q_is_nonzero():
    with pytest.raises(ResonanceError):
        solve_homology(lacunary_q_hat((2,), (0.5,)), 0.5, 4)
    sol = solve_homology(lacunary_q_hat((1,), (0.5,)), 0.5, 4)
    assert sol.residual() <= 1e-12


def test_homology_requires_unit_mean():
    hat = lacunary_q_hat((1,), (0.5,))
    with pytest.raises(ParameterError):
        solve_homology(2.0 * hat, GOLDEN, 4)


def test_default_spec_parameters():
    spec = TimeChangedFlowSpec.default()
    assert spec.min_Q >= 0.3 - 1e-9
    assert 0 < spec.m < spec.min_Q
    assert spec.q_band == 64
    assert spec.Psi(np.array([0.0, 1.0])).tolist() == pytest.approx([0.0, 1.0])
    ys = np.linspace(0.0, 1.0, 200001)
    assert np.trapz(spec.psi(ys), ys) == pytest.approx(1.0, abs=1e-6)


def test_spec_rejects_bad_m():
    with pytest.raises(ParameterError):
        TimeChangedFlowSpec(alpha=GOLDEN, Q_hat=default_q_hat(), m=1.5)


def test_density_is_positive_with_unit_mean():
    F = build_density_F(TimeChangedFlowSpec.default(), 128)
    assert F.min() > 0
    assert F.mean() == pytest.approx(1.0, abs=1e-10)
    with pytest.raises(SizeError):
        build_density_F(TimeChangedFlowSpec.default(), 4)


def test_relabel_of_uniform_density_is_identity():
    n = 32
    flow = relabel_from_density(np.ones((n, n)), GOLDEN, 4)
    nodes = np.arange(n) / n
    np.testing.assert_allclose(flow.zmap.forward_p, nodes, atol=1e-12)
    np.testing.assert_allclose(flow.zmap.x_of_p, nodes, atol=1e-12)
    np.testing.assert_allclose(flow.zmap.y_of_pq, np.tile(nodes, (n, 1)), atol=1e-12)
    u1, u2 = flow.velocity.mean_flow()
    assert u1 == pytest.approx(GOLDEN, abs=1e-12)
    assert u2 == pytest.approx(1.0, abs=1e-12)
    assert flow.zmap.measure_defect() <= 1e-10


def test_relabel_rejects_small_grid_and_bad_mass():
    with pytest.raises(SizeError):
        relabel_from_density(np.ones((8, 8)), GOLDEN, 4)
    with pytest.raises(ParameterError):
        relabel_from_density(2.0 * np.ones((16, 16)), GOLDEN, 4)


def test_relabeled_time_changed_flow_is_divergence_free_and_converges():
    spec = TimeChangedFlowSpec.default(alpha=GOLDEN)
    coarse = relabel_to_lebesgue(spec, 128, 8)
    fine = relabel_to_lebesgue(spec, 256, 8)
    assert fine.divergence_after <= 1e-10
    assert fine.divergence_before > fine.divergence_after
    assert fine.zmap.measure_defect() < coarse.zmap.measure_defect()
    assert fine.zmap.measure_defect() <= 1e-3


def test_skew_coordinates_straighten_the_flow():
    spec = TimeChangedFlowSpec.default(alpha=GOLDEN)
    rng = np.random.default_rng(4)
    x = rng.uniform(0.0, 1.0, 16)
    y = rng.uniform(0.2, 0.8, 16)
    F = spec.F(x, y)
    w1, w2 = spec.alpha / F, 1.0 / F
    h = 1e-6
    Xp, Yp = skew_coordinates(spec, x + h * w1, y + h * w2)
    Xm, Ym = skew_coordinates(spec, x - h * w1, y - h * w2)
    np.testing.assert_allclose((Yp - Ym) / (2 * h), 1.0, atol=1e-6)
    np.testing.assert_allclose((Xp - Xm) / (2 * h), spec.alpha, atol=1e-6)


def test_stream_function_flows():
    cell = stream_function_flow("cellular", 3)
    assert cell.divergence_norm() <= 1e-10
    assert cell.reality_defect() <= 1e-12
    with pytest.raises(ParameterError):
        stream_function_flow("custom", 3)
    with pytest.raises(ParameterError):
        stream_function_flow("vortex", 3)
    custom = stream_function_flow("custom", 2, psi_s=lambda X, Y: np.sin(2 * np.pi * X) / (2 * np.pi))
    _, u2 = custom.grid(16)
    X = np.arange(16)[:, None] / 16 * np.ones((1, 16))
    np.testing.assert_allclose(u2, -np.cos(2 * np.pi * X), atol=1e-12)
