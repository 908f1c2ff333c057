import math

import numpy as np
import pytest

from services.errors import BasisMismatchError, DimensionError, ParameterError
from services.spectral import (
    GammaLadder,
    ModeProjection,
    SpectralState,
    basis_vector,
    inner_product,
    project_low_modes,
    sobolev_norm,
    weighted_sq,
)
from services.torus import TorusLattice


def test_diagonal_ladder_values():
    assert GammaLadder.diagonal(4).lambdas.tolist() == [1.0, 2.0, 3.0, 4.0]
    sq = GammaLadder.diagonal(4, power=2.0)
    assert sq.lambdas.tolist() == [1.0, 4.0, 9.0, 16.0]
    assert sq.label != GammaLadder.diagonal(4).label


def test_ladder_rejects_bad_values():
    with pytest.raises(ParameterError):
        GammaLadder(np.array([0.0, 1.0]), "zero")
    with pytest.raises(ParameterError):
        GammaLadder(np.array([2.0, 1.0]), "decreasing")


def test_torus_ladder_first_shells():
    ladder = GammaLadder.torus(TorusLattice(1))
    expected = 4 * math.pi**2 * np.array([1, 1, 1, 1, 2, 2, 2, 2], dtype=float)
    np.testing.assert_allclose(ladder.lambdas, expected)


def test_sobolev_norms():
    ladder = GammaLadder.diagonal(2)
    state = SpectralState(np.array([1.0, 1.0]), "abstract-2")
    assert sobolev_norm(state, ladder, 1.0) == pytest.approx(math.sqrt(3.0))
    assert sobolev_norm(state, ladder, 0.0) == pytest.approx(math.sqrt(2.0))
    assert sobolev_norm(state, ladder, -1.0) == pytest.approx(math.sqrt(1.5))
    assert weighted_sq(state.coeffs, ladder) == pytest.approx(3.0)
    with pytest.raises(ParameterError):
        sobolev_norm(state, ladder, 3.0)


def test_project_low_modes():
    state = SpectralState(np.arange(1, 6, dtype=float), "abstract-5")
    low = project_low_modes(state, ModeProjection(2))
    assert low.coeffs.tolist() == [1, 2, 0, 0, 0]
    with pytest.raises(DimensionError):
        project_low_modes(state, ModeProjection(6))
    with pytest.raises(ParameterError):
        ModeProjection(0)


def test_inner_product_conjugates_first_argument():
    a = SpectralState(np.array([1j, 0.0]), "abstract-2")
    b = SpectralState(np.array([1.0, 0.0]), "abstract-2")
    assert inner_product(a, b) == pytest.approx(-1j)
    with pytest.raises(BasisMismatchError):
        inner_product(a, SpectralState(np.array([1.0, 0.0]), "other"))


def test_basis_vector_is_one_based():
    e2 = basis_vector(3, 2, "abstract-3")
    assert e2.coeffs.tolist() == [0, 1, 0]
    with pytest.raises(DimensionError):
        basis_vector(3, 4, "abstract-3")
    with pytest.raises(DimensionError):
        basis_vector(3, 0, "abstract-3")


def test_state_json_keeps_mean_and_coefficients():
    state = SpectralState(np.array([1 + 2j, -0.5]), "torus-laplacian-1", mean=0.25)
    back = SpectralState.from_json(state.to_json())
    np.testing.assert_array_equal(back.coeffs, state.coeffs)
    assert back.mean == state.mean
    assert back.basis == state.basis


def test_normalized_zero_state_raises():
    with pytest.raises(ParameterError):
        SpectralState(np.zeros(3), "abstract-3").normalized()
