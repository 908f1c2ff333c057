import math

import numpy as np
import pytest

from services.diagnostics import (
    band_selector,
    check_amplitude_grid,
    decay_curve,
    dissipation_time,
    eigenreport,
    h1_growth_average,
    nash_exponent_fit,
    nash_run,
    nearest_eigenvector,
    obstruction_certificate,
    rage_average,
    spectral_delta,
)
from services.errors import DimensionError, ParameterError, PreconditionError, WindowError
from services.operators import (
    build_constant_flow_generator,
    build_free_jacobi,
    build_wvn_schrodinger,
    project_out_band_exterior,
)
from services.spectral import GammaLadder, SpectralState, basis_vector

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _free(N):
    return build_free_jacobi(N).handle(), GammaLadder.diagonal(N)


def _random_state(N, rng):
    c = rng.standard_normal(N) + 1j * rng.standard_normal(N)
    return SpectralState(c, f"abstract-{N}").normalized()


def _torus_mode(L, k):
    return basis_vector(L.dim, L.lattice.index_of(k) + 1, L.basis)


# -----------------------------
# Время диссипации
# -----------------------------
@pytest.mark.parametrize("j", [1, 3])
def test_heat_dissipation_time_is_log_two_over_lambda(j):
    L, ladder = _free(8)
    res = dissipation_time(L, ladder, 0.0, 0.5, basis_vector(8, j, L.basis), t_max=2.0, dt=0.01)
    assert res.reached
    assert res.tau == pytest.approx(math.log(2.0) / j, rel=1e-9)


def test_unreached_threshold_is_not_an_error():
    L, ladder = _free(8)
    res = dissipation_time(L, ladder, 0.0, 0.5, basis_vector(8, 1, L.basis), t_max=0.5, dt=0.01)
    assert not res.reached
    assert res.tau is None
    assert res.t_max == 0.5


def test_dissipation_time_rejects_bad_delta():
    L, ladder = _free(8)
    with pytest.raises(ParameterError):
        dissipation_time(L, ladder, 1.0, 1.0, basis_vector(8, 1, L.basis), t_max=1.0, dt=0.1)


def test_amplitude_grid_validation():
    assert check_amplitude_grid([0, 1, 10]) == (0.0, 1.0, 10.0)
    for bad in ([], [-1.0, 1.0], [1.0, 1.0], [2.0, 1.0]):
        with pytest.raises(ParameterError):
            check_amplitude_grid(bad)


def test_stirring_speeds_up_dissipation():
    N = 64
    L, ladder = _free(N)
    curve = decay_curve(L, ladder, (1.0, 10.0, 100.0), 0.5, basis_vector(N, 1, L.basis),
                        t_max=5.0, dt=1e-2, method="dense-oracle")
    assert curve.reached.all()
    taus = curve.taus
    # e_1 — самая медленная мода, поэтому τ(A) ≤ ln 2 при любом A
    assert np.all(taus <= math.log(2.0) + 1e-9)
    assert taus[2] < taus[0] / 2.0
    assert curve.rows()[0][2] == 1


# -----------------------------
# Сертификат препятствия
# -----------------------------
def test_certificate_for_constant_flow_mode():
    L = build_constant_flow_generator((GOLDEN, math.sqrt(2.0)), 4)
    ladder = GammaLadder.torus(L.lattice)
    cert = obstruction_certificate(L, ladder, _torus_mode(L, (1, 0)), (1.0, 10.0, 100.0, 1e3, 1e4),
                                   method="eigsplit")
    assert cert.passed
    assert cert.tau_star == pytest.approx(1.0 / (8.0 * math.pi**2), rel=1e-12)
    assert cert.eigenvalue == pytest.approx(2.0 * math.pi * GOLDEN, rel=1e-12)
    assert cert.min_norm == pytest.approx(math.exp(-0.5), rel=1e-9)
    assert cert.min_overlap >= 0.5


def test_certificate_on_projected_wvn_eigenvector():
    N = 128
    system = project_out_band_exterior(build_wvn_schrodinger(N), GammaLadder.diagonal(N))
    L = system.operator
    w = nearest_eigenvector(L, basis_vector(L.dim, 1, L.basis))
    cert = obstruction_certificate(L, system.ladder, w, (1.0, 100.0, 1e4), n_samples=16)
    assert cert.residual <= 1e-8
    assert cert.passed
    assert all(n >= 0.5 - 1e-9 for n in cert.final_norms)


def test_certificate_preconditions():
    L, ladder = _free(8)
    with pytest.raises(PreconditionError):
        obstruction_certificate(L, ladder, basis_vector(8, 1, L.basis), (1.0,))
    C = build_constant_flow_generator((1.0, 0.0), 2)
    mode = _torus_mode(C, (1, 0))
    with pytest.raises(PreconditionError):
        obstruction_certificate(C, GammaLadder.torus(C.lattice), SpectralState(2.0 * mode.coeffs, C.basis), (1.0,))


# -----------------------------
# Отчёт о спектре
# -----------------------------
def test_eigenreport_of_free_jacobi():
    L, ladder = _free(16)
    report = eigenreport(L, ladder)
    assert len(report.records) == 16
    assert report.mask("band_interior").all()
    assert not report.mask("rough").any()
    assert not report.mask("first_integral").any()
    # у свободной матрицы ‖w_j‖₁² = (N+1)/2 для всех j
    np.testing.assert_allclose([r.h1_norm for r in report.records], math.sqrt(8.5), rtol=1e-10)


def test_eigenvector_roughness_grows_with_n():
    mins = []
    for N in (64, 128, 256, 512):
        L, ladder = _free(N)
        report = eigenreport(L, ladder)
        mins.append(min(r.h1_norm**2 for r in report.records))
        assert mins[-1] > N / 4
    assert all(b >= a for a, b in zip(mins, mins[1:]))


def test_eigenreport_finds_first_integrals_of_constant_flow():
    L = build_constant_flow_generator((1.0, 0.0), 2)
    report = eigenreport(L, GammaLadder.torus(L.lattice))
    assert int(report.mask("first_integral").sum()) == 4
    assert report.band is None


def test_eigenreport_checks_ladder_size():
    L, _ = _free(8)
    with pytest.raises(DimensionError):
        eigenreport(L, GammaLadder.diagonal(9))


# -----------------------------
# Средние по времени
# -----------------------------
def test_rage_average_short_time_is_low_mode_mass():
    L, _ = _free(16)
    phi = basis_vector(16, 1, L.basis)
    assert rage_average(L, phi, 8, 1e-9) == pytest.approx(1.0, abs=1e-6)
    assert rage_average(L, phi, 8, 1.0, selector=np.zeros(16, dtype=bool)) == 0.0


def test_rage_average_long_time_approaches_diagonal_limit(rng):
    N, n_low = 32, 8
    L, _ = _free(N)
    phi = _random_state(N, rng)
    comps = L.eig.group_components(phi.coeffs, rows=n_low)
    limit = float(np.sum(np.abs(comps) ** 2))
    assert rage_average(L, phi, n_low, 1e6) == pytest.approx(limit, abs=1e-2)


def test_band_selector_keeps_full_state():
    L, _ = _free(16)
    phi = basis_vector(16, 2, L.basis)
    full = band_selector(L, -2.0, 2.0)
    assert full.all()
    assert rage_average(L, phi, 16, 3.0, selector=full) == pytest.approx(1.0, abs=1e-12)


def test_h1_growth_average(rng):
    N, n_low = 32, 8
    L, ladder = _free(N)
    phi = _random_state(N, rng)
    short = h1_growth_average(L, ladder, phi, n_low, 1e-9)
    direct = float(np.sum(ladder.lambdas[:n_low] * np.abs(phi.coeffs[:n_low]) ** 2))
    assert short.value == pytest.approx(direct, rel=1e-6)
    long = h1_growth_average(L, ladder, phi, n_low, 1e6)
    assert abs(long.remainder) <= 0.05
    assert abs(long.remainder) <= long.apriori_bound
    assert long.limit > 0


def test_time_averages_validate_arguments():
    L, ladder = _free(16)
    phi = basis_vector(16, 1, L.basis)
    with pytest.raises(ParameterError):
        rage_average(L, phi, 8, 0.0)
    with pytest.raises(DimensionError):
        h1_growth_average(L, ladder, phi, 17, 1.0)


# -----------------------------
# Неравенство Нэша
# -----------------------------
def test_nash_exponent_of_pure_heat_is_close_to_one():
    K = 32
    L = build_constant_flow_generator((0.0, 0.0), K)
    ladder = GammaLadder.torus(L.lattice)
    times = np.geomspace(1e-4, 1e-2, 13)
    run = nash_run(L, ladder, L.lattice, 0.0, spectral_delta(L.lattice), times, dt=1e-4)
    assert np.all(np.diff(run.sup_norms) < 0)
    fit = nash_exponent_fit(run, (1e-4, 1e-2))
    assert 0.95 <= fit.power <= 1.10
    assert fit.n_points == 13
    assert fit.max_excess >= 1.0
    with pytest.raises(WindowError):
        nash_exponent_fit(run, (1e-5, 1e-2))


def test_nash_run_rejects_bad_times():
    L = build_constant_flow_generator((0.0, 0.0), 4)
    ladder = GammaLadder.torus(L.lattice)
    with pytest.raises(ParameterError):
        nash_run(L, ladder, L.lattice, 0.0, spectral_delta(L.lattice), [0.1, 0.05], dt=1e-2)
