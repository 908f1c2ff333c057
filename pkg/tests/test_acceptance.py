import math

import numpy as np
import pytest

from dissipator.runner import build_initial, build_problem
from dissipator.schema import InitialSpec, LadderSpec, OperatorSpec
from services.diagnostics import decay_curve, obstruction_certificate
from services.operators import build_free_jacobi, build_wvn_schrodinger, wvn_zero_mode
from services.spectral import GammaLadder, basis_vector

pytestmark = pytest.mark.slow


def test_projected_wvn_zero_mode_certificate():
    op = OperatorSpec.from_dict({"type": "wvn-projected", "N": 512}, "operator")
    problem = build_problem(op, LadderSpec(), np.random.default_rng(0))
    phi0 = build_initial(InitialSpec(type="zero-mode"), problem, np.random.default_rng(0))
    cert = obstruction_certificate(problem.L, problem.ladder, phi0, (1.0, 10.0, 100.0, 1e3, 1e4), n_samples=16)
    assert cert.passed
    assert cert.min_norm >= 0.48


def test_wvn_zero_mode_at_full_size():
    N = 1000
    residual = build_wvn_schrodinger(N).apply(wvn_zero_mode(N).coeffs.real)
    assert np.max(np.abs(residual[: N - 2])) <= 1e-13


def test_free_jacobi_enhancement_trend():
    N = 256
    L = build_free_jacobi(N).handle()
    ladder = GammaLadder.diagonal(N)
    curve = decay_curve(L, ladder, (1.0, 10.0, 100.0, 1000.0), 0.5, basis_vector(N, 1, L.basis),
                        t_max=5.0, dt=1e-2, method="dense-oracle")
    taus = curve.taus
    assert curve.reached.all()
    assert np.all(np.diff(taus) <= 0)
    assert taus[-1] <= taus[0] / 10.0
    assert taus[0] <= math.log(2.0) + 1e-9
