from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from services.engine import SemigroupStepper, propagate
from services.errors import (
    CapabilityError,
    DimensionError,
    ParameterError,
    PreconditionError,
    WindowError,
)
from services.operators import OperatorHandle
from services.spectral import GammaLadder, ModeProjection, SpectralState
from services.torus import TorusLattice

logger = logging.getLogger(__name__)

BISECT_RTOL = 1e-3
ROUGHNESS_KAPPA = 4.0
FIRST_INTEGRAL_TOL = 1e-8
EIGEN_RESIDUAL_TOL = 1e-8
FIRST_INTEGRAL_KINDS = ("advection", "constant-flow")


# ---------------------------------------------------------------------------
# Время диссипации
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DissipationTime:
    """tau = None и reached = False — бюджет t_max исчерпан (не ошибка)."""

    tau: Optional[float]
    reached: bool
    t_max: float
    delta: float
    amplitude: float


def _norm(c: np.ndarray) -> float:
    return float(np.linalg.norm(c))


def _refine_crossing(
    stepper: SemigroupStepper,
    c: np.ndarray,
    t0: float,
    h: float,
    n_lo: float,
    n_hi: float,
    target: float,
    rtol: float,
) -> float:
    """Бисекция внутри шага [t0, t0 + h], затем лог-линейная интерполяция ‖φ‖."""
    lo, hi = 0.0, h
    while hi - lo > rtol * (t0 + hi):
        mid = 0.5 * (lo + hi)
        n_mid = _norm(stepper.step(c, mid))
        if n_mid <= target:
            hi, n_hi = mid, n_mid
        else:
            lo, n_lo = mid, n_mid
    if n_lo > 0 and n_hi > 0 and n_lo != n_hi:
        frac = math.log(n_lo / target) / math.log(n_lo / n_hi)
        frac = min(max(frac, 0.0), 1.0)
    else:
        frac = 1.0
    return t0 + lo + frac * (hi - lo)


def dissipation_time(
    L: OperatorHandle,
    ladder: GammaLadder,
    A: float,
    delta: float,
    phi0: SpectralState,
    t_max: float,
    dt: float,
    method: str = "eigsplit",
    rtol: float = BISECT_RTOL,
) -> DissipationTime:
    """Первое t с ‖φ^A(t)‖ ≤ δ‖φ₀‖."""
    if not 0.0 < delta < 1.0:
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")
    if t_max <= 0 or dt <= 0:
        raise ParameterError("t_max and dt must be positive")
    c = np.array(phi0.coeffs)
    n0 = _norm(c)
    if n0 == 0:
        raise ParameterError("initial state has zero norm")
    stepper = SemigroupStepper(L, ladder, A, 1.0, method)
    target = delta * n0

    t = 0.0
    n_prev = n0
    while t < t_max * (1.0 - 1e-12):
        h = min(dt, t_max - t)
        c_new = stepper.step(c, h)
        n_new = _norm(c_new)
        if n_new <= target:
            tau = _refine_crossing(stepper, c, t, h, n_prev, n_new, target, rtol)
            logger.debug("tau_delta=%.6g for A=%g (delta=%g, %s)", tau, A, delta, L.label)
            return DissipationTime(tau, True, t_max, delta, A)
        c, t, n_prev = c_new, t + h, n_new

    logger.warning("Dissipation threshold delta=%g not reached by t_max=%g at A=%g", delta, t_max, A)
    return DissipationTime(None, False, t_max, delta, A)


@dataclass(frozen=True)
class DecayCurve:
    amplitudes: Tuple[float, ...]
    points: Tuple[DissipationTime, ...]
    delta: float
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def taus(self) -> np.ndarray:
        return np.array([p.tau if p.reached else np.nan for p in self.points])

    @property
    def reached(self) -> np.ndarray:
        return np.array([p.reached for p in self.points])

    def rows(self) -> List[Tuple[float, Optional[float], int]]:
        return [(a, p.tau, int(p.reached)) for a, p in zip(self.amplitudes, self.points)]


def check_amplitude_grid(amplitudes: Sequence[float]) -> Tuple[float, ...]:
    grid = tuple(float(a) for a in amplitudes)
    if not grid:
        raise ParameterError("amplitude grid is empty")
    if any(a < 0 for a in grid):
        raise ParameterError("amplitudes must be >= 0")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ParameterError("amplitudes must be strictly increasing")
    return grid


def decay_curve(
    L: OperatorHandle,
    ladder: GammaLadder,
    amplitudes: Sequence[float],
    delta: float,
    phi0: SpectralState,
    t_max: float,
    dt: float,
    method: str = "eigsplit",
) -> DecayCurve:
    grid = check_amplitude_grid(amplitudes)
    points = tuple(dissipation_time(L, ladder, A, delta, phi0, t_max, dt, method) for A in grid)
    meta = {"operator": L.label, "ladder": ladder.label, "N": L.dim, "delta": delta, "method": method}
    return DecayCurve(grid, points, delta, meta)


# ---------------------------------------------------------------------------
# Сертификат препятствия: собственный вектор с конечной H¹-нормой
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObstructionCertificate:
    tau_star: float
    eigenvalue: float
    residual: float
    h1_norm: float
    amplitudes: Tuple[float, ...]
    final_norms: Tuple[float, ...]
    min_norm: float
    min_overlap: float
    passed: bool


def nearest_eigenvector(L: OperatorHandle, target: SpectralState) -> SpectralState:
    """Нормированный собственный вектор L с максимальным |⟨w, target⟩|, фаза выровнена по target."""
    eig = L.eig
    amps = eig.analyze(target.coeffs)
    j = int(np.argmax(np.abs(amps)))
    w = eig.vector(j)
    overlap = np.vdot(w, target.coeffs)
    phase = overlap / abs(overlap) if abs(overlap) > 0 else 1.0
    return SpectralState(w * phase, target.basis).normalized()


def obstruction_certificate(
    L: OperatorHandle,
    ladder: GammaLadder,
    phi0: SpectralState,
    amplitudes: Sequence[float],
    n_samples: int = 64,
    tol: float = 1e-9,
    method: str = "dense-oracle",
    dt: Optional[float] = None,
) -> ObstructionCertificate:
    """
    τ* = 1/(2‖φ₀‖₁²); для каждого A проверяет |⟨φ^A(t), φ₀⟩| ≥ 1/2 на сэмплах t ≤ τ*.
    """
    c0 = np.array(phi0.coeffs)
    if abs(_norm(c0) - 1.0) > 1e-10:
        raise PreconditionError(f"certificate needs a unit initial state, |phi0| = {_norm(c0):.12f}")
    Lc = L.apply_fn(c0)
    E = float(np.real(np.vdot(c0, Lc)))
    residual = _norm(Lc - E * c0)
    if residual > EIGEN_RESIDUAL_TOL:
        raise PreconditionError(f"initial state is not an eigenvector of {L.label}: residual {residual:.3e}")
    h1_sq = float(np.sum(ladder.lambdas * np.abs(c0) ** 2))
    tau = 1.0 / (2.0 * h1_sq)
    h = tau / n_samples

    grid = tuple(float(a) for a in amplitudes)
    finals: List[float] = []
    min_overlap = math.inf
    for A in grid:
        stepper = SemigroupStepper(L, ladder, A, 1.0, method)
        c = c0
        for _ in range(n_samples):
            if dt is None:
                c = stepper.step(c, h)
            else:
                c = propagate(L, ladder, A, 1.0, c, h, dt, method, stepper=stepper)
            min_overlap = min(min_overlap, abs(np.vdot(c0, c)))
        finals.append(_norm(c))

    passed = min_overlap >= 0.5 - tol
    cert = ObstructionCertificate(
        tau_star=tau,
        eigenvalue=E,
        residual=residual,
        h1_norm=math.sqrt(h1_sq),
        amplitudes=grid,
        final_norms=tuple(finals),
        min_norm=min(finals) if finals else math.nan,
        min_overlap=min_overlap,
        passed=passed,
    )
    logger.info(
        "Obstruction certificate for %s: tau*=%.6g, min |phi(tau*)|=%.6f, min overlap=%.6f, passed=%s",
        L.label, tau, cert.min_norm, min_overlap, passed,
    )
    return cert


# ---------------------------------------------------------------------------
# Отчёт о спектре
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EigenRecord:
    j: int
    energy: float
    h1_norm: float
    band_interior: bool
    rough: bool
    first_integral: bool


@dataclass(frozen=True)
class SpectralReport:
    operator: str
    records: Tuple[EigenRecord, ...]
    groups: Tuple[Tuple[int, ...], ...]
    band: Optional[Tuple[float, float]]
    kappa: float
    roughness_threshold: float

    def mask(self, flag: str) -> np.ndarray:
        return np.array([getattr(r, flag) for r in self.records], dtype=bool)

    def rows(self) -> List[Tuple[int, float, float, int]]:
        return [(r.j, r.energy, r.h1_norm, int(r.band_interior)) for r in self.records]


def default_band(L: OperatorHandle) -> Optional[Tuple[float, float]]:
    return (-2.0, 2.0) if L.kind in ("jacobi", "projected") else None


def eigenreport(
    L: OperatorHandle,
    ladder: GammaLadder,
    band: Optional[Tuple[float, float]] = None,
    kappa: float = ROUGHNESS_KAPPA,
    first_integral_tol: float = FIRST_INTEGRAL_TOL,
) -> SpectralReport:
    if L.dim != ladder.size:
        raise DimensionError(f"operator dim {L.dim} vs ladder size {ladder.size}")
    if not L.has_eig:
        raise CapabilityError(f"eigenreport needs the dense track for {L.label}")
    eig = L.eig
    band = band if band is not None else default_band(L)
    h1 = eig.weighted_column_norms(ladder.lambdas)
    threshold = kappa * float(np.median(h1**2))
    detect = L.kind in FIRST_INTEGRAL_KINDS

    records = []
    for j, (E, norm1) in enumerate(zip(eig.values, h1)):
        interior = True if band is None else bool(band[0] <= E <= band[1])
        records.append(
            EigenRecord(
                j=j + 1,
                energy=float(E),
                h1_norm=float(norm1),
                band_interior=interior,
                rough=bool(norm1**2 > threshold),
                first_integral=bool(detect and abs(E) <= first_integral_tol),
            )
        )
    groups = tuple(tuple(int(i) for i in g) for g in eig.groups)
    report = SpectralReport(L.label, tuple(records), groups, band, kappa, threshold)
    logger.info(
        "Eigenreport %s: %d eigenpairs, %d rough, %d first integrals",
        L.label, len(records), int(report.mask("rough").sum()), int(report.mask("first_integral").sum()),
    )
    return report


def band_selector(L: OperatorHandle, lo: float, hi: float) -> np.ndarray:
    E = L.eig.values
    return (E >= lo) & (E <= hi)


def rough_selector(report: SpectralReport) -> np.ndarray:
    return report.mask("rough")


def select(L: OperatorHandle, mask: Optional[np.ndarray], c: np.ndarray) -> np.ndarray:
    """P_sel c по маске собственных векторов (None — всё пространство)."""
    if mask is None:
        return np.array(c, dtype=complex)
    eig = L.eig
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (eig.size,):
        raise DimensionError(f"selector has shape {mask.shape}, expected ({eig.size},)")
    return eig.synthesize(eig.analyze(c) * mask)


# ---------------------------------------------------------------------------
# Средние по времени (RAGE и рост H¹)
# ---------------------------------------------------------------------------


def sinc_average(omega: np.ndarray) -> np.ndarray:
    """(e^{iω} − 1)/(iω) с доопределением 1 в нуле."""
    return np.exp(0.5j * omega) * np.sinc(omega / (2.0 * np.pi))


def _time_average(
    values: np.ndarray, comps: np.ndarray, weights: Optional[np.ndarray], T: float
) -> Tuple[float, float]:
    active = np.flatnonzero(np.any(comps != 0, axis=1))
    if active.size == 0:
        return 0.0, 0.0
    X = comps[active]
    E = values[active]
    W = X if weights is None else X * weights[None, :]
    gram = W.conj() @ X.T
    S = sinc_average((E[None, :] - E[:, None]) * T)
    value = float(np.real(np.sum(S * gram)))
    limit = float(np.real(np.trace(gram)))
    return value, limit


def _check_averaging(L: OperatorHandle, c: np.ndarray, n_low: int, T: float) -> ModeProjection:
    if not L.has_eig:
        raise CapabilityError(f"time averages need an eigendecomposition of {L.label}")
    if T <= 0:
        raise ParameterError(f"averaging time must be positive, got {T}")
    p = ModeProjection(n_low)
    if n_low > c.size:
        raise DimensionError(f"cutoff {n_low} exceeds state size {c.size}")
    return p


def rage_average(
    L: OperatorHandle,
    phi: SpectralState,
    n_low: int,
    T: float,
    selector: Optional[np.ndarray] = None,
) -> float:
    """(1/T)∫₀^T ‖P_N e^{iLt} P_sel φ‖² dt точной суммой по парам собственных групп."""
    c = np.array(phi.coeffs)
    _check_averaging(L, c, n_low, T)
    psi = select(L, selector, c)
    comps = L.eig.group_components(psi, rows=n_low)
    value, _ = _time_average(L.eig.group_values, comps, None, T)
    return value


@dataclass(frozen=True)
class H1GrowthAverage:
    value: float
    limit: float
    remainder: float
    apriori_bound: float
    T: float
    n_low: int


def h1_growth_average(
    L: OperatorHandle,
    ladder: GammaLadder,
    phi: SpectralState,
    n_low: int,
    T: float,
) -> H1GrowthAverage:
    """
    (1/T)∫₀^T ‖P_N e^{iLt} φ‖₁² dt, его предел Σ_j ‖P_N Q_j φ‖₁², остаток вне диагонали
    и априорная оценка λ_N·N·‖φ‖².
    """
    c = np.array(phi.coeffs)
    _check_averaging(L, c, n_low, T)
    comps = L.eig.group_components(c, rows=n_low)
    value, limit = _time_average(L.eig.group_values, comps, ladder.low_block(n_low), T)
    bound = float(ladder.lambdas[n_low - 1] * n_low * np.sum(np.abs(c) ** 2))
    return H1GrowthAverage(value, limit, value - limit, bound, float(T), int(n_low))


# ---------------------------------------------------------------------------
# Неравенство Нэша на торе
# ---------------------------------------------------------------------------


def spectral_delta(lattice: TorusLattice, center: Tuple[float, float] = (0.0, 0.0)) -> SpectralState:
    """Ограниченная по полосе δ_{x0} без средней моды: c_k = e^{2πik·x0}."""
    phases = np.exp(2j * np.pi * (lattice.modes @ np.asarray(center, dtype=float)))
    return SpectralState(phases, lattice.label)


@dataclass(frozen=True, eq=False)
class NashRun:
    times: np.ndarray
    sup_norms: np.ndarray
    ratios: np.ndarray
    l1_initial: float
    amplitude: float
    grid: int


def grid_values(lattice: TorusLattice, state: SpectralState, M: int) -> np.ndarray:
    return lattice.to_grid(state.coeffs, state.mean, M)


def nash_run(
    L: OperatorHandle,
    ladder: GammaLadder,
    lattice: TorusLattice,
    A: float,
    phi0: SpectralState,
    times: Sequence[float],
    dt: float,
    method: str = "eigsplit",
    grid: Optional[int] = None,
) -> NashRun:
    """‖φ^A(t)‖_∞ / ‖φ₀‖_{L¹} на возрастающих моментах times (sup по сетке ≥ 3K)."""
    times = np.asarray(times, dtype=float)
    if times.size == 0 or np.any(times <= 0) or np.any(np.diff(times) <= 0):
        raise ParameterError("sample times must be positive and strictly increasing")
    M = lattice.grid_size(requested=grid)
    l1 = float(np.mean(np.abs(grid_values(lattice, phi0, M))))
    if l1 == 0:
        raise ParameterError("initial state vanishes on the grid")
    stepper = SemigroupStepper(L, ladder, A, 1.0, method)

    sups = np.empty(times.size)
    state = phi0
    t_prev = 0.0
    for i, t in enumerate(times):
        state = propagate(L, ladder, A, 1.0, state, t - t_prev, dt, method, stepper=stepper)
        sups[i] = float(np.max(np.abs(grid_values(lattice, state, M))))
        t_prev = t
    return NashRun(times, sups, sups / l1, l1, float(A), M)


@dataclass(frozen=True)
class NashFit:
    power: float
    constant: float
    envelope_constant: float
    max_excess: float
    window: Tuple[float, float]
    n_points: int


def nash_exponent_fit(run: NashRun, window: Tuple[float, float]) -> NashFit:
    """Наклон МНК log(ratio) против log t: ratio ≈ C t^{−p}."""
    t_a, t_b = window
    lo, hi = float(run.times[0]), float(run.times[-1])
    if not t_a < t_b or t_a < lo * (1 - 1e-12) or t_b > hi * (1 + 1e-12):
        raise WindowError(f"window [{t_a}, {t_b}] outside sampled range [{lo}, {hi}]")
    sel = (run.times >= t_a * (1 - 1e-12)) & (run.times <= t_b * (1 + 1e-12))
    if int(sel.sum()) < 2:
        raise WindowError(f"window [{t_a}, {t_b}] holds fewer than two samples")
    if np.any(run.ratios[sel] <= 0):
        raise WindowError("nonpositive sup-norm ratio inside the window")
    x = np.log(run.times[sel])
    y = np.log(run.ratios[sel])
    slope, intercept = np.polyfit(x, y, 1)
    p = -float(slope)
    C = float(math.exp(intercept))
    scaled = run.ratios[sel] * run.times[sel] ** p
    return NashFit(
        power=p,
        constant=C,
        envelope_constant=float(np.max(scaled)),
        max_excess=float(np.max(scaled / C)),
        window=(float(t_a), float(t_b)),
        n_points=int(sel.sum()),
    )
