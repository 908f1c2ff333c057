from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import cumulative_trapezoid

from services.engine import SemigroupStepper
from services.errors import BlowUpError, CapabilityError, ParameterError, PreconditionError
from services.operators import (
    OperatorHandle,
    VelocityField,
    build_advection_generator,
    build_constant_flow_generator,
)
from services.spectral import GammaLadder
from services.torus import TorusLattice, collocation_points

logger = logging.getLogger(__name__)

THETA0_DEFAULT = 0.5
RANGE_TOL = 1e-12
COMPARISON_SLACK = 1e-8
FINALITY_SLACK = 1e-8
SEARCH_GRID = (0.0, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0)


# ---------------------------------------------------------------------------
# Нелинейность зажигания
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IgnitionNonlinearity:
    """
    f(T) = scale · 4(T − θ₀)(1 − T)/(1 − θ₀)² на [θ₀, 1], 0 на [0, θ₀].

    При scale = 1 максимум f равен 1 и достигается в (1 + θ₀)/2.
    """

    theta0: float = THETA0_DEFAULT
    scale: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.theta0 < 1.0:
            raise ParameterError(f"theta0 must lie in (0, 1), got {self.theta0}")
        if self.scale < 0:
            raise ParameterError(f"reaction scale must be >= 0, got {self.scale}")

    @property
    def lipschitz(self) -> float:
        return self.scale * 4.0 / (1.0 - self.theta0)

    @property
    def active(self) -> bool:
        return self.scale > 0

    def rate(self, T: np.ndarray) -> np.ndarray:
        """Формула без проверки диапазона (подшаги RK4)."""
        T = np.asarray(T, dtype=float)
        th = self.theta0
        return np.where(T > th, self.scale * 4.0 * (T - th) * (1.0 - T) / (1.0 - th) ** 2, 0.0)


def ignition_eval(f: IgnitionNonlinearity, T: float) -> float:
    if not -RANGE_TOL <= T <= 1.0 + RANGE_TOL:
        raise ParameterError(f"temperature {T} outside [0, 1]")
    return float(f.rate(min(max(T, 0.0), 1.0)))


# ---------------------------------------------------------------------------
# Система и состояние
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ReactionSystem:
    lattice: TorusLattice
    ladder: GammaLadder
    generator: OperatorHandle
    grid: int
    method: str = "eigsplit"
    label: str = "still"

    @classmethod
    def build(
        cls,
        u: Optional[VelocityField],
        K: int,
        grid: Optional[int] = None,
        method: Optional[str] = None,
    ) -> "ReactionSystem":
        """
        method=None: eigsplit, если у генератора есть спектральное разложение, иначе strang-rk4.
        """
        lattice = TorusLattice(K)
        ladder = GammaLadder.torus(lattice)
        if u is None:
            L = build_constant_flow_generator((0.0, 0.0), K)
            M = lattice.grid_size(None, grid)
            label = "still"
        else:
            L = build_advection_generator(u, K)
            M = lattice.grid_size(u.K, grid)
            label = u.label
        if method is None:
            method = "eigsplit" if L.has_eig else "strang-rk4"
            logger.debug("Reaction stepper for %s (dim %d): %s", label, L.dim, method)
        elif method == "eigsplit" and not L.has_eig:
            raise CapabilityError(
                f"quench method eigsplit needs an eigendecomposition, but {L.label} has dim {L.dim}; "
                "use strang-rk4 or leave method unset"
            )
        return cls(lattice, ladder, L, M, method, label)


@dataclass(frozen=True, eq=False)
class ReactionState:
    """Спектральные коэффициенты (мастер-копия) и значения на сетке коллокации."""

    coeffs: np.ndarray
    mean: float
    values: np.ndarray

    @property
    def sup(self) -> float:
        return float(self.values.max())


def check_range(values: np.ndarray, tol: float = RANGE_TOL, hint: str = "reduce dt") -> np.ndarray:
    """Выход за [0, 1] не более tol обрезается, больший — BlowUpError (hint — в сообщение)."""
    lo, hi = float(values.min()), float(values.max())
    if lo < -tol or hi > 1.0 + tol:
        raise BlowUpError(f"temperature left [0, 1]: min {lo:.3e}, max {hi:.15f}; {hint}")
    if lo < 0.0 or hi > 1.0:
        return np.clip(values, 0.0, 1.0)
    return values


def state_from_spectral(
    system: ReactionSystem, coeffs: np.ndarray, mean: float, hint: str = "reduce dt"
) -> ReactionState:
    values = system.lattice.to_grid(coeffs, mean, system.grid).real
    return ReactionState(np.asarray(coeffs, dtype=complex), float(mean), check_range(values, hint=hint))


def state_from_grid(system: ReactionSystem, values: np.ndarray, hint: str = "reduce dt") -> ReactionState:
    coeffs, mean = system.lattice.from_grid(np.asarray(values, dtype=complex))
    return state_from_spectral(system, coeffs, mean.real, hint)


def bump_temperature(
    system: ReactionSystem,
    center: Tuple[float, float] = (0.5, 0.5),
    width: float = 0.1,
    amplitude: float = 0.9,
    background: float = 0.05,
    axis: Optional[str] = None,
) -> ReactionState:
    """
    T₀ = background + amplitude·exp(−d²/(2w²)), d — периодическое расстояние до center.
    axis="y" даёт профиль, зависящий только от y.
    """
    if width <= 0:
        raise ParameterError(f"bump width must be positive, got {width}")
    if background < 0 or background + amplitude > 1.0:
        raise ParameterError("bump must stay inside [0, 1]")
    X, Y = collocation_points(system.grid)
    dy = (Y - center[1] + 0.5) % 1.0 - 0.5
    if axis == "y":
        d_sq = dy**2
    elif axis is None:
        dx = (X - center[0] + 0.5) % 1.0 - 0.5
        d_sq = dx**2 + dy**2
    else:
        raise ParameterError(f"unknown bump axis {axis!r}")
    try:
        return state_from_grid(
            system, background + amplitude * np.exp(-0.5 * d_sq / width**2), hint="widen the bump or raise K"
        )
    except BlowUpError as e:
        # усечение до |k|_∞ ≤ K даёт осцилляции за пределами [0, 1]
        raise ParameterError(
            f"bump of width {width} is under-resolved at K={system.lattice.K}: {e}"
        ) from e


def uniform_temperature(system: ReactionSystem, value: float) -> ReactionState:
    if not 0.0 <= value <= 1.0:
        raise ParameterError(f"temperature {value} outside [0, 1]")
    return ReactionState(np.zeros(system.lattice.size, dtype=complex), float(value),
                         np.full((system.grid, system.grid), float(value)))


# ---------------------------------------------------------------------------
# Шаг реакции–диффузии–адвекции
# ---------------------------------------------------------------------------


def _reaction_rk4(values: np.ndarray, f: IgnitionNonlinearity, h: float) -> np.ndarray:
    k1 = f.rate(values)
    k2 = f.rate(values + 0.5 * h * k1)
    k3 = f.rate(values + 0.5 * h * k2)
    k4 = f.rate(values + h * k3)
    return values + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def react_step(
    system: ReactionSystem,
    state: ReactionState,
    f: IgnitionNonlinearity,
    dt: float,
    stepper: SemigroupStepper,
    reaction_scale: float = 1.0,
) -> ReactionState:
    """
    Стрэнг: ½ линейного шага, реакция dT/dt = f(T) по RK4 в узлах сетки, усечение
    обратно в полосу, ½ линейного шага. reaction_scale ≠ 1 — внесение неисправности.
    """
    c = stepper.step(state.coeffs, 0.5 * dt)
    if f.active and reaction_scale != 0:
        grid = check_range(system.lattice.to_grid(c, state.mean, system.grid).real)
        scaled = f if reaction_scale == 1.0 else IgnitionNonlinearity(f.theta0, f.scale * reaction_scale)
        reacted = _reaction_rk4(grid, scaled, dt)
        c, mean = system.lattice.from_grid(reacted.astype(complex))
        mean = mean.real
    else:
        mean = state.mean
    c = stepper.step(c, 0.5 * dt)
    return state_from_spectral(
        system, c, mean, hint=f"reacted profile is under-resolved at K={system.lattice.K}; raise K or reduce dt"
    )


@dataclass(frozen=True, eq=False)
class ReactionRun:
    times: np.ndarray
    sup_T: np.ndarray
    min_T: np.ndarray
    int_T: np.ndarray
    int_f: np.ndarray
    fields: Optional[List[np.ndarray]]
    amplitude: float
    theta0: float
    final: ReactionState


def run_reaction(
    system: ReactionSystem,
    T0: ReactionState,
    A: float,
    f: IgnitionNonlinearity,
    t_end: float,
    dt: float,
    sample_stride: int = 1,
    store_fields: bool = False,
    reaction_scale: float = 1.0,
    stop_when_quenched: bool = False,
) -> ReactionRun:
    if dt <= 0 or t_end < 0:
        raise ParameterError("dt must be positive and t_end nonnegative")
    stepper = SemigroupStepper(system.generator, system.ladder, A, 1.0, system.method)
    n = max(1, int(round(t_end / dt))) if t_end > 0 else 0
    h = t_end / n if n else 0.0

    times: List[float] = []
    sups: List[float] = []
    mins: List[float] = []
    ints: List[float] = []
    reacts: List[float] = []
    fields: Optional[List[np.ndarray]] = [] if store_fields else None

    def record(t: float, s: ReactionState) -> None:
        times.append(t)
        sups.append(float(s.values.max()))
        mins.append(float(s.values.min()))
        ints.append(s.mean)
        reacts.append(float(np.mean(f.rate(s.values))))
        if fields is not None:
            fields.append(np.array(s.values))

    state = T0
    record(0.0, state)
    for i in range(1, n + 1):
        state = react_step(system, state, f, h, stepper, reaction_scale)
        if i % sample_stride == 0 or i == n:
            record(i * h, state)
            if stop_when_quenched and sups[-1] <= f.theta0:
                break

    return ReactionRun(
        times=np.array(times),
        sup_T=np.array(sups),
        min_T=np.array(mins),
        int_T=np.array(ints),
        int_f=np.array(reacts),
        fields=fields,
        amplitude=float(A),
        theta0=f.theta0,
        final=state,
    )


# ---------------------------------------------------------------------------
# Проверки и вердикты
# ---------------------------------------------------------------------------


def l1_balance_residual(run: ReactionRun) -> float:
    """max_t |∫T(t) − ∫T(0) − ∫₀^t ∫f(T) ds| / ∫T(0) (трапеции по сэмплам)."""
    if run.times.size < 2:
        return 0.0
    produced = cumulative_trapezoid(run.int_f, run.times, initial=0.0)
    ref = max(abs(run.int_T[0]), np.finfo(float).tiny)
    return float(np.max(np.abs(run.int_T - run.int_T[0] - produced)) / ref)


@dataclass(frozen=True)
class ComparisonCheck:
    passed: bool
    max_violation: float
    c: float


def comparison_bound_check(
    times: Sequence[float],
    T_fields: Sequence[np.ndarray],
    phi_fields: Sequence[np.ndarray],
    c: float,
    slack: float = COMPARISON_SLACK,
) -> ComparisonCheck:
    """T ≤ e^{ct} φ + slack во всех узлах и сэмплах."""
    if len(T_fields) != len(phi_fields) or len(T_fields) != len(times):
        raise ParameterError("reaction and linear trajectories must share samples")
    worst = -math.inf
    for t, T, phi in zip(times, T_fields, phi_fields):
        worst = max(worst, float(np.max(T - math.exp(c * t) * phi)))
    passed = worst <= slack
    return ComparisonCheck(passed, worst, float(c))


def compare_with_linear(
    system: ReactionSystem,
    T0: ReactionState,
    A: float,
    f: IgnitionNonlinearity,
    t_end: float,
    dt: float,
    c: Optional[float] = None,
    reaction_scale: float = 1.0,
) -> ComparisonCheck:
    """Запускает реакцию и линейную задачу из одних данных и сравнивает их."""
    hot = run_reaction(system, T0, A, f, t_end, dt, store_fields=True, reaction_scale=reaction_scale)
    cold = run_reaction(system, T0, A, IgnitionNonlinearity(f.theta0, 0.0), t_end, dt, store_fields=True)
    return comparison_bound_check(hot.times, hot.fields, cold.fields, f.lipschitz if c is None else c)


@dataclass(frozen=True)
class QuenchVerdict:
    quenched: bool
    t_quench: Optional[float]
    t_max: float
    final: bool


def quench_detector(run: ReactionRun, theta0: float) -> QuenchVerdict:
    hits = np.flatnonzero(run.sup_T <= theta0)
    t_max = float(run.times[-1])
    if hits.size == 0:
        return QuenchVerdict(False, None, t_max, True)
    i = int(hits[0])
    after = run.sup_T[i:]
    final = bool(np.all(np.diff(after) <= FINALITY_SLACK))
    return QuenchVerdict(True, float(run.times[i]), t_max, final)


@dataclass(frozen=True)
class CriticalAmplitude:
    """found = False — гашение не найдено до A_max (не ошибка)."""

    found: bool
    amplitude: Optional[float]
    burning_below: Optional[float]
    probes: Tuple[Tuple[float, bool], ...]


def critical_amplitude_search(
    system: ReactionSystem,
    f: IgnitionNonlinearity,
    T0: ReactionState,
    t_end: float,
    dt: float,
    A_max: float = 1000.0,
    grid: Sequence[float] = SEARCH_GRID,
    n_bisect: int = 6,
) -> CriticalAmplitude:
    """
    Первая найденная гасящая амплитуда: перебор по сетке, затем бисекция между
    последней горящей и первой гасящей точкой. Монотонность по A не предполагается.
    """
    if T0.mean >= f.theta0:
        raise PreconditionError(f"initial heat {T0.mean:.6g} must be below theta0 = {f.theta0}")
    probes: List[Tuple[float, bool]] = []

    def quenches(A: float) -> bool:
        run = run_reaction(system, T0, A, f, t_end, dt, stop_when_quenched=True)
        verdict = quench_detector(run, f.theta0).quenched
        probes.append((A, verdict))
        logger.debug("Quench probe A=%g: %s", A, "quenched" if verdict else "burning")
        return verdict

    if T0.sup <= f.theta0:
        return CriticalAmplitude(True, 0.0, None, ((0.0, True),))

    candidates = [a for a in grid if a <= A_max]
    prev: Optional[float] = None
    for A in candidates:
        if quenches(A):
            if prev is None:
                return CriticalAmplitude(True, A, None, tuple(probes))
            lo, hi = prev, A
            for _ in range(n_bisect):
                mid = math.sqrt(lo * hi) if lo > 0 else 0.5 * (lo + hi)
                if quenches(mid):
                    hi = mid
                else:
                    lo = mid
            logger.info("First quenching amplitude %.6g (burning at %.6g) for %s", hi, lo, system.label)
            return CriticalAmplitude(True, hi, lo, tuple(probes))
        prev = A

    logger.warning("No quenching up to A_max=%g for %s", A_max, system.label)
    return CriticalAmplitude(False, None, prev, tuple(probes))
