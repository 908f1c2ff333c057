from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import scipy.linalg

import dissipator.config as config
from services.errors import (
    CapabilityError,
    DimensionError,
    InvariantViolation,
    OracleSizeError,
    ParameterError,
    PreconditionError,
    StepSizeError,
)
from services.metrics import log_step_refined
from services.operators import OperatorHandle
from services.spectral import GammaLadder, SpectralState

logger = logging.getLogger(__name__)

METHODS = ("dense-oracle", "eigsplit", "strang-rk4")
GROWTH_BOUNDS = ("unity", "lipschitz-exp")

# Внутренний шаг RK4: |drive|·‖L‖·h ≤ RK4_CFL; рост нормы за шаг > 1 + RK4_GROWTH_TOL — ошибка.
RK4_CFL = 1.0
RK4_GROWTH_TOL = 1e-6

ADAPTIVE_TOL = 1e-7


def _check_oracle_size(n: int) -> None:
    if n > config.ORACLE_MAX_DIM:
        raise OracleSizeError(f"dense oracle limited to N <= {config.ORACLE_MAX_DIM}, got {n}")


# ---------------------------------------------------------------------------
# Конфиг и результаты
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvolutionConfig:
    """
    Параметры интегрирования. Задаётся ровно одно из amplitude (форма iAL − Γ)
    или epsilon (форма iL − εΓ); второе выводится как обратное.
    """

    t_end: float
    dt: float
    amplitude: Optional[float] = None
    epsilon: Optional[float] = None
    method: str = "eigsplit"
    sample_stride: int = 1
    growth_bound: str = "unity"
    growth_rate: float = 0.0
    adaptive: bool = False

    def __post_init__(self) -> None:
        if (self.amplitude is None) == (self.epsilon is None):
            raise ParameterError("exactly one of amplitude / epsilon must be given")
        if self.amplitude is not None and self.amplitude < 0:
            raise ParameterError(f"amplitude must be >= 0, got {self.amplitude}")
        if self.epsilon is not None and self.epsilon < 0:
            raise ParameterError(f"epsilon must be >= 0, got {self.epsilon}")
        if not self.dt > 0:
            raise ParameterError(f"dt must be positive, got {self.dt}")
        if self.t_end < 0:
            raise ParameterError(f"t_end must be >= 0, got {self.t_end}")
        if self.method not in METHODS:
            raise ParameterError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.sample_stride < 1:
            raise ParameterError(f"sample_stride must be >= 1, got {self.sample_stride}")
        if self.growth_bound not in GROWTH_BOUNDS:
            raise ParameterError(f"unknown growth bound {self.growth_bound!r}")

    @property
    def primary(self) -> str:
        return "amplitude" if self.amplitude is not None else "epsilon"

    @property
    def A(self) -> float:
        if self.amplitude is not None:
            return float(self.amplitude)
        return math.inf if self.epsilon == 0 else 1.0 / float(self.epsilon)

    @property
    def eps(self) -> float:
        if self.epsilon is not None:
            return float(self.epsilon)
        return math.inf if self.amplitude == 0 else 1.0 / float(self.amplitude)

    @property
    def drive(self) -> float:
        return float(self.amplitude) if self.amplitude is not None else 1.0

    @property
    def damping(self) -> float:
        return 1.0 if self.amplitude is not None else float(self.epsilon)

    @property
    def n_steps(self) -> int:
        if self.t_end == 0:
            return 0
        return max(1, int(round(self.t_end / self.dt)))


@dataclass(frozen=True, eq=False)
class EnergyLedger:
    """Сэмплы (t, ‖φ‖², ‖φ‖₁², накопленное 2·d·∫‖φ‖₁²), d — коэффициент при Γ."""

    times: np.ndarray
    l2_sq: np.ndarray
    h1_sq: np.ndarray
    dissipated: np.ndarray
    damping: float

    def residuals(self) -> np.ndarray:
        ref = self.l2_sq[0]
        return np.abs(self.l2_sq - ref + self.dissipated) / ref


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    norm_l2: np.ndarray
    norm_h1: np.ndarray
    norm_hminus1: np.ndarray
    sample_times: np.ndarray
    samples: List[SpectralState]
    ledger: EnergyLedger
    method: str
    dt: float
    final: SpectralState


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    detail: str = ""


# ---------------------------------------------------------------------------
# Шаговый оператор
# ---------------------------------------------------------------------------


class SemigroupStepper:
    """
    Шаг e^{h(i·drive·L − damping·Γ)}.

    dense-oracle — точная экспонента (Паде + scaling-and-squaring);
    eigsplit — Стрэнг: e^{−dΓh/2} · V e^{i·drive·E·h} V* · e^{−dΓh/2};
    strang-rk4 — тот же Стрэнг, унитарная часть RK4 с перенормировкой.
    """

    def __init__(
        self,
        L: OperatorHandle,
        ladder: GammaLadder,
        drive: float,
        damping: float,
        method: str,
        cfl: float = RK4_CFL,
    ) -> None:
        if L.dim != ladder.size:
            raise DimensionError(f"operator dim {L.dim} vs ladder size {ladder.size}")
        if method not in METHODS:
            raise ParameterError(f"unknown method {method!r}")
        if math.isinf(drive) or math.isinf(damping):
            raise ParameterError("drive and damping must be finite")
        self.L = L
        self.ladder = ladder
        self.drive = float(drive)
        self.damping = float(damping)
        self.method = method
        self.cfl = float(cfl)
        self._lam = ladder.lambdas
        self._oracle_cache: Dict[float, np.ndarray] = {}

        if method == "dense-oracle":
            _check_oracle_size(L.dim)
        if method == "eigsplit" and not L.has_eig:
            raise CapabilityError(f"eigsplit needs an eigendecomposition of {L.label}")

    def step(self, c: np.ndarray, h: float) -> np.ndarray:
        if h == 0:
            return c
        if self.method == "dense-oracle":
            return self._oracle_matrix(h) @ c
        c = self._heat(c, 0.5 * h)
        c = self.unitary(c, h)
        return self._heat(c, 0.5 * h)

    def unitary(self, c: np.ndarray, h: float) -> np.ndarray:
        """e^{i·drive·L·h} c."""
        if self.drive == 0 or h == 0:
            return c
        if self.method == "strang-rk4":
            return self._rk4_unitary(c, h)
        eig = self.L.eig
        amps = eig.analyze(c)
        return eig.synthesize(np.exp(1j * self.drive * eig.values * h) * amps)

    def _heat(self, c: np.ndarray, h: float) -> np.ndarray:
        if self.damping == 0:
            return c
        return np.exp(-self.damping * self._lam * h) * c

    def _oracle_matrix(self, h: float) -> np.ndarray:
        cached = self._oracle_cache.get(h)
        if cached is not None:
            return cached
        generator = 1j * self.drive * self.L.dense - np.diag(self.damping * self._lam)
        matrix = scipy.linalg.expm(h * generator)
        if len(self._oracle_cache) >= 4:
            self._oracle_cache.clear()
        self._oracle_cache[h] = matrix
        return matrix

    def _rk4_unitary(self, c: np.ndarray, h: float) -> np.ndarray:
        rate = abs(self.drive) * self.L.spectral_bound
        n_inner = max(1, int(math.ceil(rate * abs(h) / self.cfl)))
        hh = h / n_inner
        norm0 = float(np.linalg.norm(c))
        apply = self.L.apply_fn
        coef = 1j * self.drive
        x = c
        for _ in range(n_inner):
            k1 = coef * apply(x)
            k2 = coef * apply(x + 0.5 * hh * k1)
            k3 = coef * apply(x + 0.5 * hh * k2)
            k4 = coef * apply(x + hh * k3)
            x_new = x + (hh / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            before = float(np.linalg.norm(x))
            if before > 0 and np.linalg.norm(x_new) > before * (1.0 + RK4_GROWTH_TOL):
                raise StepSizeError(
                    f"RK4 substep amplified the norm (drive*|L|*h = {rate * abs(hh):.3g}); reduce dt"
                )
            x = x_new
        nx = float(np.linalg.norm(x))
        if nx > 0:
            x = x * (norm0 / nx)
        return x


def _coeffs(phi: Union[SpectralState, np.ndarray]) -> np.ndarray:
    if isinstance(phi, SpectralState):
        return np.array(phi.coeffs)
    return np.asarray(phi, dtype=complex)


def _log_mean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(a − b)/ln(a/b) по модам; точна для экспоненциального затухания каждой моды."""
    out = 0.5 * (a + b)
    both = (a > 0) & (b > 0)
    distinct = both & (np.abs(a - b) > 1e-12 * np.maximum(a, b))
    out[distinct] = (a[distinct] - b[distinct]) / np.log(a[distinct] / b[distinct])
    out[(a > 0) & (b == 0)] = 0.0
    return out


# ---------------------------------------------------------------------------
# Интегрирование
# ---------------------------------------------------------------------------


def march(
    stepper: SemigroupStepper, c0: np.ndarray, h: float, n_steps: int
) -> Iterator[Tuple[int, np.ndarray]]:
    c = c0
    for i in range(1, n_steps + 1):
        c = stepper.step(c, h)
        yield i, c


def propagate(
    L: OperatorHandle,
    ladder: GammaLadder,
    drive: float,
    damping: float,
    phi: Union[SpectralState, np.ndarray],
    duration: float,
    dt: float,
    method: str = "eigsplit",
    stepper: Optional[SemigroupStepper] = None,
) -> Union[SpectralState, np.ndarray]:
    """Прогон на время duration шагами не крупнее dt; тип результата повторяет вход."""
    stepper = stepper or SemigroupStepper(L, ladder, drive, damping, method)
    c = _coeffs(phi)
    if duration > 0:
        n = max(1, int(math.ceil(duration / dt - 1e-9)))
        h = duration / n
        for _, c in march(stepper, c, h, n):
            pass
    if isinstance(phi, SpectralState):
        return phi.with_coeffs(c)
    return c


def evolve(
    L: OperatorHandle,
    ladder: GammaLadder,
    cfg: EvolutionConfig,
    phi0: SpectralState,
    stepper: Optional[SemigroupStepper] = None,
) -> Trajectory:
    if cfg.adaptive:
        return evolve_adaptive(L, ladder, replace(cfg, adaptive=False), phi0)
    if phi0.size != L.dim or phi0.size != ladder.size:
        raise DimensionError(f"state {phi0.size}, operator {L.dim}, ladder {ladder.size}")
    if phi0.norm == 0:
        raise ParameterError("initial state has zero norm")

    stepper = stepper or SemigroupStepper(L, ladder, cfg.drive, cfg.damping, cfg.method)
    n = cfg.n_steps
    h = cfg.t_end / n if n else 0.0
    lam = ladder.lambdas

    times = np.arange(n + 1) * h
    l2_sq = np.empty(n + 1)
    h1_sq = np.empty(n + 1)
    hm1_sq = np.empty(n + 1)
    dissipated = np.zeros(n + 1)

    c = _coeffs(phi0)
    p = np.abs(c) ** 2
    l2_sq[0], h1_sq[0], hm1_sq[0] = p.sum(), (lam * p).sum(), (p / lam).sum()
    sample_times = [0.0]
    samples = [phi0]

    for i, c in march(stepper, c, h, n):
        p_new = np.abs(c) ** 2
        dissipated[i] = dissipated[i - 1] + 2.0 * cfg.damping * h * float(np.sum(lam * _log_mean(p, p_new)))
        l2_sq[i], h1_sq[i], hm1_sq[i] = p_new.sum(), (lam * p_new).sum(), (p_new / lam).sum()
        p = p_new
        if i % cfg.sample_stride == 0 or i == n:
            sample_times.append(float(times[i]))
            samples.append(phi0.with_coeffs(c))

    ledger = EnergyLedger(times, l2_sq, h1_sq, dissipated, cfg.damping)
    logger.debug(
        "evolve %s method=%s A=%g steps=%d final |phi|=%.6g",
        L.label, cfg.method, cfg.A, n, math.sqrt(l2_sq[-1]),
    )
    return Trajectory(
        times=times,
        norm_l2=np.sqrt(l2_sq),
        norm_h1=np.sqrt(h1_sq),
        norm_hminus1=np.sqrt(hm1_sq),
        sample_times=np.array(sample_times),
        samples=samples,
        ledger=ledger,
        method=cfg.method,
        dt=h,
        final=samples[-1],
    )


def evolve_adaptive(
    L: OperatorHandle,
    ladder: GammaLadder,
    cfg: EvolutionConfig,
    phi0: SpectralState,
    tol: float = ADAPTIVE_TOL,
    max_steps: Optional[int] = None,
) -> Trajectory:
    """Дробим dt пополам, пока невязка баланса энергии на единицу времени не станет < tol."""
    max_steps = config.MAX_STEPS if max_steps is None else max_steps
    dt = cfg.dt
    while True:
        run_cfg = replace(cfg, dt=dt, adaptive=False)
        if run_cfg.n_steps > max_steps:
            raise StepSizeError(f"adaptive refinement exceeded {max_steps} steps (dt={dt:.3e})")
        traj = evolve(L, ladder, run_cfg, phi0)
        per_unit = energy_identity_residual(traj.ledger) / max(cfg.t_end, 1e-300)
        if per_unit < tol:
            return traj
        logger.debug("Energy residual %.3e per unit time at dt=%.3e; halving", per_unit, dt)
        log_step_refined(dt=dt, residual_rate=per_unit)
        dt *= 0.5


def free_evolve(L: OperatorHandle, t: float, phi0: SpectralState) -> SpectralState:
    """e^{iLt} φ₀: через спектр, если он есть, иначе унитарными подшагами RK4."""
    c = _coeffs(phi0)
    if L.has_eig:
        eig = L.eig
        out = eig.synthesize(np.exp(1j * eig.values * t) * eig.analyze(c))
    else:
        dummy = GammaLadder(np.ones(L.dim), "unit")
        out = SemigroupStepper(L, dummy, 1.0, 0.0, "strang-rk4").unitary(c, t)
    return phi0.with_coeffs(out)


def dense_oracle_evolve(
    L: OperatorHandle, ladder: GammaLadder, A: float, t: float, phi0: SpectralState
) -> SpectralState:
    _check_oracle_size(L.dim)
    if L.dim != ladder.size or phi0.size != L.dim:
        raise DimensionError(f"state {phi0.size}, operator {L.dim}, ladder {ladder.size}")
    generator = 1j * A * L.dense - np.diag(ladder.lambdas)
    return phi0.with_coeffs(scipy.linalg.expm(t * generator) @ phi0.coeffs)


def energy_identity_residual(ledger: EnergyLedger) -> float:
    """max_t |Δ‖φ‖² + 2d∫‖φ‖₁²| / ‖φ₀‖²."""
    return float(np.max(ledger.residuals()))


# ---------------------------------------------------------------------------
# Свободная и затухающая эволюции
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GapReport:
    times: np.ndarray
    gaps: np.ndarray
    running_max: np.ndarray
    measured: float
    bound: float
    exact_bound: bool
    growth_bound: str
    within_bound: bool


def growth_integral(growth_bound: str, rate: float, tau: float) -> float:
    """∫₀^τ B²(t) dt."""
    if growth_bound == "unity" or rate == 0:
        return tau
    return math.expm1(2.0 * rate * tau) / (2.0 * rate)


def free_vs_damped_gap(
    L: OperatorHandle,
    ladder: GammaLadder,
    eps: float,
    tau: float,
    phi0: SpectralState,
    growth_bound: str = "unity",
    rate: Optional[float] = None,
    dt: float = 1e-3,
    method: str = "eigsplit",
) -> GapReport:
    """max_{t≤τ} ‖φ^ε(t) − φ⁰(t)‖² против (ε/2)‖φ₀‖₁² ∫₀^τ B²."""
    if growth_bound not in GROWTH_BOUNDS:
        raise ParameterError(f"unknown growth bound {growth_bound!r}")
    if growth_bound == "unity" and not L.commutes_with_gamma:
        raise PreconditionError(
            f"growth bound 'unity' is not valid for {L.label}: e^(iLt) does not preserve the H1 norm"
        )
    if growth_bound == "lipschitz-exp":
        rate = L.growth_rate if rate is None else rate
        if rate is None:
            raise PreconditionError(f"no Lipschitz growth rate known for {L.label}")
    rate = float(rate or 0.0)

    c0 = _coeffs(phi0)
    h1_sq = float(np.sum(ladder.lambdas * np.abs(c0) ** 2))
    n = max(1, int(round(tau / dt)))
    h = tau / n

    damped = SemigroupStepper(L, ladder, 1.0, eps, method)
    free = None if L.has_eig else SemigroupStepper(L, ladder, 1.0, 0.0, "strang-rk4")
    eig = L.eig if L.has_eig else None
    amps0 = eig.analyze(c0) if eig is not None else None

    times = np.arange(n + 1) * h
    gaps = np.zeros(n + 1)
    cd = c0
    cf = c0
    for i in range(1, n + 1):
        cd = damped.step(cd, h)
        if eig is not None:
            cf = eig.synthesize(np.exp(1j * eig.values * times[i]) * amps0)
        else:
            cf = free.step(cf, h)
        gaps[i] = float(np.sum(np.abs(cd - cf) ** 2))

    running = np.maximum.accumulate(gaps)
    bound = 0.5 * eps * h1_sq * growth_integral(growth_bound, rate, tau)
    measured = float(running[-1])
    slack = 1e-14 * float(np.sum(np.abs(c0) ** 2))
    within = measured <= bound * (1.0 + 1e-6) + slack
    exact = growth_bound == "unity"
    if exact and not within:
        raise InvariantViolation("free_damped_gap", f"measured {measured:.6e} exceeds bound {bound:.6e}", measured)
    return GapReport(
        times=times,
        gaps=gaps,
        running_max=running,
        measured=measured,
        bound=bound,
        exact_bound=exact,
        growth_bound=growth_bound,
        within_bound=within,
    )


# ---------------------------------------------------------------------------
# Проверки инвариантов траектории
# ---------------------------------------------------------------------------


def check_monotone_decay(traj: Trajectory, slack: float = 1e-12) -> CheckResult:
    norms = traj.norm_l2
    jumps = np.diff(norms)
    worst = float(np.max(jumps)) if jumps.size else 0.0
    passed = worst <= slack * norms[0]
    return CheckResult("monotone_decay", passed, worst, f"largest increase {worst:.3e}")


def check_dissipation_budget(ledger: EnergyLedger, slack: float = 1e-6) -> CheckResult:
    """d·∫₀^T ‖φ‖₁² ≤ ½‖φ₀‖² для всех T, и неубывание по T."""
    budget = 0.5 * ledger.dissipated / ledger.l2_sq[0]
    worst = float(np.max(budget))
    monotone = bool(np.all(np.diff(budget) >= -1e-15))
    passed = worst <= 0.5 + slack and monotone
    return CheckResult("dissipation_budget", passed, worst, f"max normalized budget {worst:.9f}")


def check_conditional_decay(traj: Trajectory, n_bar: float, slack: float = 1e-6) -> CheckResult:
    """
    На каждом максимальном отрезке сэмплов с ‖φ‖₁² ≥ N̄‖φ‖²:
    ‖φ(b)‖² ≤ e^{−2dN̄(b−a)} ‖φ(a)‖² (1 + slack).
    """
    led = traj.ledger
    holds = led.h1_sq >= n_bar * led.l2_sq
    worst = 0.0
    intervals = 0
    i = 0
    while i < holds.size:
        if not holds[i]:
            i += 1
            continue
        j = i
        while j + 1 < holds.size and holds[j + 1]:
            j += 1
        if j > i:
            intervals += 1
            allowed = math.exp(-2.0 * led.damping * n_bar * (led.times[j] - led.times[i])) * led.l2_sq[i]
            worst = max(worst, float(led.l2_sq[j] / allowed) - 1.0)
        i = j + 1
    passed = worst <= slack
    return CheckResult("conditional_decay", passed, worst, f"{intervals} interval(s) checked")


def rescaling_consistency(
    L: OperatorHandle,
    ladder: GammaLadder,
    A: float,
    tau: float,
    phi0: SpectralState,
    dt: float,
    method: str = "eigsplit",
) -> float:
    """Относительная разница: форма с амплитудой A до τ против ε = 1/A до Aτ."""
    if A <= 0:
        raise ParameterError(f"rescaling needs A > 0, got {A}")
    direct = evolve(L, ladder, EvolutionConfig(t_end=tau, dt=dt, amplitude=A, method=method), phi0).final
    rescaled = evolve(
        L, ladder, EvolutionConfig(t_end=A * tau, dt=A * dt, epsilon=1.0 / A, method=method), phi0
    ).final
    return float(np.linalg.norm(direct.coeffs - rescaled.coeffs) / phi0.norm)


def estimate_bound_constant(L: OperatorHandle, ladder: GammaLadder) -> float:
    """Эмпирическая C в ‖Lψ‖ ≤ C‖ψ‖₁ (обобщённая задача на L*L и Γ)."""
    if not L.has_dense:
        raise CapabilityError(f"bound constant needs a dense matrix of {L.label}")
    gram = L.dense.conj().T @ L.dense
    top = scipy.linalg.eigh(gram, np.diag(ladder.lambdas).astype(complex), eigvals_only=True)[-1]
    return float(math.sqrt(max(top, 0.0)))
