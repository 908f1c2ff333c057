from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np
import scipy.special

from services.errors import ParameterError, ResolutionError, ResonanceError, SizeError
from services.operators import VelocityField
from services.torus import collocation_points, grid_to_box

logger = logging.getLogger(__name__)

# На окружности S¹ используем e^{+2πikξ}: R(ξ+α) − R(ξ) = Σ R_k (e^{2πikα} − 1) e^{2πikξ}.
# На торе T² коэффициенты полей по-прежнему в соглашении services.torus (e^{−2πik·x}).

RESONANCE_FLOOR = 1e-300
ROOT_TOL = 1e-12
ROOT_MAX_ITER = 200


# ---------------------------------------------------------------------------
# Окружность: Q, α, уравнение гомологии
# ---------------------------------------------------------------------------


def liouville_alpha(n_terms: int = 5) -> Tuple[float, Fraction]:
    """α = Σ_{n=1..n_terms} 10^{−n!}: float для расчёта и точная дробь для записи в конфиг."""
    if n_terms < 1:
        raise ParameterError(f"n_terms must be >= 1, got {n_terms}")
    exact = sum((Fraction(1, 10 ** math.factorial(n)) for n in range(1, n_terms + 1)), Fraction(0))
    return float(exact), exact


def eval_circle(hat: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Σ_k hat_k e^{2πikξ} для центрированного массива hat (индекс k + K)."""
    hat = np.asarray(hat, dtype=complex)
    K = (hat.size - 1) // 2
    ks = np.arange(-K, K + 1)
    xi = np.asarray(xi, dtype=float)
    return np.exp(2j * np.pi * np.multiply.outer(xi, ks)) @ hat


def lacunary_q_hat(
    frequencies: Tuple[int, ...], weights: Tuple[float, ...], scale: float = 1.0
) -> np.ndarray:
    """Q(ξ) = 1 + scale Σ w_j cos(2π n_j ξ) как центрированный массив коэффициентов."""
    if len(frequencies) != len(weights):
        raise ParameterError("frequencies and weights must have equal length")
    K = max(frequencies) if frequencies else 0
    hat = np.zeros(2 * K + 1, dtype=complex)
    hat[K] = 1.0
    for n, w in zip(frequencies, weights):
        if n <= 0:
            raise ParameterError(f"frequency must be positive, got {n}")
        hat[K + n] += 0.5 * scale * w
        hat[K - n] += 0.5 * scale * w
    return hat


def default_q_hat(n_terms: int = 3, scale: float = 0.8) -> np.ndarray:
    """Q(ξ) = 1 + c Σ_{j=1..J} 2^{−j} cos(2π 2^{j!} ξ); при c = 0.8 min Q ≥ 0.3."""
    freqs = tuple(2 ** math.factorial(j) for j in range(1, n_terms + 1))
    weights = tuple(2.0**-j for j in range(1, n_terms + 1))
    return lacunary_q_hat(freqs, weights, scale)


@dataclass(frozen=True, eq=False)
class HomologySolution:
    R_hat: np.ndarray
    Q_hat: np.ndarray
    alpha: float
    K: int
    min_denominator: float
    min_denominator_k: int
    h1_norm: float

    def R(self, xi: np.ndarray) -> np.ndarray:
        return eval_circle(self.R_hat, xi).real

    def residual(self, n_grid: int = 4096) -> float:
        """max_ξ |R(ξ+α) − R(ξ) − (Q_K(ξ) − 1)| на равномерной сетке."""
        xi = np.arange(n_grid) / n_grid
        q = eval_circle(self.Q_hat, xi).real - 1.0
        return float(np.max(np.abs(self.R(xi + self.alpha) - self.R(xi) - q)))


def _truncate_centered(hat: np.ndarray, K: int) -> np.ndarray:
    hat = np.asarray(hat, dtype=complex)
    K_in = (hat.size - 1) // 2
    out = np.zeros(2 * K + 1, dtype=complex)
    keep = min(K, K_in)
    out[K - keep: K + keep + 1] = hat[K_in - keep: K_in + keep + 1]
    return out


def solve_homology(Q_hat: np.ndarray, alpha: float, K: int) -> HomologySolution:
    """R_k = Q_k / (e^{2πikα} − 1) для 0 < |k| ≤ K, R_0 = 0."""
    if K < 1:
        raise SizeError(f"homology band K must be >= 1, got {K}")
    Q_hat = np.asarray(Q_hat, dtype=complex)
    center = (Q_hat.size - 1) // 2
    if abs(Q_hat[center] - 1.0) > 1e-12:
        raise ParameterError(f"Q must have unit mean, got Q_0 = {Q_hat[center]}")

    Q = _truncate_centered(Q_hat, K)
    R = np.zeros_like(Q)
    min_den = math.inf
    min_k = 0
    for k in range(-K, K + 1):
        if k == 0:
            continue
        r = k * alpha - round(k * alpha)
        theta = math.pi * r
        den = 2.0 * abs(math.sin(theta))
        if den < min_den:
            min_den, min_k = den, k
        q_k = Q[K + k]
        if q_k == 0:
            continue
        if den < RESONANCE_FLOOR:
            raise ResonanceError(k, den)
        R[K + k] = q_k / (2j * math.sin(theta) * complex(math.cos(theta), math.sin(theta)))

    ks = np.arange(-K, K + 1)
    h1 = float(np.sqrt(np.sum((2.0 * np.pi * ks) ** 2 * np.abs(R) ** 2)))
    logger.debug("Homology K=%d alpha=%.12g: min denominator %.3e at k=%d, |R|_1=%.6g", K, alpha, min_den, min_k, h1)
    return HomologySolution(R, Q, float(alpha), K, float(min_den), min_k, h1)


# ---------------------------------------------------------------------------
# Плотность F и её параметры
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TimeChangedFlowSpec:
    """
    Поток w = (α/F, 1/F) с F(x,y) = m + ψ(y)(Q(x − αy) − m).

    ψ — полиномиальная «шапочка» ((y − y0)(y1 − y))^p на [y0, y1], нормированная на единицу.
    """

    alpha: float
    Q_hat: np.ndarray
    m: float
    y0: float = 0.1
    y1: float = 0.9
    bump_power: int = 4

    def __post_init__(self) -> None:
        hat = np.asarray(self.Q_hat, dtype=complex)
        object.__setattr__(self, "Q_hat", hat)
        K = (hat.size - 1) // 2
        if abs(hat[K] - 1.0) > 1e-12:
            raise ParameterError(f"Q must have unit mean, got Q_0 = {hat[K]}")
        if np.max(np.abs(hat - hat[::-1].conj())) > 1e-12:
            raise ParameterError("Q must be real-valued (Hermitian coefficients)")
        if not 0.0 <= self.y0 < self.y1 <= 1.0:
            raise ParameterError(f"bump support [{self.y0}, {self.y1}] must lie in [0, 1]")
        if self.bump_power < 1:
            raise ParameterError(f"bump power must be >= 1, got {self.bump_power}")
        q_min = self.min_Q
        if q_min <= 0:
            raise ParameterError(f"Q must be positive, min Q = {q_min:.6g}")
        if not 0.0 < self.m < q_min:
            raise ParameterError(f"need 0 < m < min Q = {q_min:.6g}, got m = {self.m}")

    @classmethod
    def default(cls, alpha: Optional[float] = None, m_fraction: float = 0.5) -> "TimeChangedFlowSpec":
        alpha = liouville_alpha()[0] if alpha is None else alpha
        hat = default_q_hat()
        q_min = float(np.min(eval_circle(hat, np.arange(8192) / 8192).real))
        return cls(alpha=alpha, Q_hat=hat, m=m_fraction * q_min)

    @property
    def q_band(self) -> int:
        return (self.Q_hat.size - 1) // 2

    @property
    def min_Q(self) -> float:
        n = max(4096, 16 * self.q_band)
        return float(np.min(self.Q(np.arange(n) / n)))

    def Q(self, xi: np.ndarray) -> np.ndarray:
        return eval_circle(self.Q_hat, xi).real

    def _bump_scale(self) -> float:
        p = self.bump_power
        w = self.y1 - self.y0
        return 1.0 / (w ** (2 * p + 1) * scipy.special.beta(p + 1, p + 1))

    def psi(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float) % 1.0
        g = np.clip((y - self.y0) * (self.y1 - y), 0.0, None)
        return self._bump_scale() * g**self.bump_power

    def Psi(self, y: np.ndarray) -> np.ndarray:
        """∫₀^y ψ для y ∈ [0, 1]."""
        y = np.asarray(y, dtype=float)
        s = np.clip((y - self.y0) / (self.y1 - self.y0), 0.0, 1.0)
        return scipy.special.betainc(self.bump_power + 1, self.bump_power + 1, s)

    def F(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.m + self.psi(y) * (self.Q(np.asarray(x) - self.alpha * np.asarray(y)) - self.m)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "alpha": self.alpha,
            "m": self.m,
            "y0": self.y0,
            "y1": self.y1,
            "bump_power": self.bump_power,
            "q_band": self.q_band,
            "Q_hat": [[float(z.real), float(z.imag)] for z in self.Q_hat],
        }


def build_density_F(spec: TimeChangedFlowSpec, n: int) -> np.ndarray:
    """F на сетке n×n точек (i/n, j/n), индексация 'ij'."""
    if n < 8:
        raise SizeError(f"density grid must be >= 8, got {n}")
    X, Y = collocation_points(n)
    F = spec.F(X.ravel(), Y.ravel()).reshape(n, n)
    if np.any(F <= 0):
        raise ParameterError(f"density has nonpositive samples (min {F.min():.3e})")
    return F


# ---------------------------------------------------------------------------
# Спектральный интерполянт плотности и отображение Z
# ---------------------------------------------------------------------------


def _symmetric_coefficients(grid: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Коэффициенты C[k, l] при e^{2πi(kx+ly)}, k, l ∈ −n/2..n/2.

    Найквистова мода делится пополам между ±n/2, так что интерполянт веществен и
    совпадает с отсчётами в узлах.
    """
    n = grid.shape[0]
    raw = np.fft.fft2(grid) / (n * n)
    half = n // 2
    ks = np.arange(-half, half + 1)
    C = raw[np.ix_(ks % n, ks % n)]
    if n % 2 == 0:
        C[0, :] *= 0.5
        C[-1, :] *= 0.5
        C[:, 0] *= 0.5
        C[:, -1] *= 0.5
    return C, ks


def _monotone_solve(
    func: Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]],
    targets: np.ndarray,
    guess: np.ndarray,
    tol: float = ROOT_TOL,
) -> np.ndarray:
    """Решает func(z) = targets на [0, 1] для строго возрастающей func (Ньютон с защитой бисекцией)."""
    lo = np.zeros_like(targets)
    hi = np.ones_like(targets)
    z = np.clip(guess, 0.0, 1.0)
    for _ in range(ROOT_MAX_ITER):
        val, der = func(z)
        r = val - targets
        done = (np.abs(r) <= 0.1 * tol) | (hi - lo <= tol)
        if np.all(done):
            return z
        lo = np.where(r < 0, z, lo)
        hi = np.where(r > 0, z, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = z - r / der
        bad = ~((newton > lo) & (newton < hi)) | ~(der > 0)
        z = np.where(done, z, np.where(bad, 0.5 * (lo + hi), newton))
    raise ResolutionError("monotone inversion did not converge; refine the density grid")


class _DensityInterpolant:
    def __init__(self, F_grid: np.ndarray) -> None:
        self.n = F_grid.shape[0]
        self.C, self.ks = _symmetric_coefficients(F_grid)
        self.mass = float(self.C[self.n // 2, self.n // 2].real)
        self.w = 2j * np.pi * self.ks
        nz = self.ks != 0
        self._inv = np.zeros(self.ks.size, dtype=complex)
        self._inv[nz] = 1.0 / self.w[nz]
        self.fbar_hat = self.C[:, self.n // 2]

    def _ex(self, x: np.ndarray) -> np.ndarray:
        return np.exp(np.multiply.outer(np.asarray(x, dtype=float), self.w))

    def fbar(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        E = self._ex(x)
        return (E @ self.fbar_hat).real, (E @ (self.w * self.fbar_hat)).real

    def p(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        E = self._ex(x)
        P = ((E - 1.0) @ (self._inv * self.fbar_hat)).real
        return np.asarray(x) + P, (E @ self.fbar_hat).real

    def rows(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """f_l(x) = Σ_k C[k,l] e^{2πikx} и её x-производная, строки — точки x."""
        E = self._ex(x)
        return E @ self.C, E @ (self.w[:, None] * self.C)

    def along_y(self, f_row: np.ndarray, df_row: np.ndarray, y: np.ndarray) -> Dict[str, np.ndarray]:
        """F, H, H_x на точках y при фиксированном x (H = Σ_{l≠0} f_l (e^{2πily} − 1)/(2πil))."""
        E = self._ex(y)
        return {
            "F": (E @ f_row).real,
            "H": ((E - 1.0) @ (self._inv * f_row)).real,
            "H_x": ((E - 1.0) @ (self._inv * df_row)).real,
        }


@dataclass(frozen=True, eq=False)
class RelabelMap:
    """
    Z: (x, y) → (p, q), p = ∫₀^x F̄, q = (1/F̄(x)) ∫₀^y F(x, z) dz.

    forward_* — значения Z в узлах (i/n, j/n); x_of_p, y_of_pq — прообразы узлов (a/n, b/n).
    """

    n: int
    density: np.ndarray
    forward_p: np.ndarray
    forward_q: np.ndarray
    x_of_p: np.ndarray
    y_of_pq: np.ndarray
    order: str = "spectral"

    def measure_defect(self, stencil: int = 4) -> float:
        det = jacobian_determinant(self, stencil)
        s = stencil // 2
        return float(np.max(np.abs(det - self.density[s:-s, s:-s])))


@dataclass(frozen=True, eq=False)
class RelabeledFlow:
    zmap: RelabelMap
    velocity: VelocityField
    divergence_before: float
    divergence_after: float
    alpha: float


def relabel_from_density(F_grid: np.ndarray, alpha: float, K: int, label: str = "relabeled") -> RelabeledFlow:
    """
    Переносит w = (α/F, 1/F) отображением Z на сетку (p, q):
    u1 = α F̄(x)/F, u2 = α ∂_x q / F + 1/F̄(x), затем проекция Лерэ.
    """
    F_grid = np.asarray(F_grid, dtype=float)
    n = F_grid.shape[0]
    if F_grid.shape != (n, n):
        raise SizeError(f"density grid must be square, got {F_grid.shape}")
    if n < 2 * K + 1:
        raise SizeError(f"density grid {n} cannot hold velocity band K={K}")
    if np.any(F_grid <= 0):
        raise ParameterError("density must be positive")
    dens = _DensityInterpolant(F_grid)
    if abs(dens.mass - 1.0) > 1e-8:
        raise ParameterError(f"density must have unit mass, got {dens.mass:.12f}")

    nodes = np.arange(n) / n

    # Прямое отображение в узлах.
    forward_p, _ = dens.p(nodes)
    fbar_nodes, _ = dens.fbar(nodes)
    f_rows, df_rows = dens.rows(nodes)
    forward_q = np.empty((n, n))
    for i in range(n):
        vals = dens.along_y(f_rows[i], df_rows[i], nodes)
        forward_q[i] = nodes + vals["H"] / fbar_nodes[i]

    # Обратное: p(x_a) = a/n, затем q(x_a, y) = b/n построчно.
    x_of_p = _monotone_solve(dens.p, nodes, nodes)
    fbar_x, dfbar_x = dens.fbar(x_of_p)
    if np.any(fbar_x <= 0):
        raise ResolutionError("averaged density is nonpositive at an inversion point")
    g_rows, dg_rows = dens.rows(x_of_p)

    y_of_pq = np.empty((n, n))
    u1 = np.empty((n, n))
    u2 = np.empty((n, n))
    for a in range(n):
        fb, dfb = fbar_x[a], dfbar_x[a]

        def q_row(y: np.ndarray, _a: int = a, _fb: float = fb) -> Tuple[np.ndarray, np.ndarray]:
            vals = dens.along_y(g_rows[_a], dg_rows[_a], y)
            return y + vals["H"] / _fb, vals["F"] / _fb

        y = _monotone_solve(q_row, nodes, nodes)
        vals = dens.along_y(g_rows[a], dg_rows[a], y)
        F_at = vals["F"]
        if np.any(F_at <= 0):
            raise ResolutionError(f"density interpolant is nonpositive on row {a}; refine the grid")
        dq_dx = (vals["H_x"] * fb - vals["H"] * dfb) / fb**2
        y_of_pq[a] = y
        u1[a] = alpha * fb / F_at
        u2[a] = alpha * dq_dx / F_at + 1.0 / fb

    velocity, div_before = VelocityField.from_grid(u1, u2, K, label)
    div_after = velocity.divergence_norm()
    logger.info(
        "Relabeled flow %s on %dx%d grid: divergence %.3e before projection, %.3e after",
        label, n, n, div_before, div_after,
    )
    zmap = RelabelMap(n, F_grid, forward_p, forward_q, x_of_p, y_of_pq)
    return RelabeledFlow(zmap, velocity, div_before, div_after, float(alpha))


def relabel_to_lebesgue(spec: TimeChangedFlowSpec, n: int, K: int) -> RelabeledFlow:
    return relabel_from_density(build_density_F(spec, n), spec.alpha, K, label="time-changed")


_STENCILS = {
    2: np.array([-0.5, 0.0, 0.5]),
    4: np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0,
}


def jacobian_determinant(zmap: RelabelMap, stencil: int = 4) -> np.ndarray:
    """det DZ центральными разностями во внутренних узлах (∂p/∂y ≡ 0, так что det = p_x q_y)."""
    if stencil not in _STENCILS:
        raise ParameterError(f"stencil must be 2 or 4, got {stencil}")
    weights = _STENCILS[stencil]
    s = stencil // 2
    n = zmap.n
    h = 1.0 / n
    inner = slice(s, n - s)

    p_x = sum(w * zmap.forward_p[s + o: n - s + o] for o, w in zip(range(-s, s + 1), weights)) / h
    q_y = sum(w * zmap.forward_q[inner, s + o: n - s + o] for o, w in zip(range(-s, s + 1), weights)) / h
    return p_x[:, None] * q_y


# ---------------------------------------------------------------------------
# Выпрямляющие координаты S
# ---------------------------------------------------------------------------


def skew_coordinates(
    spec: TimeChangedFlowSpec, x: np.ndarray, y: np.ndarray, K: Optional[int] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """
    X = x + α(Y − y), Y = T(x − αy, y) + R(x − αy), T(ξ, y) = m y + Ψ(y)(Q(ξ) − m).

    В координатах (X, Y) поток w — прямолинейный поток (α, 1); R берётся с полосой K.
    """
    K = spec.q_band if K is None else K
    sol = solve_homology(spec.Q_hat, spec.alpha, max(K, 1))
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xi = x - spec.alpha * y
    T = spec.m * y + spec.Psi(y) * (spec.Q(xi.ravel()).reshape(xi.shape) - spec.m)
    Y = T + sol.R(xi.ravel()).reshape(xi.shape)
    X = x + spec.alpha * (Y - y)
    return X, Y



# ---------------------------------------------------------------------------
# Потоки из функции тока
# ---------------------------------------------------------------------------


def _shear_stream(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    return -np.cos(2.0 * np.pi * Y) / (2.0 * np.pi)


def _cellular_stream(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    return np.sin(2.0 * np.pi * X) * np.sin(2.0 * np.pi * Y) / (2.0 * np.pi)


STREAM_FUNCTIONS: Dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    "shear": _shear_stream,
    "cellular": _cellular_stream,
}


def stream_function_flow(
    kind: str,
    K: int,
    psi_s: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None,
    grid: Optional[int] = None,
) -> VelocityField:
    """
    u = (∂_y ψ_s, −∂_x ψ_s) для shear (u = (sin 2πy, 0)), cellular
    (ψ_s = sin 2πx sin 2πy / 2π) или пользовательской ψ_s.
    """
    if K < 1:
        raise SizeError(f"flow band K must be >= 1, got {K}")
    if kind == "custom":
        if psi_s is None:
            raise ParameterError("custom flow needs a stream function")
        func = psi_s
    elif kind in STREAM_FUNCTIONS:
        func = STREAM_FUNCTIONS[kind]
    else:
        raise ParameterError(f"unknown stream-function flow {kind!r}")

    M = grid or max(4 * K + 4, 16)
    X, Y = collocation_points(M)
    box = grid_to_box(np.asarray(func(X, Y), dtype=complex), K)
    box = 0.5 * (box + box[::-1, ::-1].conj())
    return VelocityField.from_stream(box, kind)
