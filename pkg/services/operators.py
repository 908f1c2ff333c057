from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg

import dissipator.config as config
from services.errors import (
    CapabilityError,
    DegenerateError,
    DimensionError,
    EigensolverError,
    GroupingError,
    InvariantViolation,
    ParameterError,
    SizeError,
    ValidationError,
)
from services.spectral import GammaLadder, SpectralState
from services.torus import TorusLattice, box_to_grid, centered_wavenumbers, grid_to_box

logger = logging.getLogger(__name__)

# Допуск группировки вырожденных E_j относительно спектрального диаметра.
GROUPING_RTOL = 1e-9

# Допуск бездивергентности поля скорости (спектральная норма).
DIVERGENCE_TOL = 1e-10


def abstract_basis(n: int) -> str:
    return f"abstract-{n}"


# ---------------------------------------------------------------------------
# Спектральные разложения
# ---------------------------------------------------------------------------


def group_eigenvalues(values: np.ndarray, rtol: float = GROUPING_RTOL) -> Tuple[np.ndarray, ...]:
    """Разбивает индексы на группы почти равных собственных значений (цепочкой по сортировке)."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return ()
    order = np.argsort(values, kind="stable")
    diam = float(values[order[-1]] - values[order[0]])
    tol = rtol * (diam if diam > 0 else 1.0)

    groups: List[np.ndarray] = []
    current = [int(order[0])]
    for prev, idx in zip(order[:-1], order[1:]):
        if values[idx] - values[prev] <= tol:
            current.append(int(idx))
        else:
            groups.append(np.array(current))
            current = [int(idx)]
    groups.append(np.array(current))
    return tuple(groups)


def validate_groups(groups: Sequence[np.ndarray], n: int) -> None:
    seen = np.zeros(n, dtype=int)
    for g in groups:
        seen[np.asarray(g, dtype=int)] += 1
    if np.any(seen > 1):
        raise GroupingError("degeneracy groups overlap")
    if np.any(seen == 0):
        raise GroupingError("degeneracy groups do not cover the spectrum")


@dataclass(frozen=True, eq=False)
class EigenData:
    """
    Спектр E_j, ортонормированные собственные векторы (столбцы) и группы вырождения.

    vectors=None означает единичную матрицу (диагональный оператор): на больших
    решётках её не материализуем.
    """

    values: np.ndarray
    vectors: Optional[np.ndarray]
    groups: Tuple[np.ndarray, ...]

    @classmethod
    def from_hermitian(cls, matrix: np.ndarray) -> "EigenData":
        try:
            values, vectors = scipy.linalg.eigh(matrix)
        except (np.linalg.LinAlgError, ValueError) as e:
            raise EigensolverError(f"eigensolver failed: {e}") from e
        return cls(values, vectors, group_eigenvalues(values))

    @classmethod
    def diagonal(cls, values: np.ndarray) -> "EigenData":
        values = np.asarray(values, dtype=float)
        return cls(values, None, group_eigenvalues(values))

    @property
    def size(self) -> int:
        return int(self.values.size)

    @property
    def group_values(self) -> np.ndarray:
        return np.array([self.values[g].mean() for g in self.groups])

    def analyze(self, c: np.ndarray) -> np.ndarray:
        """Координаты в собственном базисе: V* c."""
        return np.array(c, dtype=complex) if self.vectors is None else self.vectors.conj().T @ c

    def synthesize(self, amps: np.ndarray) -> np.ndarray:
        return np.array(amps, dtype=complex) if self.vectors is None else self.vectors @ amps

    def vector(self, j: int) -> np.ndarray:
        if self.vectors is not None:
            return self.vectors[:, j]
        e = np.zeros(self.size, dtype=complex)
        e[j] = 1.0
        return e

    def basis_matrix(self) -> np.ndarray:
        return np.eye(self.size, dtype=complex) if self.vectors is None else self.vectors

    def weighted_column_norms(self, weights: np.ndarray) -> np.ndarray:
        """sqrt(Σ_n weights_n |w_j[n]|²) для каждого собственного вектора w_j."""
        if self.vectors is None:
            return np.sqrt(np.asarray(weights, dtype=float))
        return np.sqrt(np.real(weights[:, None] * np.abs(self.vectors) ** 2).sum(axis=0))

    def group_components(self, c: np.ndarray, rows: Optional[int] = None) -> np.ndarray:
        """Строки — Q_j c для каждой группы j (при rows — только первые rows координат)."""
        validate_groups(self.groups, self.size)
        amps = self.analyze(c)
        n = self.size if rows is None else int(rows)
        out = np.zeros((len(self.groups), n), dtype=complex)
        for row, g in enumerate(self.groups):
            if self.vectors is None:
                sel = g[g < n]
                out[row, sel] = amps[sel]
            else:
                out[row] = self.vectors[:n, g] @ amps[g]
        return out

    def reconstruct(self) -> np.ndarray:
        """Σ E_j Q_j."""
        V_all = self.basis_matrix()
        out = np.zeros((self.size, self.size), dtype=complex)
        for g in self.groups:
            V = V_all[:, g]
            out += self.values[g].mean() * (V @ V.conj().T)
        return out


# ---------------------------------------------------------------------------
# OperatorHandle
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OperatorHandle:
    """
    Самосопряжённый оператор L: действие, опционально плотная матрица и спектр.

    После построения объект только читается; apply безопасно звать из разных потоков.
    growth_rate задаёт B(t) = e^{rate·t}; commutes_with_gamma=True означает B ≡ 1.
    """

    dim: int
    apply_fn: Callable[[np.ndarray], np.ndarray]
    label: str
    basis: str
    kind: str = "matrix"
    dense_matrix: Optional[np.ndarray] = None
    dense_fn: Optional[Callable[[], np.ndarray]] = None
    eig_data: Optional[EigenData] = None
    norm_bound: Optional[float] = None
    commutes_with_gamma: bool = False
    growth_rate: Optional[float] = None
    lattice: Optional[TorusLattice] = None

    def apply(self, x: Union[SpectralState, np.ndarray]) -> Union[SpectralState, np.ndarray]:
        if isinstance(x, SpectralState):
            if x.size != self.dim:
                raise DimensionError(f"operator dim {self.dim} vs state size {x.size}")
            return x.with_coeffs(self.apply_fn(x.coeffs))
        return self.apply_fn(np.asarray(x, dtype=complex))

    @property
    def has_dense(self) -> bool:
        return self.dense_matrix is not None or self.dim <= config.DENSE_MAX_DIM

    @cached_property
    def dense(self) -> np.ndarray:
        if self.dense_matrix is not None:
            return self.dense_matrix
        if self.dim > config.DENSE_MAX_DIM:
            raise CapabilityError(f"operator {self.label} too large for a dense matrix (N={self.dim})")
        if self.dense_fn is not None:
            return self.dense_fn()
        eye = np.eye(self.dim, dtype=complex)
        return np.column_stack([self.apply_fn(eye[:, j]) for j in range(self.dim)])

    @property
    def has_eig(self) -> bool:
        return self.eig_data is not None or self.has_dense

    @cached_property
    def eig(self) -> EigenData:
        if self.eig_data is not None:
            return self.eig_data
        if not self.has_dense:
            raise CapabilityError(f"operator {self.label} has no eigendecomposition")
        logger.debug("Diagonalizing %s (N=%d)", self.label, self.dim)
        return EigenData.from_hermitian(self.dense)

    @cached_property
    def spectral_bound(self) -> float:
        """Верхняя оценка ‖L‖ (для шага RK4)."""
        if self.norm_bound is not None:
            return float(self.norm_bound)
        if self.eig_data is not None:
            return float(np.max(np.abs(self.eig_data.values)))
        return float(np.max(np.abs(scipy.linalg.eigvalsh(self.dense))))


def dense_handle(
    matrix: np.ndarray,
    label: str,
    basis: str,
    kind: str = "matrix",
    eig: Optional[EigenData] = None,
    commutes_with_gamma: bool = False,
) -> OperatorHandle:
    matrix = np.asarray(matrix, dtype=complex)
    return OperatorHandle(
        dim=matrix.shape[0],
        apply_fn=lambda c, _m=matrix: _m @ c,
        label=label,
        basis=basis,
        kind=kind,
        dense_matrix=matrix,
        eig_data=eig,
        commutes_with_gamma=commutes_with_gamma,
    )


# ---------------------------------------------------------------------------
# Якобиевы матрицы
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class JacobiOperator:
    """(L̃u)_n = a_n u_{n+1} + a_{n-1} u_{n-1} + v_n u_n, граничное условие u_0 ≡ 0."""

    a: np.ndarray
    v: np.ndarray
    label: str = "jacobi"

    def __post_init__(self) -> None:
        a = np.array(self.a, dtype=float)
        v = np.array(self.v, dtype=float)
        if a.size != v.size - 1:
            raise DimensionError(f"off-diagonal length {a.size} must be N-1 for N={v.size}")
        if np.any(a <= 0):
            raise ValidationError("Jacobi off-diagonal entries must be positive")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "v", v)

    @property
    def size(self) -> int:
        return int(self.v.size)

    def dense(self) -> np.ndarray:
        return np.diag(self.v) + np.diag(self.a, 1) + np.diag(self.a, -1)

    def apply(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u)
        out = self.v * u
        out[:-1] = out[:-1] + self.a * u[1:]
        out[1:] = out[1:] + self.a * u[:-1]
        return out

    def handle(self) -> OperatorHandle:
        return dense_handle(self.dense(), self.label, abstract_basis(self.size), kind="jacobi")


def build_wvn_schrodinger(N: int) -> JacobiOperator:
    """Потенциал Вигнера–фон Неймана: v_1 = -1, v_n = -2/(n+2) (n чётн.), 2/(n-1) (n>1 нечётн.)."""
    if N < 4:
        raise SizeError(f"WvN operator needs N >= 4, got {N}")
    n = np.arange(1, N + 1, dtype=float)
    v = np.where(n % 2 == 0, -2.0 / (n + 2.0), 2.0 / np.maximum(n - 1.0, 1.0))
    v[0] = -1.0
    return JacobiOperator(np.ones(N - 1), v, label=f"wvn-{N}")


def wvn_zero_mode(N: int) -> SpectralState:
    """u_{2n-1} = u_{2n} = (-1)^n / n, без нормировки."""
    if N < 4 or N % 2:
        raise SizeError(f"WvN zero mode needs even N >= 4, got {N}")
    n = np.arange(1, N // 2 + 1, dtype=float)
    half = (-1.0) ** n / n
    return SpectralState(np.repeat(half, 2), abstract_basis(N))


def build_free_jacobi(N: int) -> JacobiOperator:
    if N < 2:
        raise SizeError(f"free Jacobi matrix needs N >= 2, got {N}")
    return JacobiOperator(np.ones(N - 1), np.zeros(N), label=f"free-{N}")


def build_random_jacobi(N: int, rng: np.random.Generator) -> JacobiOperator:
    """Случайный член зоопарка: a_n ∈ [0.5, 1.5], v_n ∈ [-1, 1]."""
    if N < 2:
        raise SizeError(f"random Jacobi matrix needs N >= 2, got {N}")
    a = rng.uniform(0.5, 1.5, size=N - 1)
    v = rng.uniform(-1.0, 1.0, size=N)
    return JacobiOperator(a, v, label=f"random-{N}")


@dataclass(frozen=True, eq=False)
class ProjectedSystem:
    """
    Конечномерный суррогат P Γ̃ P и P L̃ P на спектральной полосе.

    Базис редуцированной системы — собственные векторы PΓ̃P (столбцы basis_map),
    поэтому gamma диагональна и задаётся лестницей ladder.
    """

    gamma: OperatorHandle
    operator: OperatorHandle
    ladder: GammaLadder
    basis_map: np.ndarray
    retained_eigenvalues: np.ndarray
    discarded: int

    @property
    def dim(self) -> int:
        return int(self.basis_map.shape[1])

    def embed(self, state: SpectralState) -> SpectralState:
        if state.size != self.basis_map.shape[0]:
            raise DimensionError(f"state size {state.size} vs ambient {self.basis_map.shape[0]}")
        return SpectralState(self.basis_map.conj().T @ state.coeffs, self.operator.basis)


def project_out_band_exterior(
    jacobi: JacobiOperator,
    ladder: GammaLadder,
    band: Tuple[float, float] = (-2.0, 2.0),
) -> ProjectedSystem:
    if ladder.size != jacobi.size:
        raise DimensionError(f"ladder size {ladder.size} vs operator size {jacobi.size}")
    lo, hi = band
    values, vectors = scipy.linalg.eigh(jacobi.dense())
    keep = (values >= lo) & (values <= hi)
    retained = int(keep.sum())
    if retained == 0:
        raise DegenerateError(f"no eigenvalues of {jacobi.label} inside band [{lo}, {hi}]")

    V = vectors[:, keep]
    E = values[keep]
    gamma_r = V.T @ (ladder.lambdas[:, None] * V)
    mu, W = scipy.linalg.eigh(gamma_r)
    mu = np.maximum(mu, np.finfo(float).tiny)
    basis_map = (V @ W).astype(complex)
    L_r = W.T @ (E[:, None] * W)
    L_r = 0.5 * (L_r + L_r.T)

    basis = f"projected-{jacobi.label}-{retained}"
    eig = EigenData(E.copy(), W.T.astype(complex), group_eigenvalues(E))
    operator = dense_handle(L_r, f"{jacobi.label}-projected", basis, kind="projected", eig=eig)
    gamma = dense_handle(np.diag(mu), f"{ladder.label}-projected", basis, kind="gamma", commutes_with_gamma=True)

    logger.info(
        "Projected %s onto band [%g, %g]: kept %d of %d eigenvectors",
        jacobi.label, lo, hi, retained, jacobi.size,
    )
    return ProjectedSystem(
        gamma=gamma,
        operator=operator,
        ladder=GammaLadder(mu, f"{ladder.label}-projected"),
        basis_map=basis_map,
        retained_eigenvalues=E,
        discarded=jacobi.size - retained,
    )


# ---------------------------------------------------------------------------
# Поля скоростей на T²
# ---------------------------------------------------------------------------


def _gradient_boxes(box: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    K = (box.shape[0] - 1) // 2
    k1, k2 = centered_wavenumbers(K)
    return -2j * np.pi * k1 * box, -2j * np.pi * k2 * box


@dataclass(frozen=True, eq=False)
class VelocityField:
    """
    Поле u = (u1, u2) коэффициентами на квадрате |k|_∞ ≤ K (мода k ↔ e^{-2πik·x}).

    lip — оценка ‖u‖_Lip по сетке; stream — коэффициенты функции тока, если поле из неё.
    """

    coeffs: np.ndarray
    K: int
    lip: float
    label: str
    stream: Optional[np.ndarray] = None

    def divergence_box(self) -> np.ndarray:
        d1, _ = _gradient_boxes(self.coeffs[0])
        _, d2 = _gradient_boxes(self.coeffs[1])
        return d1 + d2

    def divergence_norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.divergence_box()) ** 2)))

    def reality_defect(self) -> float:
        mirrored = self.coeffs[:, ::-1, ::-1].conj()
        return float(np.max(np.abs(self.coeffs - mirrored)))

    def grid(self, M: int) -> Tuple[np.ndarray, np.ndarray]:
        return box_to_grid(self.coeffs[0], M).real, box_to_grid(self.coeffs[1], M).real

    def mean_flow(self) -> Tuple[float, float]:
        return float(self.coeffs[0][self.K, self.K].real), float(self.coeffs[1][self.K, self.K].real)

    # --------------- Конструкторы ---------------

    @classmethod
    def from_boxes(cls, coeffs: np.ndarray, label: str, stream: Optional[np.ndarray] = None) -> "VelocityField":
        coeffs = np.asarray(coeffs, dtype=complex)
        K = (coeffs.shape[1] - 1) // 2
        return cls(coeffs, K, estimate_lipschitz(coeffs), label, stream)

    @classmethod
    def from_grid(
        cls, u1: np.ndarray, u2: np.ndarray, K: int, label: str, project: bool = True
    ) -> Tuple["VelocityField", float]:
        """Поле по сеточным значениям; возвращает (поле, норма дивергенции до проекции)."""
        coeffs = np.stack([grid_to_box(np.asarray(u1, dtype=complex), K), grid_to_box(np.asarray(u2, dtype=complex), K)])
        coeffs = 0.5 * (coeffs + coeffs[:, ::-1, ::-1].conj())
        raw = cls.from_boxes(coeffs, label)
        before = raw.divergence_norm()
        if not project:
            return raw, before
        return cls.from_boxes(leray_project(coeffs), label), before

    @classmethod
    def from_stream(cls, psi_box: np.ndarray, label: str) -> "VelocityField":
        """u = (∂_y ψ, -∂_x ψ) — бездивергентно по построению."""
        psi_box = np.asarray(psi_box, dtype=complex)
        dx, dy = _gradient_boxes(psi_box)
        return cls.from_boxes(np.stack([dy, -dx]), label, stream=psi_box)

    @classmethod
    def constant(cls, alpha: Sequence[float], label: str = "constant") -> "VelocityField":
        coeffs = np.zeros((2, 3, 3), dtype=complex)
        coeffs[0, 1, 1] = alpha[0]
        coeffs[1, 1, 1] = alpha[1]
        return cls(coeffs, 1, 0.0, label)


def leray_project(coeffs: np.ndarray) -> np.ndarray:
    """û_k ← û_k - k (k·û_k)/|k|² для k ≠ 0."""
    K = (coeffs.shape[1] - 1) // 2
    k1, k2 = centered_wavenumbers(K)
    k_sq = (k1**2 + k2**2).astype(float)
    k_sq[K, K] = 1.0
    dot = (k1 * coeffs[0] + k2 * coeffs[1]) / k_sq
    return np.stack([coeffs[0] - k1 * dot, coeffs[1] - k2 * dot])


def estimate_lipschitz(coeffs: np.ndarray, M: Optional[int] = None) -> float:
    """max по сетке спектральной нормы ∇u."""
    K = (coeffs.shape[1] - 1) // 2
    M = M or max(4 * K + 2, 16)
    jac = np.empty((M, M, 2, 2))
    for b in range(2):
        da, db = _gradient_boxes(coeffs[b])
        jac[:, :, b, 0] = box_to_grid(da, M).real
        jac[:, :, b, 1] = box_to_grid(db, M).real
    return float(np.max(np.linalg.norm(jac, ord=2, axis=(-2, -1))))


# ---------------------------------------------------------------------------
# Генераторы на торе
# ---------------------------------------------------------------------------


def build_constant_flow_generator(alpha: Sequence[float], K: int) -> OperatorHandle:
    """Диагональный L: 2π(α·k) на моде k (собственная функция e^{-2πik·x})."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (2,):
        raise ParameterError(f"constant flow on T^2 needs a 2-vector alpha, got shape {alpha.shape}")
    lattice = TorusLattice(K)
    values = 2.0 * np.pi * (lattice.modes @ alpha)
    return OperatorHandle(
        dim=lattice.size,
        apply_fn=lambda c, _d=values: _d * c,
        label=f"constant-flow-{K}",
        basis=lattice.label,
        kind="constant-flow",
        dense_fn=lambda _d=values: np.diag(_d).astype(complex),
        eig_data=EigenData.diagonal(values),
        norm_bound=float(np.max(np.abs(values))),
        commutes_with_gamma=True,
        growth_rate=0.0,
        lattice=lattice,
    )


def _advection_matrix(u: VelocityField, lattice: TorusLattice) -> np.ndarray:
    """L_{k,j} = 2π û_{k-j}·j — точная галёркинская матрица i u·∇."""
    modes = lattice.modes
    diff = modes[:, None, :] - modes[None, :, :]
    inside = np.all(np.abs(diff) <= u.K, axis=2)
    r1 = np.clip(diff[..., 0] + u.K, 0, 2 * u.K)
    r2 = np.clip(diff[..., 1] + u.K, 0, 2 * u.K)
    mat = 2.0 * np.pi * (u.coeffs[0][r1, r2] * modes[None, :, 0] + u.coeffs[1][r1, r2] * modes[None, :, 1])
    mat[~inside] = 0.0
    return mat


def build_advection_generator(u: VelocityField, K: int, grid: Optional[int] = None) -> OperatorHandle:
    """
    Матрично-свободный L = i u·∇ на решётке |k|_∞ ≤ K.

    Произведение считается на сетке M ≥ 2K + K_u + 1 (zero-padding), затем усекается до K,
    так что действие совпадает с галёркинской матрицей без алиасинга.
    """
    div = u.divergence_norm()
    if div > DIVERGENCE_TOL:
        raise ValidationError(f"velocity field {u.label} is not divergence-free: |div u| = {div:.3e}")
    lattice = TorusLattice(K)
    M = lattice.grid_size(u.K, grid)
    u1, u2 = u.grid(M)

    def apply(c: np.ndarray) -> np.ndarray:
        box = lattice.to_box(c)
        gx, gy = _gradient_boxes(box)
        product = u1 * box_to_grid(gx, M) + u2 * box_to_grid(gy, M)
        out, _ = lattice.from_box(grid_to_box(product, K))
        return 1j * out

    speed = float(np.sum(np.abs(u.coeffs[0])) + np.sum(np.abs(u.coeffs[1])))
    return OperatorHandle(
        dim=lattice.size,
        apply_fn=apply,
        label=f"advection-{u.label}-{K}",
        basis=lattice.label,
        kind="advection",
        dense_fn=lambda: _advection_matrix(u, lattice),
        norm_bound=2.0 * np.pi * np.sqrt(2.0) * K * speed,
        growth_rate=u.lip,
        lattice=lattice,
    )


# ---------------------------------------------------------------------------
# Амплитуда Прюфера
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PruferTrace:
    R: np.ndarray
    c: np.ndarray
    ratio: np.ndarray
    decay_constant: float
    n0: int


def prufer_trace(jacobi: JacobiOperator, E: float, u: SpectralState, n0: int = 1) -> PruferTrace:
    """
    R_n = u_n² + u_{n-1}² - E u_n u_{n-1} (n = 1..N, u_0 = 0),
    c_n = |a_n - 1| + |a_{n-1} - 1| + |v_n|, ratio_n = R_{n+1}/R_n,
    и минимальная C с R_n ≥ R_{n0} exp(-C√n) на хвосте n ≥ n0.
    """
    if not -2.0 < E < 2.0:
        raise ParameterError(f"energy {E} must lie in (-2, 2)")
    vec = np.real_if_close(np.asarray(u.coeffs))
    if vec.size != jacobi.size:
        raise DimensionError(f"state size {vec.size} vs operator size {jacobi.size}")
    if not np.any(vec != 0):
        raise ParameterError("Prufer trace of the zero vector")
    vec = np.real(vec)
    prev = np.concatenate([[0.0], vec[:-1]])
    R = vec**2 + prev**2 - E * vec * prev

    active = (vec != 0) | (prev != 0)
    bad = np.flatnonzero(active & (R <= 0))
    if bad.size:
        n = int(bad[0]) + 1
        raise InvariantViolation("prufer_positivity", f"R_{n} = {R[bad[0]]:.3e} <= 0 at |E| < 2", float(R[bad[0]]))

    a_ext = np.concatenate([[1.0], jacobi.a, [1.0]])
    c = np.abs(a_ext[1:] - 1.0) + np.abs(a_ext[:-1] - 1.0) + np.abs(jacobi.v)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(R[:-1] > 0, R[1:] / R[:-1], np.nan)

    if not 1 <= n0 <= vec.size:
        raise ParameterError(f"tail start n0={n0} outside 1..{vec.size}")
    tail = np.arange(n0, vec.size + 1)
    ref = R[n0 - 1]
    with np.errstate(divide="ignore"):
        needed = -np.log(R[tail - 1] / ref) / np.sqrt(tail)
    decay_constant = float(max(0.0, np.max(needed))) if ref > 0 else float("inf")
    return PruferTrace(R=R, c=c, ratio=ratio, decay_constant=decay_constant, n0=n0)
