from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Sequence

import numpy as np

from services.errors import BasisMismatchError, DimensionError, ParameterError, SizeError
from services.torus import TorusLattice

logger = logging.getLogger(__name__)

# Индексация базиса: в документации e_1, e_2, … (с единицы), внутри — с нуля.
# Перевод между ними живёт только здесь (basis_vector, ModeProjection).


@dataclass(frozen=True, eq=False)
class GammaLadder:
    """Неубывающая положительная лестница собственных значений Γ."""

    lambdas: np.ndarray
    label: str

    def __post_init__(self) -> None:
        lam = np.array(self.lambdas, dtype=float)
        if lam.ndim != 1 or lam.size == 0:
            raise SizeError("ladder must be a nonempty 1-D sequence")
        if lam[0] <= 0:
            raise ParameterError(f"ladder must be positive, lambda_1 = {lam[0]}")
        if np.any(np.diff(lam) < 0):
            raise ParameterError("ladder must be nondecreasing")
        lam.setflags(write=False)
        object.__setattr__(self, "lambdas", lam)

    @property
    def size(self) -> int:
        return int(self.lambdas.size)

    @classmethod
    def diagonal(cls, n: int, power: float = 1.0) -> "GammaLadder":
        """λ_n = n^power, n = 1..N."""
        if n < 1:
            raise SizeError(f"ladder size must be >= 1, got {n}")
        lam = np.arange(1, n + 1, dtype=float) ** power
        tag = "diag-n" if power == 1.0 else f"diag-n^{power:g}"
        return cls(lam, tag)

    @classmethod
    def torus(cls, lattice: TorusLattice) -> "GammaLadder":
        """4π²|k|² по ненулевым модам решётки (средняя мода исключена)."""
        return cls(4.0 * np.pi**2 * lattice.squared_norms(), lattice.label)

    def low_block(self, n_low: int) -> np.ndarray:
        if n_low > self.size:
            raise DimensionError(f"cutoff {n_low} exceeds ladder size {self.size}")
        return self.lambdas[:n_low]


@dataclass(frozen=True, eq=False)
class SpectralState:
    coeffs: np.ndarray
    basis: str
    mean: complex = 0.0

    def __post_init__(self) -> None:
        c = np.array(self.coeffs, dtype=complex)
        if c.ndim != 1:
            raise DimensionError(f"state must be a vector, got shape {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "mean", complex(self.mean))

    @property
    def size(self) -> int:
        return int(self.coeffs.size)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.coeffs))

    def with_coeffs(self, coeffs: np.ndarray) -> "SpectralState":
        return SpectralState(coeffs, self.basis, self.mean)

    def normalized(self) -> "SpectralState":
        n = self.norm
        if n == 0:
            raise ParameterError("cannot normalize the zero state")
        return SpectralState(self.coeffs / n, self.basis, self.mean)

    # --------------- JSON ---------------

    def to_json(self) -> Dict[str, Any]:
        return {
            "basis": self.basis,
            "mean": [self.mean.real, self.mean.imag],
            "coeffs": [[float(z.real), float(z.imag)] for z in self.coeffs],
        }

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> "SpectralState":
        pairs: List[Sequence[float]] = data["coeffs"]
        coeffs = np.array([complex(re, im) for re, im in pairs], dtype=complex)
        mean = data.get("mean", [0.0, 0.0])
        return cls(coeffs, data["basis"], complex(mean[0], mean[1]))


@dataclass(frozen=True)
class ModeProjection:
    """P_N: ортогональный проектор на первые N мод (N — по счёту с единицы)."""

    cutoff: int

    def __post_init__(self) -> None:
        if int(self.cutoff) < 1:
            raise ParameterError(f"cutoff must be a positive integer, got {self.cutoff}")


def basis_vector(n: int, j: int, basis: str) -> SpectralState:
    """e_j в базисе длины n (j с единицы)."""
    if not 1 <= j <= n:
        raise DimensionError(f"basis index {j} outside 1..{n}")
    c = np.zeros(n, dtype=complex)
    c[j - 1] = 1.0
    return SpectralState(c, basis)


def sobolev_norm(state: SpectralState, ladder: GammaLadder, m: float) -> float:
    if state.size != ladder.size:
        raise DimensionError(f"state has {state.size} coefficients, ladder has {ladder.size}")
    if not -2.0 <= m <= 2.0:
        raise ParameterError(f"Sobolev index {m} outside supported range [-2, 2]")
    weights = ladder.lambdas**m
    return float(np.sqrt(np.sum(weights * np.abs(state.coeffs) ** 2)))


def project_low_modes(state: SpectralState, p: ModeProjection) -> SpectralState:
    if p.cutoff > state.size:
        raise DimensionError(f"cutoff {p.cutoff} exceeds state size {state.size}")
    c = np.array(state.coeffs)
    c[p.cutoff:] = 0.0
    return SpectralState(c, state.basis, state.mean)


def inner_product(a: SpectralState, b: SpectralState) -> complex:
    """⟨a, b⟩ = Σ conj(a_j) b_j — сопряжение в первом аргументе."""
    if a.basis != b.basis:
        raise BasisMismatchError(f"basis mismatch: {a.basis!r} vs {b.basis!r}")
    if a.size != b.size:
        raise DimensionError(f"size mismatch: {a.size} vs {b.size}")
    return complex(np.vdot(a.coeffs, b.coeffs))


def weighted_sq(coeffs: np.ndarray, ladder: GammaLadder, m: float = 1.0) -> float:
    """Σ λ_j^m |c_j|² для сырых массивов (горячий путь движка)."""
    return float(np.sum(ladder.lambdas**m * np.abs(coeffs) ** 2))
