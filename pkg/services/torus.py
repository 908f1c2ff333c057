from __future__ import annotations

import logging
from typing import Optional, Tuple

import numpy as np

from services.errors import DimensionError, SizeError

logger = logging.getLogger(__name__)

# Соглашение: мода с меткой k — это функция e^{-2πik·x} на T² = [0,1)².
# Тогда значения на сетке x = n/M получаются прямым fft2 от коэффициентов,
# а коэффициенты — обратным ifft2.


def centered_wavenumbers(K: int) -> Tuple[np.ndarray, np.ndarray]:
    """Сетки (k1, k2) для квадрата |k|_∞ ≤ K, индексация 'ij'."""
    ks = np.arange(-K, K + 1)
    return np.meshgrid(ks, ks, indexing="ij")


def box_to_grid(box: np.ndarray, M: int) -> np.ndarray:
    """Центрированный квадрат коэффициентов (2K+1)² → значения на сетке M×M (zero-padding)."""
    K = (box.shape[0] - 1) // 2
    if M < 2 * K + 1:
        raise SizeError(f"grid {M} cannot hold band K={K}")
    idx = np.arange(-K, K + 1) % M
    padded = np.zeros((M, M), dtype=complex)
    padded[np.ix_(idx, idx)] = box
    return np.fft.fft2(padded)


def grid_to_box(grid: np.ndarray, K: int) -> np.ndarray:
    """Значения на сетке M×M → коэффициенты квадрата |k|_∞ ≤ K (усечение)."""
    M = grid.shape[0]
    if grid.shape != (M, M):
        raise DimensionError(f"expected square grid, got {grid.shape}")
    if M < 2 * K + 1:
        raise SizeError(f"grid {M} cannot hold band K={K}")
    coeffs = np.fft.ifft2(grid)
    idx = np.arange(-K, K + 1) % M
    return coeffs[np.ix_(idx, idx)]


def collocation_points(M: int) -> Tuple[np.ndarray, np.ndarray]:
    xs = np.arange(M) / M
    return np.meshgrid(xs, xs, indexing="ij")


class TorusLattice:
    """
    Ненулевые моды квадрата |k|_∞ ≤ K, упорядоченные по (|k|², k1, k2).

    Порядок фиксирует лестницу 4π²|k|² и делает P_N воспроизводимым.
    Средняя мода k = 0 в вектор не входит и хранится отдельно (SpectralState.mean).
    """

    def __init__(self, K: int) -> None:
        if K < 1:
            raise SizeError(f"lattice band K must be >= 1, got {K}")
        self.K = int(K)
        k1, k2 = centered_wavenumbers(self.K)
        modes = np.stack([k1.ravel(), k2.ravel()], axis=1)
        modes = modes[np.any(modes != 0, axis=1)]
        order = np.lexsort((modes[:, 1], modes[:, 0], (modes**2).sum(axis=1)))
        self.modes = modes[order]
        self.modes.setflags(write=False)
        self._rows = self.modes[:, 0] + self.K
        self._cols = self.modes[:, 1] + self.K
        self._index = {(int(a), int(b)): i for i, (a, b) in enumerate(self.modes)}

    @property
    def size(self) -> int:
        return int(self.modes.shape[0])

    @property
    def label(self) -> str:
        return f"torus-laplacian-{self.K}"

    @property
    def box_shape(self) -> Tuple[int, int]:
        return (2 * self.K + 1, 2 * self.K + 1)

    def index_of(self, k: Tuple[int, int]) -> int:
        key = (int(k[0]), int(k[1]))
        if key not in self._index:
            raise DimensionError(f"mode {key} is not in lattice K={self.K}")
        return self._index[key]

    def squared_norms(self) -> np.ndarray:
        return (self.modes**2).sum(axis=1).astype(float)

    def grid_size(self, velocity_band: Optional[int] = None, requested: Optional[int] = None) -> int:
        """
        Минимальная чётная сетка без алиасинга для произведения u·∇f:
        M ≥ 2K + K_u + 1 и не меньше 3K+1.
        """
        k_u = self.K if velocity_band is None else int(velocity_band)
        need = max(2 * self.K + k_u + 1, 3 * self.K + 1)
        if requested is not None:
            need = max(need, int(requested))
        return need + (need % 2)

    # --------------- Преобразования ---------------

    def to_box(self, coeffs: np.ndarray, mean: complex = 0.0) -> np.ndarray:
        coeffs = np.asarray(coeffs)
        if coeffs.shape != (self.size,):
            raise DimensionError(f"expected {self.size} coefficients, got {coeffs.shape}")
        box = np.zeros(self.box_shape, dtype=complex)
        box[self._rows, self._cols] = coeffs
        box[self.K, self.K] = mean
        return box

    def from_box(self, box: np.ndarray) -> Tuple[np.ndarray, complex]:
        if box.shape != self.box_shape:
            raise DimensionError(f"expected box {self.box_shape}, got {box.shape}")
        return box[self._rows, self._cols].copy(), complex(box[self.K, self.K])

    def to_grid(self, coeffs: np.ndarray, mean: complex, M: int) -> np.ndarray:
        return box_to_grid(self.to_box(coeffs, mean), M)

    def from_grid(self, grid: np.ndarray) -> Tuple[np.ndarray, complex]:
        return self.from_box(grid_to_box(grid, self.K))

    def basis_function(self, k: Tuple[int, int], M: int) -> np.ndarray:
        X, Y = collocation_points(M)
        return np.exp(-2j * np.pi * (k[0] * X + k[1] * Y))
