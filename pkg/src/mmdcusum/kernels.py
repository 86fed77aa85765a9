"""Bounded characteristic kernels on real vectors and Gram-sum primitives.

Both families are normalized so that ``k(x, x) = 1``; the sup bound
``k_bar`` is therefore 1 and is exposed as :attr:`Kernel.sup_bound` so
that span bounds such as ``sqrt(2 * k_bar)`` stay correct if other
families are added.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import CalibrationError, ConfigurationError, InputError

RATIONAL_QUADRATIC = "rational-quadratic"
GAUSSIAN_RBF = "gaussian-rbf"
FAMILIES = (RATIONAL_QUADRATIC, GAUSSIAN_RBF)

# Column tile used by all Gram sums; fixed so summation order never depends
# on the caller.
TILE = 2048

ArrayLike = Union[np.ndarray, Sequence[Sequence[float]], Sequence[float]]


def as_samples(X: ArrayLike, name: str = "samples") -> np.ndarray:
    """Coerce a sample list to a C-contiguous ``(n, d)`` float64 array."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise InputError(f"{name} must be a list of vectors, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise InputError(f"{name} is empty")
    if arr.shape[1] == 0:
        raise InputError(f"{name} has zero-dimensional vectors")
    return np.ascontiguousarray(arr)


@dataclass(frozen=True)
class Kernel:
    family: str = RATIONAL_QUADRATIC
    sigma: float = 1.0

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        sigma = float(self.sigma)
        if not math.isfinite(sigma) or sigma <= 0:
            raise ConfigurationError(f"kernel sigma must be a positive finite number, got {self.sigma!r}")
        object.__setattr__(self, "sigma", sigma)

    @property
    def sup_bound(self) -> float:
        return 1.0

    def from_sqdist(self, d2: np.ndarray) -> np.ndarray:
        """Kernel values from squared Euclidean distances."""
        if self.family == RATIONAL_QUADRATIC:
            # (1 + d2 / 2s)^(-s), via log1p for accuracy at small d2
            return np.exp(-self.sigma * np.log1p(d2 / (2.0 * self.sigma)))
        return np.exp(-d2 / (2.0 * self.sigma * self.sigma))

    def eval(self, x: ArrayLike, y: ArrayLike) -> float:
        xv = np.atleast_1d(np.asarray(x, dtype=np.float64))
        yv = np.atleast_1d(np.asarray(y, dtype=np.float64))
        if xv.ndim != 1 or yv.ndim != 1 or xv.shape != yv.shape or xv.size == 0:
            raise InputError(f"eval expects two vectors of equal dimension, got {xv.shape} and {yv.shape}")
        d2 = cdist(xv[None, :], yv[None, :], "sqeuclidean")
        return float(self.from_sqdist(d2)[0, 0])

    def matrix(self, X: ArrayLike, Y: ArrayLike) -> np.ndarray:
        """Full kernel matrix ``K[i, j] = k(X_i, Y_j)``."""
        Xa, Ya = _pair(X, Y)
        return self.from_sqdist(cdist(Xa, Ya, "sqeuclidean"))

    def paired(self, X: ArrayLike, Y: ArrayLike) -> np.ndarray:
        """Row-aligned values ``k(X_i, Y_i)``."""
        Xa, Ya = _pair(X, Y)
        if Xa.shape[0] != Ya.shape[0]:
            raise InputError("paired evaluation needs equally many rows")
        diff = Xa - Ya
        return self.from_sqdist(np.einsum("ij,ij->i", diff, diff))

    def to_dict(self) -> dict:
        return {"family": self.family, "sigma": self.sigma}


def _pair(X: ArrayLike, Y: ArrayLike) -> tuple[np.ndarray, np.ndarray]:
    Xa = as_samples(X, "X")
    Ya = as_samples(Y, "Y")
    if Xa.shape[1] != Ya.shape[1]:
        raise InputError(f"dimension mismatch: {Xa.shape[1]} vs {Ya.shape[1]}")
    return Xa, Ya


def row_sums(kernel: Kernel, X: ArrayLike, Y: ArrayLike) -> np.ndarray:
    """``out[i] = sum_j k(X_i, Y_j)``.

    Each row's value depends only on that row and ``Y`` (tiles over ``Y``
    are accumulated in a fixed order), so batching rows never changes the
    result.
    """
    Xa, Ya = _pair(X, Y)
    out = np.zeros(Xa.shape[0])
    for start in range(0, Ya.shape[0], TILE):
        tile = Ya[start:start + TILE]
        out += kernel.from_sqdist(cdist(Xa, tile, "sqeuclidean")).sum(axis=1)
    return out


def gram_sum(kernel: Kernel, X: ArrayLike, Y: ArrayLike) -> float:
    """Sum of ``k(X_i, Y_j)`` over all pairs."""
    return math.fsum(row_sums(kernel, X, Y))


def median_heuristic(X: ArrayLike, max_points: int = 1000, seed: int = 0) -> float:
    """Median pairwise Euclidean distance, subsampled to ``max_points``.

    When more than half of the pairs coincide (discrete data) the median of
    the strictly positive distances is used instead.
    """
    Xa = np.asarray(X, dtype=np.float64)
    if Xa.ndim == 1:
        Xa = Xa.reshape(-1, 1)
    if Xa.ndim != 2 or Xa.shape[0] < 2:
        raise CalibrationError("median heuristic needs at least two samples")
    if Xa.shape[0] > max_points:
        rng = np.random.default_rng(seed)
        Xa = Xa[np.sort(rng.choice(Xa.shape[0], size=max_points, replace=False))]
    dists = pdist(Xa, "euclidean")
    positive = dists[dists > 0]
    if positive.size == 0:
        raise CalibrationError("degenerate sample set: all points coincide")
    med = float(np.median(dists))
    if med > 0:
        return med
    return float(np.median(positive))


def resolve_kernel(params: dict, reference: Optional[ArrayLike] = None, seed: int = 0) -> Kernel:
    """Build a kernel from ``{family, sigma}``; ``sigma = "median"`` uses the heuristic."""
    family = params.get("family", RATIONAL_QUADRATIC)
    sigma = params.get("sigma", "median")
    if isinstance(sigma, str):
        if sigma.strip().lower() != "median":
            try:
                sigma = float(sigma)
            except ValueError:
                raise ConfigurationError(f"sigma must be a number or 'median', got {sigma!r}") from None
        else:
            if reference is None:
                raise ConfigurationError("sigma='median' needs reference samples")
            sigma = median_heuristic(reference, seed=seed)
    return Kernel(family, sigma)
