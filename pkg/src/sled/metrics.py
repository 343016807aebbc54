"""Maximum mean discrepancy and generalized energy distance estimators.

Sample sets are ``(count, dim)`` float arrays. Semimetrics are of the form
``d(x, y) = ||x - y||_2 ** beta`` with ``0 < beta < 2``. Two kernels are
supported: a Gaussian RBF kernel and the kernel induced by a semimetric
around a base point ``z``::

    k(x, y) = d(x, z) + d(y, z) - 2 d(x, y)

With this (unhalved) induced kernel, the biased MMD^2 on any pair of
empirical measures is exactly twice the biased GED^2, so
``ged2 / mmd2 == 0.5`` independently of the samples and of ``z``.

Every estimator evaluates its sums at 64-bit through :mod:`sled.kernels`
and orders its two arguments canonically, so ``f(X, Y)`` and ``f(Y, X)``
are bitwise equal.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import kernels

__all__ = [
    "EstimatorError",
    "DimensionMismatchError",
    "NonFiniteInputError",
    "InsufficientSamplesError",
    "UndefinedRatioError",
    "EstimatorKind",
    "Semimetric",
    "RBFKernel",
    "InducedKernel",
    "as_sample_set",
    "pairwise_distance_matrix",
    "kernel_matrix",
    "mmd2",
    "ged2",
    "equivalence_ratio",
    "DUALITY_CONSTANT",
]

#: ged2 / mmd2 under the unhalved induced kernel (see module docstring).
DUALITY_CONSTANT = 0.5


class EstimatorError(ValueError):
    """Base class for estimator input errors."""


class DimensionMismatchError(EstimatorError):
    pass


class NonFiniteInputError(EstimatorError):
    pass


class InsufficientSamplesError(EstimatorError):
    pass


class UndefinedRatioError(EstimatorError, ZeroDivisionError):
    """Raised when the MMD in a duality ratio is exactly zero."""


class EstimatorKind(str, enum.Enum):
    BIASED = "biased"
    UNBIASED = "unbiased"


@dataclass(frozen=True)
class Semimetric:
    """``d(x, y) = ||x - y|| ** beta``; negative type for ``beta`` in (0, 2)."""

    beta: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.beta < 2.0):
            raise ValueError(f"beta must lie in the open interval (0, 2), got {self.beta}")


@dataclass(frozen=True)
class RBFKernel:
    bandwidth: float = 1.0

    def __post_init__(self):
        if not (self.bandwidth > 0.0 and np.isfinite(self.bandwidth)):
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")


@dataclass(frozen=True)
class InducedKernel:
    """Kernel ``d(x, z) + d(y, z) - 2 d(x, y)`` generated by ``semimetric``."""

    base_point: tuple
    semimetric: Semimetric = Semimetric()

    def __post_init__(self):
        z = np.asarray(self.base_point, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(z)):
            raise NonFiniteInputError("base_point must be finite")
        object.__setattr__(self, "base_point", tuple(float(v) for v in z))

    @property
    def z(self) -> np.ndarray:
        return np.asarray(self.base_point, dtype=np.float64)[None, :]


def as_sample_set(points, name="X") -> np.ndarray:
    """Validate ``points`` and return a C-contiguous float64 ``(count, dim)`` array.

    A 1-D input is read as ``count`` scalar samples.
    """
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DimensionMismatchError(f"{name} must be 2-D (count, dim), got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InsufficientSamplesError(f"{name} must hold at least one point, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInputError(f"{name} has non-finite entries")
    return np.ascontiguousarray(arr)


def _prepare(X, Y):
    X = as_sample_set(X, "X")
    Y = as_sample_set(Y, "Y")
    if X.shape[1] != Y.shape[1]:
        raise DimensionMismatchError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    return X, Y


def _canonical(X, Y):
    # Fixed argument order makes f(X, Y) and f(Y, X) the same computation.
    if (X.shape[0], X.tobytes()) > (Y.shape[0], Y.tobytes()):
        return Y, X
    return X, Y


def _kind(kind) -> EstimatorKind:
    return EstimatorKind(kind)


def _check_counts(X, Y, kind):
    if kind is EstimatorKind.UNBIASED and min(X.shape[0], Y.shape[0]) < 2:
        raise InsufficientSamplesError("the unbiased estimator needs at least 2 points per set")


def pairwise_distance_matrix(X, Y, d: Semimetric = Semimetric()) -> np.ndarray:
    X, Y = _prepare(X, Y)
    return kernels.pairwise_distance(X, Y, d.beta)


def kernel_matrix(X, Y, k) -> np.ndarray:
    X, Y = _prepare(X, Y)
    if isinstance(k, RBFKernel):
        sq = kernels.pairwise_distance(X, Y, 2.0)
        return np.exp(-sq / (2.0 * k.bandwidth**2))
    if isinstance(k, InducedKernel):
        z = _base_point(k, X.shape[1])
        beta = k.semimetric.beta
        dxz = kernels.pairwise_distance(X, z, beta)
        dyz = kernels.pairwise_distance(Y, z, beta)
        return dxz + dyz.T - 2.0 * kernels.pairwise_distance(X, Y, beta)
    raise TypeError(f"unsupported kernel {k!r}")


def _base_point(k: InducedKernel, dim: int) -> np.ndarray:
    z = k.z
    if z.shape[1] != dim:
        raise DimensionMismatchError(f"base point has dim {z.shape[1]}, samples have dim {dim}")
    return z


def ged2(X, Y, d: Semimetric = Semimetric(), kind=EstimatorKind.UNBIASED) -> float:
    """Generalized energy distance ``E[2d(x,y) - d(x,x') - d(y,y')]``.

    The biased (V-statistic) form averages within-set distances over all
    ``n**2`` ordered pairs; the unbiased (U-statistic) form over the
    ``n(n-1)`` off-diagonal pairs.
    """
    X, Y = _prepare(X, Y)
    kind = _kind(kind)
    _check_counts(X, Y, kind)
    X, Y = _canonical(X, Y)
    n, m = X.shape[0], Y.shape[0]
    beta = d.beta
    cross = kernels.distance_sum(X, Y, beta) / (n * m)
    if kind is EstimatorKind.BIASED:
        within_x = kernels.distance_sum(X, X, beta) / (n * n)
        within_y = kernels.distance_sum(Y, Y, beta) / (m * m)
    else:
        within_x = kernels.distance_sum(X, X, beta) / (n * (n - 1))
        within_y = kernels.distance_sum(Y, Y, beta) / (m * (m - 1))
    return 2.0 * cross - (within_x + within_y)


def mmd2(X, Y, k=RBFKernel(), kind=EstimatorKind.UNBIASED) -> float:
    """Squared MMD ``E[k(x,x') + k(y,y') - 2k(x,y)]`` for an RBF or induced kernel."""
    X, Y = _prepare(X, Y)
    kind = _kind(kind)
    _check_counts(X, Y, kind)
    X, Y = _canonical(X, Y)
    n, m = X.shape[0], Y.shape[0]
    unbiased = kind is EstimatorKind.UNBIASED

    if isinstance(k, RBFKernel):
        kxx = kernels.rbf_sum(X, X, k.bandwidth)
        kyy = kernels.rbf_sum(Y, Y, k.bandwidth)
        kxy = kernels.rbf_sum(X, Y, k.bandwidth)
        if unbiased:
            # exp(0) == 1 on every diagonal entry
            kxx, kyy = kxx - n, kyy - m
    elif isinstance(k, InducedKernel):
        z = _base_point(k, X.shape[1])
        beta = k.semimetric.beta
        ax = kernels.distance_sum(X, z, beta)
        ay = kernels.distance_sum(Y, z, beta)
        # Sums of k over pair sets expanded through d; the diagonal of d is 0,
        # so only the d(., z) multiplicities change between the two kinds.
        rx = (n - 1) if unbiased else n
        ry = (m - 1) if unbiased else m
        kxx = 2.0 * rx * ax - 2.0 * kernels.distance_sum(X, X, beta)
        kyy = 2.0 * ry * ay - 2.0 * kernels.distance_sum(Y, Y, beta)
        kxy = (m * ax + n * ay) - 2.0 * kernels.distance_sum(X, Y, beta)
    else:
        raise TypeError(f"unsupported kernel {k!r}")

    if unbiased:
        mean_xx = kxx / (n * (n - 1))
        mean_yy = kyy / (m * (m - 1))
    else:
        mean_xx = kxx / (n * n)
        mean_yy = kyy / (m * m)
    return (mean_xx + mean_yy) - 2.0 * (kxy / (n * m))


class Equivalence(NamedTuple):
    ged2: float
    mmd2: float
    ratio: float


def equivalence_ratio(X, Y, d: Semimetric = Semimetric(), z=None) -> Equivalence:
    """Biased GED^2 under ``d`` against biased MMD^2 under the kernel ``d`` induces at ``z``.

    Raises :class:`UndefinedRatioError` when the MMD is exactly zero.
    """
    X, Y = _prepare(X, Y)
    if z is None:
        z = np.zeros(X.shape[1])
    k = InducedKernel(tuple(np.asarray(z, dtype=np.float64).reshape(-1)), d)
    g = ged2(X, Y, d, EstimatorKind.BIASED)
    m = mmd2(X, Y, k, EstimatorKind.BIASED)
    if m == 0.0:
        raise UndefinedRatioError("mmd2 is exactly zero; the ratio is undefined")
    return Equivalence(g, m, g / m)
