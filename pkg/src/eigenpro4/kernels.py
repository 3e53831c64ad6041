"""Radial kernels, kernel matrices and the top-q symmetric eigensystem."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist

from .errors import InputError, NumericError


class KernelFamily(str, Enum):
    LAPLACE = "laplace"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class KernelSpec:
    """A normalized radial kernel with length scale ``bandwidth``.

    Laplace: ``exp(-|x - z| / bandwidth)``; Gaussian:
    ``exp(-|x - z|^2 / (2 bandwidth^2))``. Both use the Euclidean norm.
    """

    family: KernelFamily = KernelFamily.LAPLACE
    bandwidth: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "family", KernelFamily(self.family))
        if not (np.isfinite(self.bandwidth) and self.bandwidth > 0):
            raise InputError(f"bandwidth must be positive, got {self.bandwidth}")

    def from_distance(self, dist: np.ndarray) -> np.ndarray:
        if self.family is KernelFamily.LAPLACE:
            return np.exp(-dist / self.bandwidth)
        return np.exp(-(dist ** 2) / (2.0 * self.bandwidth ** 2))


def _as_points(A, name: str) -> np.ndarray:
    A = np.asarray(A)
    if A.ndim == 1:
        A = A[None, :]
    if A.ndim != 2 or A.shape[1] < 1:
        raise InputError(f"{name} must be a 2-d point set, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InputError(f"{name} contains non-finite coordinates")
    return A


def kernel_eval(spec: KernelSpec, x, z) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    z = np.asarray(z, dtype=np.float64).ravel()
    if x.shape != z.shape or x.size == 0:
        raise InputError(f"dimension mismatch: {x.shape} vs {z.shape}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
        raise InputError("non-finite coordinates")
    dist = np.sqrt(np.sum((x - z) ** 2))
    return float(spec.from_distance(dist))


def kernel_matrix(spec: KernelSpec, A, B, dtype=None) -> np.ndarray:
    """Return the ``len(A) x len(B)`` matrix ``K(A, B)``.

    Each entry is computed independently from its pair of points, so
    ``kernel_matrix(A, B)`` is bitwise equal to ``kernel_matrix(B, A).T``.
    """
    A = _as_points(A, "A")
    B = _as_points(B, "B")
    if A.shape[1] != B.shape[1]:
        raise InputError(f"dimension mismatch: d={A.shape[1]} vs d={B.shape[1]}")
    if dtype is None:
        dtype = np.result_type(A.dtype, B.dtype, np.float32)
    metric = "euclidean" if spec.family is KernelFamily.LAPLACE else "sqeuclidean"
    D = cdist(A.astype(np.float64, copy=False), B.astype(np.float64, copy=False), metric)
    if spec.family is KernelFamily.LAPLACE:
        K = np.exp(-D / spec.bandwidth)
    else:
        K = np.exp(-D / (2.0 * spec.bandwidth ** 2))
    return K.astype(dtype, copy=False)


@dataclass(frozen=True)
class EigenSystem:
    """Top-q eigenpairs (descending) plus the (q+1)-th eigenvalue."""

    values: np.ndarray  # (q,)
    vectors: np.ndarray  # (s, q)
    next_value: float

    @property
    def q(self) -> int:
        return self.values.shape[0]


def top_q_eigensystem(A, q: int, tol: float = 1e-8) -> EigenSystem:
    """Largest ``q`` eigenpairs of the symmetric matrix ``A`` and ``lambda_{q+1}``.

    Eigenvector signs are fixed so that each vector's largest-magnitude
    entry is positive, which makes the output deterministic.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InputError(f"expected a square matrix, got shape {A.shape}")
    s = A.shape[0]
    if not 1 <= q < s:
        raise InputError(f"need 1 <= q < s, got q={q}, s={s}")
    scale = max(np.abs(A).max(), np.finfo(float).tiny)
    if np.abs(A - A.T).max() > 1e-10 * scale:
        raise InputError("matrix is not symmetric")
    A = 0.5 * (A + A.T)
    try:
        w, V = scipy.linalg.eigh(A, subset_by_index=[s - q - 1, s - 1])
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigensolver failed on {s}x{s} matrix: {exc}") from exc
    w, V = w[::-1], V[:, ::-1]
    pivot = np.abs(V).argmax(axis=0)
    V = V * np.sign(V[pivot, np.arange(V.shape[1])])
    resid = np.linalg.norm(A @ V - V * w, axis=0).max()
    fro = np.linalg.norm(A)
    if resid > tol * max(fro, 1.0):
        raise NumericError(
            f"eigensystem residual {resid:.3e} exceeds {tol:g} * |A|_F ({fro:.3e})"
        )
    return EigenSystem(values=w[:q].copy(), vectors=np.ascontiguousarray(V[:, :q]),
                       next_value=float(w[q]))
