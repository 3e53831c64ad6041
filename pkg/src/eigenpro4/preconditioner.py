"""Nystrom approximation of the kernel Hessian and the derived preconditioner.

The preconditioner flattens the top ``q`` eigendirections of the subsample
Gram matrix ``K(X_s, X_s)`` down to ``lambda_{q+1}``. Its action on a
function ``K(., A) u`` is ``K(., A) u - K(., X_s) F F^T K(X_s, A) u`` with
``F = E sqrt(D)`` and ``D = Lambda^-1 - lambda_{q+1} Lambda^-2``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericError
from .kernels import EigenSystem, KernelSpec, kernel_matrix, top_q_eigensystem

# lambda_{q+1} below this fraction of lambda_1 is treated as numerically zero
NEXT_VALUE_FLOOR = 1e-12


def default_levels(n: int) -> tuple[int, int]:
    """Default (s, q) for ``n`` training points."""
    if n >= 100_000:
        return 1000, 100
    s = max(2, min(n // 4, 256))
    q = max(1, min(s // 4, 32))
    return s, q


@dataclass(frozen=True)
class NystromPreconditioner:
    spec: KernelSpec
    X_s: np.ndarray  # (s, d)
    indices: np.ndarray  # rows of X that form X_s
    eig: EigenSystem
    D: np.ndarray  # (q,) diagonal of D
    F: np.ndarray  # (s, q)

    @property
    def size_s(self) -> int:
        return self.X_s.shape[0]

    @property
    def level_q(self) -> int:
        return self.F.shape[1]

    @property
    def next_value(self) -> float:
        return self.eig.next_value


def preconditioner_from_subsample(X_s, spec: KernelSpec, q: int, indices=None,
                                  dtype=np.float64) -> NystromPreconditioner:
    X_s = np.asarray(X_s)
    s = X_s.shape[0]
    if not 1 <= q < s:
        raise InputError(f"need 1 <= q < s, got q={q}, s={s}")
    A = kernel_matrix(spec, X_s, X_s, dtype=np.float64)
    eig = top_q_eigensystem(A, q)
    lam = eig.values
    floor = NEXT_VALUE_FLOOR * lam[0]
    if lam[-1] <= floor:
        raise NumericError(
            f"K(X_s, X_s) has rank below q={q} (lambda_q={lam[-1]:.3e}); use a smaller q"
        )
    if eig.next_value < floor:
        eig = EigenSystem(eig.values, eig.vectors, float(floor))
    D = 1.0 / lam - eig.next_value / lam ** 2
    D = np.maximum(D, 0.0)
    F = eig.vectors * np.sqrt(D)
    if indices is None:
        indices = np.arange(s)
    return NystromPreconditioner(spec=spec, X_s=X_s.astype(dtype, copy=False),
                                 indices=np.asarray(indices), eig=eig, D=D,
                                 F=F.astype(dtype))


def build_preconditioner(X, spec: KernelSpec, s: int, q: int, seed=0,
                         dtype=np.float64) -> NystromPreconditioner:
    """Sample ``s`` rows of ``X`` uniformly without replacement and build the preconditioner."""
    X = np.asarray(X)
    n = X.shape[0]
    if not 1 <= q < s <= n:
        raise InputError(f"need 1 <= q < s <= n, got q={q}, s={s}, n={n}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=s, replace=False))
    return preconditioner_from_subsample(X[idx], spec, q, indices=idx, dtype=dtype)


@dataclass(frozen=True)
class AttachedPreconditioner:
    base: NystromPreconditioner
    M: np.ndarray  # (p, q) = K(Z, X_s) F


def attach_centers(P: NystromPreconditioner, Z, spec: KernelSpec) -> AttachedPreconditioner:
    Z = np.asarray(Z)
    if Z.ndim != 2 or Z.shape[0] == 0:
        raise InputError(f"centers must be a nonempty 2-d array, got shape {Z.shape}")
    if Z.shape[1] != P.X_s.shape[1]:
        raise InputError(f"centers have d={Z.shape[1]}, subsample has d={P.X_s.shape[1]}")
    K_zs = kernel_matrix(spec, Z, P.X_s, dtype=P.F.dtype)
    return AttachedPreconditioner(base=P, M=K_zs @ P.F)


def correction_coeffs(P: NystromPreconditioner, X_m, g_m, spec: KernelSpec,
                      K_sm=None) -> np.ndarray:
    """``h1 = F^T K(X_s, X_m) g_m``, shared by the Nystrom-weight and accumulated-gradient updates."""
    g_m = np.asarray(g_m)
    if K_sm is None:
        K_sm = kernel_matrix(spec, P.X_s, X_m, dtype=P.F.dtype)
    if K_sm.shape[1] != g_m.shape[0]:
        raise InputError(f"batch has {K_sm.shape[1]} rows, gradient has {g_m.shape[0]}")
    return P.F.T @ (K_sm @ g_m)


def apply_action(P: NystromPreconditioner, A, u, B, spec: KernelSpec) -> np.ndarray:
    """Evaluate the preconditioned function ``P^s{K(., A) u}`` at the points ``B``."""
    u = np.asarray(u)
    squeeze = u.ndim == 1
    u = u[:, None] if squeeze else u
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] != u.shape[0]:
        raise InputError(f"{A.shape[0] if A.ndim else 0} points but {u.shape[0]} coefficients")
    K_ba = kernel_matrix(spec, B, A, dtype=P.F.dtype)
    K_sa = kernel_matrix(spec, P.X_s, A, dtype=P.F.dtype)
    K_bs = kernel_matrix(spec, B, P.X_s, dtype=P.F.dtype)
    out = K_ba @ u - K_bs @ (P.F @ (P.F.T @ (K_sa @ u)))
    return out[:, 0] if squeeze else out
