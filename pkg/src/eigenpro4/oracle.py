"""Dense reference solutions used to check the stochastic solver.

Everything here runs in float64 and is meant for desk-scale problems only.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import InputError, NumericError
from .kernels import KernelSpec, kernel_matrix

DENSE_GUARD = 2000
COND_LIMIT = 1e12


def _f64(A):
    A = np.asarray(A, dtype=np.float64)
    return A[:, None] if A.ndim == 1 else A


def _guard(*sizes):
    if max(sizes) > DENSE_GUARD:
        raise InputError(f"dense oracle limited to {DENSE_GUARD} points, got {max(sizes)}")


def _check_cond(K, name):
    sv = np.linalg.svd(K, compute_uv=False)
    if sv[-1] <= 0 or sv[0] / sv[-1] > COND_LIMIT:
        cond = np.inf if sv[-1] <= 0 else sv[0] / sv[-1]
        raise NumericError(f"{name} is numerically rank deficient (condition {cond:.3e})")


def min_norm_solution(X, Y, Z, spec: KernelSpec, rcond: float = 1e-10) -> np.ndarray:
    """Minimum-norm least-squares weights ``K(X, Z)^+ Y`` for ``f = K(., Z) alpha``."""
    X, Y, Z = _f64(X), _f64(Y), _f64(Z)
    _guard(X.shape[0], Z.shape[0])
    K_xz = kernel_matrix(spec, X, Z, dtype=np.float64)
    return np.linalg.pinv(K_xz, rcond=rcond) @ Y


class _Grams:
    def __init__(self, X, Z, spec):
        _guard(X.shape[0], Z.shape[0])
        self.K_xx = kernel_matrix(spec, X, X, dtype=np.float64)
        self.K_xz = kernel_matrix(spec, X, Z, dtype=np.float64)
        self.K_zz = kernel_matrix(spec, Z, Z, dtype=np.float64)
        _check_cond(self.K_xx, "K(X, X)")
        _check_cond(self.K_xz, "K(X, Z)")
        try:
            self.cx = scipy.linalg.cho_factor(self.K_xx, lower=True)
            self.cz = scipy.linalg.cho_factor(self.K_zz, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"Gram matrix not positive definite: {exc}") from exc

    def inner(self):
        """``K(Z, X) K(X, X)^-1 K(X, Z)`` and ``K(X, X)^-1 K(X, Z)``."""
        G = scipy.linalg.cho_solve(self.cx, self.K_xz)
        return self.K_xz.T @ G, G


def ep4_exact_iterate(X, Y, Z, spec: KernelSpec, iters: int) -> list[np.ndarray]:
    """Fit the residual in the data span, project onto the center span, repeat.

    Returns ``[beta_1, ..., beta_iters]`` where
    ``beta_t = beta_{t-1} + K(Z,Z)^-1 K(Z,X) K(X,X)^-1 (Y - K(X,Z) beta_{t-1})``.
    """
    X, Y, Z = _f64(X), _f64(Y), _f64(Z)
    g = _Grams(X, Z, spec)
    beta = np.zeros((Z.shape[0], Y.shape[1]))
    out = []
    for _ in range(iters):
        resid = Y - g.K_xz @ beta
        a = scipy.linalg.cho_solve(g.cx, resid)            # fit in span K(., X)
        beta = beta + scipy.linalg.cho_solve(g.cz, g.K_xz.T @ a)  # project, accumulate
        out.append(beta)
    return out


def contraction_radius(X, Z, spec: KernelSpec) -> float:
    """Spectral radius of ``K(Z,Z)^-1 K(Z,X) K(X,X)^-1 K(X,Z) - I``; the iteration converges iff < 1."""
    g = _Grams(_f64(X), _f64(Z), spec)
    A, _ = g.inner()
    C = scipy.linalg.cho_solve(g.cz, A) - np.eye(A.shape[0])
    return float(np.abs(np.linalg.eigvals(C)).max())


def fixed_point_solution(X, Y, Z, spec: KernelSpec) -> np.ndarray:
    """``(K(Z,X) K(X,X)^-1 K(X,Z))^-1 K(Z,X) K(X,X)^-1 Y``."""
    X, Y, Z = _f64(X), _f64(Y), _f64(Z)
    g = _Grams(X, Z, spec)
    A, G = g.inner()
    _check_cond(A, "K(Z,X) K(X,X)^-1 K(X,Z)")
    return np.linalg.solve(A, G.T @ Y)


def noise_variance_limit(X, Z, spec: KernelSpec) -> float:
    """``tr(A^-2 K(Z,X) K(X,X)^-2 K(X,Z))`` with ``A = K(Z,X) K(X,X)^-1 K(X,Z)``."""
    g = _Grams(_f64(X), _f64(Z), spec)
    A, G = g.inner()
    _check_cond(A, "K(Z,X) K(X,X)^-1 K(X,Z)")
    N = G.T @ G
    return float(np.trace(np.linalg.solve(A, np.linalg.solve(A, N))))


def preconditioned_gradient_at(Z, X_m, g, X_s, spec: KernelSpec, q: int) -> np.ndarray:
    """Values at ``Z`` of ``P^s K(., X_m) g`` built from the eigenfunctions of ``K(X_s, X_s)``.

    Uses the explicit sum over the top ``q`` eigenfunctions
    ``psi_i = K(., X_s) e_i / sqrt(lambda_i)`` with damping ``1 - lambda_{q+1} / lambda_i``.
    """
    lam, E = np.linalg.eigh(kernel_matrix(spec, X_s, X_s, dtype=np.float64))
    lam, E = lam[::-1], E[:, ::-1]
    out = kernel_matrix(spec, Z, X_m, dtype=np.float64) @ g
    K_zs = kernel_matrix(spec, Z, X_s, dtype=np.float64)
    K_sm = kernel_matrix(spec, X_s, X_m, dtype=np.float64)
    for i in range(q):
        psi_z = K_zs @ E[:, i] / np.sqrt(lam[i])
        coef = E[:, i] @ K_sm @ g / np.sqrt(lam[i])
        out -= (1.0 - lam[q] / lam[i]) * np.outer(psi_z, coef)
    return out


def ep3_reference_step(alpha, Z, X_m, y_m, X_s, spec: KernelSpec, q: int, eta: float,
                       jitter: float = 0.0) -> np.ndarray:
    """One projected preconditioned SGD step for ``f = K(., Z) alpha``.

    ``f <- proj(f - eta P^s K(., X_m)(f(X_m) - y_m))``; the projection solves
    with ``K(Z, Z) + jitter I`` directly.
    """
    alpha = _f64(alpha)
    K_zz = kernel_matrix(spec, Z, Z, dtype=np.float64)
    g = kernel_matrix(spec, X_m, Z, dtype=np.float64) @ alpha - _f64(y_m)
    f_z = K_zz @ alpha - eta * preconditioned_gradient_at(Z, X_m, g, X_s, spec, q)
    return np.linalg.solve(K_zz + jitter * np.eye(K_zz.shape[0]), f_z)
