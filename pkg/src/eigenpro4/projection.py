"""Projection of accumulated gradients onto the span of the model centers.

Projecting ``u`` onto ``span{K(., z_j)}`` gives ``K(., Z) theta`` with
``K(Z, Z) theta = u(Z)``. The exact route factorizes ``K(Z, Z)``; the
inexact route runs a few epochs of preconditioned SGD on the kernel
regression problem ``(Z, u(Z))``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import InputError, NumericError
from .kernels import EigenSystem, KernelSpec, kernel_matrix
from .preconditioner import (NystromPreconditioner, default_levels,
                             preconditioner_from_subsample)

log = logging.getLogger(__name__)

EXACT_GUARD = 20_000
KERNEL_CACHE_LIMIT = 8192


def default_jitter(K_zz: np.ndarray) -> float:
    return 1e-8 * float(np.trace(K_zz)) / K_zz.shape[0]


def project_exact(Z, spec: KernelSpec, h, jitter: float | None = None,
                  guard: int = EXACT_GUARD, K_zz=None) -> np.ndarray:
    """Solve ``(K(Z, Z) + jitter I) theta = h`` by Cholesky.

    A failed factorization is retried with the jitter raised tenfold, at
    most three times.
    """
    Z = np.asarray(Z)
    h = np.asarray(h)
    p = Z.shape[0]
    if p > guard:
        raise InputError(f"exact projection refuses p={p} > {guard}; use the inexact route")
    if h.shape[0] != p:
        raise InputError(f"h has {h.shape[0]} rows for {p} centers")
    if K_zz is None:
        K_zz = kernel_matrix(spec, Z, Z, dtype=np.float64)
    K_zz = np.asarray(K_zz, dtype=np.float64)
    base = default_jitter(K_zz)
    eps = base if jitter is None else float(jitter)
    for attempt in range(4):
        try:
            factor = scipy.linalg.cho_factor(K_zz + eps * np.eye(p), lower=True,
                                             check_finite=False)
            break
        except np.linalg.LinAlgError:
            if attempt == 3:
                raise NumericError(
                    f"Cholesky of K(Z, Z) failed for p={p} even with jitter {eps:.3e}")
            eps = eps * 10 if eps > 0 else base
            log.warning("K(Z, Z) not positive definite; retrying with jitter %.3e", eps)
    theta = scipy.linalg.cho_solve(factor, h.astype(np.float64), check_finite=False)
    return theta.astype(h.dtype, copy=False)


def exact_projection_flops(p: int) -> int:
    """Cholesky factorization plus two triangular solves."""
    return p ** 3 // 3 + 2 * p * p


@dataclass(frozen=True)
class EP2Config:
    """Settings of the inner preconditioned-SGD solver."""

    epochs: float = 1.0
    batch_size: int | None = None  # default ceil(p / 8), at most 256
    nystrom_size: int | None = None  # default from the number of centers
    level: int | None = None
    lr: float | None = None  # default: lr_scale / (1 + (m2 - 1) lambda_{q2+1} / s2)
    lr_scale: float = 1.5
    seed: int = 0


def auto_learning_rate(P: NystromPreconditioner, m: int, scale: float = 1.5) -> float:
    """Step size for batch-sum gradients under the preconditioner ``P``.

    The top eigenvalue of the preconditioned batch Hessian is estimated as
    ``1 + (m - 1) * lambda_{q+1} / s`` (unit kernel diagonal plus the
    flattened spectrum rescaled from the subsample).
    """
    return scale / (1.0 + (m - 1) * P.next_value / P.size_s)


class DivergenceMonitor:
    """Flags a smoothed loss that keeps climbing while 5x above its running minimum.

    Small-batch losses are noisy, and early ones mostly reflect how uneven
    the targets are across batches, so the reference level is the mean of
    the first ``warmup`` losses and nothing but a non-finite loss is flagged
    before then. After that the smoothed loss must rise for ``patience``
    consecutive batches while above the threshold. Genuine divergence grows
    geometrically, so it always does.
    """

    def __init__(self, factor: float = 5.0, smoothing: float = 0.9, floor: float = 1e-2,
                 patience: int = 3, warmup: int = 8):
        self.factor, self.smoothing, self.floor = factor, smoothing, floor
        self.patience, self.warmup = patience, warmup
        self.ema = self.best = self.first = None
        self.strikes = 0
        self._early: list[float] = []

    def update(self, loss: float) -> bool:
        if not np.isfinite(loss):
            return True
        if self.ema is None:
            self._early.append(loss)
            if len(self._early) >= self.warmup:
                self.ema = self.best = self.first = float(np.mean(self._early))
            return False
        prev = self.ema
        self.ema = self.smoothing * self.ema + (1 - self.smoothing) * loss
        self.best = min(self.best, self.ema)
        if self.ema > prev and self.ema > self.factor * max(self.best, self.floor * self.first):
            self.strikes += 1
        else:
            self.strikes = 0
        return self.strikes >= self.patience


def _subsample_preconditioner(X, spec, s, q, seed, dtype) -> NystromPreconditioner:
    n = X.shape[0]
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=s, replace=False))
    if q > 0:
        return preconditioner_from_subsample(X[idx], spec, q, indices=idx, dtype=dtype)
    # unpreconditioned: keep only lambda_1 for the step size
    A = kernel_matrix(spec, X[idx], X[idx], dtype=np.float64)
    lam1 = float(scipy.linalg.eigvalsh(A, subset_by_index=[s - 1, s - 1])[0])
    eig = EigenSystem(np.zeros(0), np.zeros((s, 0)), lam1)
    return NystromPreconditioner(spec=spec, X_s=X[idx].astype(dtype), indices=idx, eig=eig,
                                 D=np.zeros(0), F=np.zeros((s, 0), dtype=dtype))


class EP2Solver:
    """Preconditioned SGD for ``K(X, X) alpha = Y`` with the data as centers.

    Built once per center set; the subsample preconditioner, the step size
    and (for moderate sizes) the Gram matrix are reused across solves.
    """

    def __init__(self, X, spec: KernelSpec, cfg: EP2Config = EP2Config(), dtype=np.float64):
        X = np.asarray(X, dtype=dtype)
        p = X.shape[0]
        s_def, q_def = default_levels(p)
        s = cfg.nystrom_size if cfg.nystrom_size is not None else s_def
        q = cfg.level if cfg.level is not None else q_def
        s = min(s, p)
        if not 0 <= q < s:
            raise InputError(f"inner solver needs 0 <= q2 < s2 <= p, got q2={q}, s2={s}, p={p}")
        self.X, self.spec, self.cfg, self.dtype = X, spec, cfg, np.dtype(dtype)
        # at least eight updates per inner epoch; the cost per epoch is p^2 either way
        self.m = min(cfg.batch_size or min(256, -(-p // 8)), p)
        self.P = _subsample_preconditioner(X, spec, s, q, cfg.seed, dtype)
        self.lr = cfg.lr if cfg.lr is not None else auto_learning_rate(self.P, self.m, cfg.lr_scale)
        self._K = kernel_matrix(spec, X, X, dtype=dtype) if p <= KERNEL_CACHE_LIMIT else None
        self._K_s = self._K[self.P.indices] if self._K is not None else None
        self.last_flops = 0

    @property
    def p(self) -> int:
        return self.X.shape[0]

    def _rows(self, idx):
        if self._K is not None:
            return self._K[idx], self._K_s[:, idx]
        Xb = self.X[idx]
        return (kernel_matrix(self.spec, Xb, self.X, dtype=self.dtype),
                kernel_matrix(self.spec, self.P.X_s, Xb, dtype=self.dtype))

    def batch_flops(self, mb: int) -> int:
        s, q = self.P.size_s, self.P.level_q
        extra = mb * s + 2 * s * q if q else 0
        return mb * self.p + extra

    def solve(self, Y, epochs: float | None = None, seed: int | None = None,
              alpha0=None) -> np.ndarray:
        """Run ``epochs`` passes (fractional allowed) and return the weights.

        The multiply-accumulate count of the call is left in ``last_flops``.
        """
        Y = np.asarray(Y, dtype=self.dtype)
        squeeze = Y.ndim == 1
        Y = Y[:, None] if squeeze else Y
        p = self.p
        if Y.shape[0] != p:
            raise InputError(f"targets have {Y.shape[0]} rows for {p} centers")
        epochs = self.cfg.epochs if epochs is None else epochs
        rng = np.random.default_rng(self.cfg.seed if seed is None else seed)
        alpha = np.zeros_like(Y) if alpha0 is None else np.array(alpha0, dtype=self.dtype)
        F, idx_s, eta = self.P.F, self.P.indices, self.lr
        q = self.P.level_q
        n_batches = int(round(epochs * -(-p // self.m)))
        monitor = DivergenceMonitor()
        flops, done = 0, 0
        while done < n_batches:
            perm = rng.permutation(p)
            for start in range(0, p, self.m):
                if done >= n_batches:
                    break
                b = perm[start:start + self.m]
                K_b, K_sb = self._rows(b)
                g = K_b @ alpha - Y[b]
                alpha[b] -= eta * g
                if q:
                    alpha[idx_s] += eta * (F @ (F.T @ (K_sb @ g)))
                flops += self.batch_flops(len(b))
                done += 1
                if monitor.update(float(np.mean(g * g))):
                    raise NumericError(
                        f"inner solver diverged at batch {done} (lr={eta:.3e}); "
                        "use a smaller learning rate")
        self.last_flops = flops
        return alpha[:, 0] if squeeze else alpha


def ep2_solve(X, Y, spec: KernelSpec, s2: int, q2: int, m2: int, epochs: float,
              seed=0, lr: float | None = None, dtype=np.float64) -> np.ndarray:
    cfg = EP2Config(epochs=epochs, batch_size=m2, nystrom_size=s2, level=q2, lr=lr, seed=seed)
    return EP2Solver(X, spec, cfg, dtype=dtype).solve(Y)


def project_inexact(Z, spec: KernelSpec, h, cfg: EP2Config = EP2Config(),
                    solver: EP2Solver | None = None) -> np.ndarray:
    """Approximate ``K(Z, Z)^-1 h`` by treating ``(Z, h)`` as a regression problem."""
    h = np.asarray(h)
    if not h.any():
        return np.zeros_like(h)
    if solver is None:
        solver = EP2Solver(Z, spec, cfg, dtype=h.dtype)
    return solver.solve(h)
