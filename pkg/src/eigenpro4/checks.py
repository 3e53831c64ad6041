"""Self-check suite: the stochastic solver against the dense oracles.

Each check returns a :class:`CheckResult` carrying the measured value and
the tolerance it was held to, so callers can print or assert on it.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import synth_blobs
from .kernels import KernelSpec, kernel_matrix
from .oracle import (contraction_radius, ep3_reference_step, ep4_exact_iterate,
                     fixed_point_solution, min_norm_solution, noise_variance_limit)
from .preconditioner import build_preconditioner
from .solver import TrainConfig, batch_order, rng_for, train

log = logging.getLogger(__name__)

MC_TRIALS = 10_000
MC_TOL = 0.05


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3e} (tol {self.tolerance:.1e}) {self.detail}".rstrip()


def oracle_instance(k: int, seed: int = 0):
    """Small regression instance with centers jittered off a data subset.

    Returns ``(X, Y, Z, spec)`` with ``n <= 200``, ``p <= 50`` and a
    bandwidth scaled with ``sqrt(d)`` so the Gram matrices stay well conditioned.
    """
    rng = np.random.default_rng([seed, 7, k])
    n = int(rng.integers(60, 201))
    p = int(rng.integers(10, 51))
    d = int(rng.integers(3, 7))
    X = rng.standard_normal((n, d))
    Z = X[rng.choice(n, p, replace=False)] + 0.05 * rng.standard_normal((p, d))
    Y = rng.standard_normal((n, 2))
    return X, Y, Z, KernelSpec("laplace", float(np.sqrt(d)))


def check_fixed_point(instances: int = 20, iters: int = 200, tol: float = 1e-6,
                      seed: int = 0) -> CheckResult:
    worst, skipped = 0.0, 0
    for k in range(instances):
        X, Y, Z, spec = oracle_instance(k, seed)
        rho = contraction_radius(X, Z, spec)
        if rho >= 1:
            log.info("instance %d excluded: contraction radius %.3f", k, rho)
            skipped += 1
            continue
        beta = ep4_exact_iterate(X, Y, Z, spec, iters)[-1]
        ref = fixed_point_solution(X, Y, Z, spec)
        worst = max(worst, np.linalg.norm(beta - ref) / np.linalg.norm(ref))
    ok = worst <= tol and skipped < instances
    return CheckResult("fixed-point", ok, worst, tol,
                       f"{instances - skipped} instances, {iters} iterations")


def check_noise_variance(instances: int = 5, trials: int = MC_TRIALS, tol: float | None = None,
                         seed: int = 0) -> CheckResult:
    """Monte Carlo estimate of ``E |beta_hat - beta*|^2`` under unit-variance noise.

    With fewer trials the tolerance widens as ``MC_TOL * sqrt(MC_TRIALS / trials)``.
    """
    if tol is None:
        tol = MC_TOL * max(1.0, np.sqrt(MC_TRIALS / trials))
    worst = 0.0
    for k in range(instances):
        rng = np.random.default_rng([seed, 11, k])
        n, p, d = 40 + 10 * k, 8 + 2 * k, 4
        X = rng.standard_normal((n, d))
        Z = X[rng.choice(n, p, replace=False)] + 0.05 * rng.standard_normal((p, d))
        spec = KernelSpec("laplace", 2.0)
        beta_star = rng.standard_normal(p)
        xi = rng.standard_normal((n, trials))
        Y = (kernel_matrix(spec, X, Z) @ beta_star)[:, None] + xi
        err = fixed_point_solution(X, Y, Z, spec) - beta_star[:, None]
        empirical = float(np.mean(np.sum(err ** 2, axis=0)))
        limit = noise_variance_limit(X, Z, spec)
        worst = max(worst, abs(empirical - limit) / limit)
    return CheckResult("noise-variance", worst <= tol, worst, tol,
                       f"{instances} instances, {trials} trials")


def ep3_instance(seed: int = 0):
    rng = np.random.default_rng([seed, 13])
    n, p, d = 120, 30, 5
    X = rng.standard_normal((n, d))
    Z = rng.standard_normal((p, d))
    Y = rng.standard_normal((n, 3))
    return X, Y, Z, KernelSpec("laplace", 2.0)


def check_ep3_equivalence(steps: int = 50, tol: float = 1e-8, seed: int = 0) -> CheckResult:
    """``T = 1`` with exact projection against an independent one-step-at-a-time oracle."""
    X, Y, Z, spec = ep3_instance(seed)
    n, m, s, q, eta = X.shape[0], 12, 40, 6, 0.5
    epochs = -(-steps * m // n)
    cfg = TrainConfig(batch_size=m, nystrom_size=s, level=q, period=1, learning_rate=eta,
                      epochs=epochs, seed=seed, projection="exact", jitter=0.0)
    rep = train(X, Y, Z, cfg, spec, record_weights=True)
    P = build_preconditioner(X, spec, s, q, seed=rng_for(seed, "nystrom"))
    alpha = np.zeros((Z.shape[0], Y.shape[1]))
    worst = 0.0
    for t, (_, idx) in enumerate(batch_order(n, m, epochs, seed)):
        if t >= steps:
            break
        alpha = ep3_reference_step(alpha, Z, X[idx], Y[idx], X[P.indices], spec, q, eta)
        got = rep.weights[t]
        worst = max(worst, np.linalg.norm(got - alpha) / np.linalg.norm(alpha))
    return CheckResult("ep3-equivalence", worst <= tol, worst, tol, f"{steps} steps")


def min_norm_instance(seed: int = 1):
    """5-class blobs, 500 training and 100 held-out points, 100 centers from the training set."""
    ds = synth_blobs(600, 10, 5, spread=0.05, seed=seed)
    train_ds, test_ds = ds.subset(np.arange(500)), ds.subset(np.arange(500, 600))
    Z = train_ds.X[np.sort(np.random.default_rng(0).choice(500, 100, replace=False))]
    return train_ds, test_ds, Z, KernelSpec("laplace", 1.0)


def check_min_norm(epochs: int = 50, tol: float = 0.02, seed: int = 1) -> CheckResult:
    """EP4 with automatic period and inexact projection against the pseudoinverse solution."""
    tr, te, Z, spec = min_norm_instance(seed)
    Y = tr.Y()
    K_te = kernel_matrix(spec, te.X, Z)
    ref = K_te @ min_norm_solution(tr.X, Y, Z, spec)
    cfg = TrainConfig(batch_size=50, epochs=epochs, seed=0, projection="inexact")
    rep = train(tr.X, Y, Z, cfg, spec)
    err = float(np.linalg.norm(K_te @ rep.model.alpha - ref) / np.linalg.norm(ref))
    return CheckResult("min-norm", err <= tol, err, tol,
                       f"{epochs} epochs, T={rep.period}, held-out values")


def run_suite(trials: int = MC_TRIALS, seed: int = 0, epochs: int = 50) -> list[CheckResult]:
    return [
        check_fixed_point(seed=seed),
        check_noise_variance(trials=trials, seed=seed),
        check_ep3_equivalence(seed=seed),
        check_min_norm(epochs=epochs, seed=seed + 1),
    ]
