"""Training loop: preconditioned batch steps with a projection every T batches.

Between projections the model grows an auxiliary part: every processed
batch becomes a block of temporary centers, and the Nystrom subsample
carries its own additive weights. The accumulated gradient ``h`` tracks
how far the auxiliary function has moved at the model centers, so a
projection costs one solve with ``K(Z, Z)`` per period instead of one per
batch.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .cost import CostModel, optimal_period
from .errors import InputError, NumericError
from .kernels import KernelSpec, kernel_matrix
from .model import AuxiliaryState, KernelModel, classify, predict, predict_auxiliary
from .preconditioner import (AttachedPreconditioner, attach_centers, build_preconditioner,
                             default_levels)
from .projection import (DivergenceMonitor, EP2Config, EP2Solver, auto_learning_rate,
                         exact_projection_flops, project_exact)

log = logging.getLogger(__name__)

DTYPES = {"f32": np.float32, "f64": np.float64}
REPORT_SCHEMA = 1


@dataclass
class TrainConfig:
    batch_size: int = 64
    nystrom_size: Optional[int] = None  # default from n
    level: Optional[int] = None
    period: int | str = "auto"
    learning_rate: float | str = "auto"
    lr_scale: float = 1.5
    epochs: int = 10
    seed: int = 0
    projection: str = "inexact"  # "exact" | "inexact"
    ep2: EP2Config = field(default_factory=EP2Config)
    jitter: Optional[float] = None  # exact projection; None -> 1e-8 tr K(Z,Z) / p
    merge: str = "derived"  # "derived": alpha += theta; "literal": alpha -= (n/m) eta theta
    precision: str = "f64"
    trace_every: int = 0  # extra trace samples every k batches (0: projections only)
    eval_size: int = 1000

    def __post_init__(self):
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")
        if self.epochs < 1:
            raise InputError("epochs must be >= 1")
        if self.period != "auto" and int(self.period) < 1:
            raise InputError("period must be >= 1 or 'auto'")
        if self.learning_rate != "auto" and not float(self.learning_rate) > 0:
            raise InputError("learning_rate must be positive or 'auto'")
        if self.projection not in ("exact", "inexact"):
            raise InputError(f"unknown projection mode {self.projection!r}")
        if self.merge not in ("derived", "literal"):
            raise InputError(f"unknown merge mode {self.merge!r}")
        if self.precision not in DTYPES:
            raise InputError(f"precision must be one of {sorted(DTYPES)}")
        if isinstance(self.ep2, dict):
            self.ep2 = EP2Config(**self.ep2)

    @property
    def dtype(self):
        return np.dtype(DTYPES[self.precision])

    def to_dict(self) -> dict:
        return asdict(self)


def rng_for(seed: int, stream: str) -> np.random.Generator:
    """Independent generator per consumer so that streams do not shift each other."""
    tag = {"nystrom": 0, "batches": 1, "ep2": 2, "eval": 3}[stream]
    return np.random.default_rng([seed, tag])


def batch_order(n: int, m: int, epochs: int, seed: int):
    """Yield ``(epoch, indices)`` for every batch of a run; the last batch of an epoch may be short."""
    rng = rng_for(seed, "batches")
    for epoch in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, m):
            yield epoch, perm[start:start + m]


def ep4_step(model: KernelModel, state: AuxiliaryState, PA: AttachedPreconditioner,
             X_m, y_m, eta: float, cost: CostModel | None = None) -> np.ndarray:
    """Process one batch; ``state`` is updated in place and the gradient ``g`` returned."""
    P, spec = PA.base, model.spec
    dtype = model.alpha.dtype
    m = X_m.shape[0]

    def count(item, mat):
        if cost is not None:
            cost.add(item, mat.shape[0] * mat.shape[1])

    K_mz = kernel_matrix(spec, X_m, model.Z, dtype=dtype)
    g = K_mz @ model.alpha - y_m
    count("grad_centers", K_mz)
    for Zb, ab in zip(state.Z_tmp, state.alpha_tmp):
        K_mb = kernel_matrix(spec, X_m, Zb, dtype=dtype)
        g += K_mb @ ab
        count("grad_tmp", K_mb)
    K_ms = kernel_matrix(spec, X_m, P.X_s, dtype=dtype)
    g += K_ms @ state.alpha_s
    count("grad_nystrom", K_ms)
    if not np.all(np.isfinite(g)):
        bad = np.abs(g[np.isfinite(g)]).max(initial=0.0)
        raise NumericError(f"non-finite gradient at batch {state.batches_seen} "
                           f"of the period (max finite |g| = {bad:.3e})")

    state.Z_tmp.append(X_m)
    state.alpha_tmp.append(-eta * g)
    v = K_ms.T @ g
    count("h1_kernel", K_ms)
    h1 = P.F.T @ v
    count("h1_factor", P.F)
    state.alpha_s += eta * (P.F @ h1)
    count("nystrom_update", P.F)
    state.h -= eta * (K_mz.T @ g)
    count("accum_kernel", K_mz)
    state.h += eta * (PA.M @ h1)
    count("accum_correct", PA.M)
    state.batches_seen += 1
    return g


class Projector:
    """Period-end projection, exact (Cholesky) or inexact (inner preconditioned SGD)."""

    def __init__(self, Z, spec: KernelSpec, cfg: TrainConfig):
        self.mode = cfg.projection
        self.Z, self.spec, self.jitter = Z, spec, cfg.jitter
        self.calls = 0
        self._seed = cfg.seed
        if self.mode == "exact":
            self.K_zz = kernel_matrix(spec, Z, Z, dtype=np.float64)
            self.inner = None
        else:
            ep2 = cfg.ep2
            seed = int(rng_for(cfg.seed, "ep2").integers(2 ** 31))
            self.inner = EP2Solver(Z, spec, EP2Config(**{**asdict(ep2), "seed": seed}),
                                   dtype=cfg.dtype)

    @property
    def T_ep2(self) -> float:
        """Projection cost expressed in epochs of ``p^2``."""
        p = self.Z.shape[0]
        if self.mode == "exact":
            return exact_projection_flops(p) / p ** 2
        return float(self.inner.cfg.epochs)

    def __call__(self, h) -> tuple[np.ndarray, int]:
        self.calls += 1
        if self.mode == "exact":
            theta = project_exact(self.Z, self.spec, h, jitter=self.jitter, K_zz=self.K_zz)
            return theta, exact_projection_flops(self.Z.shape[0])
        if not h.any():
            return np.zeros_like(h), 0
        theta = self.inner.solve(h, seed=self.inner.cfg.seed + self.calls)
        return theta, self.inner.last_flops


def finalize_period(model: KernelModel, state: AuxiliaryState, projector: Projector,
                    eta: float, merge: str = "derived", n_over_m: float = 1.0,
                    cost: CostModel | None = None, **info) -> np.ndarray:
    """Project ``h`` onto the center span, merge into ``alpha`` and reset the state.

    With ``merge="derived"`` the update is ``alpha += theta``, which keeps the
    model's values at the centers equal to the auxiliary model's values.
    ``merge="literal"`` applies ``alpha -= (n/m) eta theta`` instead.
    """
    if state.batches_seen < 1:
        raise InputError("finalize_period called on an empty period")
    theta, flops = projector(state.h)
    if merge == "derived":
        model.alpha += theta
    else:
        model.alpha -= n_over_m * eta * theta
    if cost is not None:
        cost.add_projection(flops, batches=state.batches_seen, **info)
    state.reset()
    return theta


@dataclass
class TrainReport:
    config: dict
    learning_rate: float
    period: int
    epoch_seconds: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    cost: CostModel = field(default_factory=CostModel)
    lr_halvings: int = 0
    model: Optional[KernelModel] = None
    weights: list = field(default_factory=list)  # alpha after each projection, if recorded

    @property
    def batch_flops(self) -> list:
        return [b["flops"] for b in self.cost.batches]

    def projection_drops(self, metric: str = "accuracy") -> list:
        """``(epoch, pre - post)`` for each projection in the trace."""
        pre = {}
        out = []
        for rec in self.trace:
            if rec["kind"] == "pre":
                pre[rec["projection"]] = rec
            elif rec["kind"] == "post" and rec["projection"] in pre:
                out.append((rec["epoch"], pre[rec["projection"]][metric] - rec[metric]))
        return out

    def to_json(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA,
            "config": self.config,
            "learning_rate": self.learning_rate,
            "period": self.period,
            "lr_halvings": self.lr_halvings,
            "epoch_seconds": self.epoch_seconds,
            "total_flops": self.cost.total,
            "batch_flops": self.batch_flops,
            "batches": self.cost.batches,
            "projections": self.cost.projections,
            "trace": self.trace,
        }


def _evaluate(values, Y_eval, labels_eval) -> dict:
    out = {"mse": float(np.mean((values - Y_eval) ** 2))}
    if labels_eval is not None:
        out["accuracy"] = float(np.mean(classify(values) == labels_eval))
    return out


def train(X, Y, Z, cfg: TrainConfig, spec: KernelSpec, eval_data=None,
          record_weights: bool = False, model: KernelModel | None = None) -> TrainReport:
    """Fit ``f = K(., Z) alpha`` to ``(X, Y)`` for ``cfg.epochs`` epochs.

    ``eval_data`` is an optional ``(X_eval, Y_eval)`` pair used for the loss
    and accuracy trace; by default a fixed subset of the training data is used.
    """
    dtype = cfg.dtype
    X = np.asarray(X, dtype=dtype)
    Y = np.asarray(Y, dtype=dtype)
    if Y.ndim == 1:
        Y = Y[:, None]
    Z = np.asarray(Z, dtype=dtype)
    n, d = X.shape
    if Y.shape[0] != n:
        raise InputError(f"{n} samples but {Y.shape[0]} target rows")
    if Z.ndim != 2 or Z.shape[1] != d:
        raise InputError(f"centers must have d={d} columns")
    p, c, m = Z.shape[0], Y.shape[1], min(cfg.batch_size, n)

    s_def, q_def = default_levels(n)
    s = cfg.nystrom_size if cfg.nystrom_size is not None else s_def
    q = cfg.level if cfg.level is not None else q_def
    P = build_preconditioner(X, spec, s, q, seed=rng_for(cfg.seed, "nystrom"), dtype=dtype)
    PA = attach_centers(P, Z, spec)
    projector = Projector(Z, spec, cfg)

    eta = auto_learning_rate(P, m, cfg.lr_scale) if cfg.learning_rate == "auto" \
        else float(cfg.learning_rate)
    T = optimal_period(p, m, projector.T_ep2) if cfg.period == "auto" else int(cfg.period)
    log.info("train: n=%d p=%d m=%d s=%d q=%d T=%d eta=%.4g", n, p, m, s, q, T, eta)

    if eval_data is None:
        idx = np.sort(rng_for(cfg.seed, "eval").permutation(n)[:min(n, cfg.eval_size)])
        X_eval, Y_eval = X[idx], Y[idx]
    else:
        X_eval = np.asarray(eval_data[0], dtype=dtype)
        Y_eval = np.asarray(eval_data[1], dtype=dtype).reshape(X_eval.shape[0], -1)
    labels_eval = Y_eval.argmax(axis=1) if c >= 2 else None

    if model is None:
        model = KernelModel.zeros(spec, Z, c, dtype=dtype)
    state = AuxiliaryState.empty(p, s, c, dtype=dtype)
    report = TrainReport(config={**cfg.to_dict(), "n": n, "d": d, "p": p, "c": c,
                                 "nystrom_size": s, "level": q,
                                 "kernel": spec.family.value, "bandwidth": spec.bandwidth},
                         learning_rate=eta, period=T, cost=CostModel(), model=model)
    t0 = time.perf_counter()
    step = 0
    projections = 0
    monitor = DivergenceMonitor()
    adaptive = cfg.learning_rate == "auto"

    def snapshot(kind, epoch, values, **extra):
        rec = {"kind": kind, "step": step, "epoch": epoch,
               "time": time.perf_counter() - t0, **_evaluate(values, Y_eval, labels_eval)}
        rec.update(extra)
        report.trace.append(rec)

    snapshot("sample", 0, predict(model, X_eval))
    schedule = list(batch_order(n, m, cfg.epochs, cfg.seed))
    epoch_start = t0
    for i, (epoch, idx) in enumerate(schedule):
        last_in_epoch = i + 1 == len(schedule) or schedule[i + 1][0] != epoch
        X_m, y_m = X[idx], Y[idx]
        report.cost.begin_batch(batch=step, epoch=epoch, m=len(idx), offset=state.batches_seen,
                                tmp_rows=state.tmp_rows)
        g = ep4_step(model, state, PA, X_m, y_m, eta, cost=report.cost)
        report.cost.end_batch()
        step += 1
        if monitor.update(float(np.mean(g * g))):
            if not adaptive:
                raise NumericError(f"training diverged at step {step} with fixed lr={eta:.3e}")
            eta /= 2
            report.lr_halvings += 1
            log.warning("loss blew up at step %d; halving lr to %.4g and restarting period",
                        step, eta)
            state.reset()
            monitor = DivergenceMonitor()
            report.learning_rate = eta
            if report.lr_halvings > 30:
                raise NumericError("learning rate halved 30 times without recovering")
            continue
        if cfg.trace_every and step % cfg.trace_every == 0 and not (
                state.batches_seen == T or last_in_epoch):
            snapshot("sample", epoch, predict_auxiliary(model, state, P, X_eval))
        if state.batches_seen == T or last_in_epoch:
            snapshot("pre", epoch, predict_auxiliary(model, state, P, X_eval),
                     projection=projections)
            finalize_period(model, state, projector, eta, cfg.merge, n / m, cost=report.cost,
                            epoch=epoch, step=step)
            snapshot("post", epoch, predict(model, X_eval), projection=projections)
            projections += 1
            if record_weights:
                report.weights.append(model.alpha.copy())
        if last_in_epoch:
            now = time.perf_counter()
            report.epoch_seconds.append(now - epoch_start)
            epoch_start = now
    return report
