"""Benchmark sweep over the number of centers: EP4, EP3 mode and a direct solve."""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, metrics
from .errors import InputError
from .kernels import KernelSpec, kernel_matrix
from .model import predict
from .oracle import DENSE_GUARD, min_norm_solution
from .projection import EP2Config
from .solver import TrainConfig, train

log = logging.getLogger(__name__)

CSV_COLUMNS = ["method", "p", "m", "s", "q", "T", "epochs", "wall_ms", "flops",
               "train_acc", "test_acc"]
TRACE_COLUMNS = ["method", "p", "kind", "step", "epoch", "projection", "metric", "value"]
METHODS = ("ep4", "ep3", "direct")


@dataclass
class BenchConfig:
    ps: list = field(default_factory=lambda: [64, 128, 256, 512, 1024])
    methods: list = field(default_factory=lambda: list(METHODS))
    batch_size: int = 8
    nystrom_size: int | None = 16
    level: int | None = 2
    epochs: int = 1
    ep2_epochs: float = 1.0
    seed: int = 0

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise InputError(f"unknown bench method(s) {bad}; choose from {list(METHODS)}")
        if not self.ps or min(self.ps) < 1:
            raise InputError("p values must be positive")


@dataclass
class BenchRow:
    method: str
    p: int
    m: int
    s: int
    q: int
    T: int
    epochs: int
    wall_ms: float
    flops: int
    train_acc: float
    test_acc: float
    batches: int = 0
    trace: list = field(default_factory=list)

    @property
    def amortized_flops(self) -> float:
        return self.flops / max(self.batches, 1)

    def csv_row(self) -> list:
        return [self.method, self.p, self.m, self.s, self.q, self.T, self.epochs,
                f"{self.wall_ms:.3f}", self.flops, f"{self.train_acc:.6f}", f"{self.test_acc:.6f}"]


def centers_for(ds: Dataset, p: int, seed: int) -> np.ndarray:
    """First ``p`` points of a fixed permutation, so the center sets are nested across the sweep."""
    if p > ds.n:
        raise InputError(f"p={p} exceeds the {ds.n} training points")
    perm = np.random.default_rng([seed, 101]).permutation(ds.n)
    return ds.X[np.sort(perm[:p])]


def _accuracy(values, ds: Dataset) -> float:
    if not ds.is_classification:
        return float("nan")
    return metrics(values, ds.labels)["accuracy"]


def direct_flops(n: int, p: int) -> int:
    """Nominal count for the dense solve: forming ``K(Z,X) K(X,Z)`` plus a cubic factorization."""
    return n * p * p + p ** 3


def run_one(method: str, p: int, train_ds: Dataset, test_ds: Dataset, spec: KernelSpec,
            cfg: BenchConfig) -> BenchRow:
    if method == "direct" and p > DENSE_GUARD:
        raise InputError(f"direct solve refuses p={p} > {DENSE_GUARD}")
    Z = centers_for(train_ds, p, cfg.seed)
    Y = train_ds.Y()
    t0 = time.perf_counter()
    if method == "direct":
        alpha = min_norm_solution(train_ds.X, Y, Z, spec)
        wall = (time.perf_counter() - t0) * 1e3
        return BenchRow(method, p, train_ds.n, 0, 0, 0, 0, wall, direct_flops(train_ds.n, p),
                        _accuracy(kernel_matrix(spec, train_ds.X, Z) @ alpha, train_ds),
                        _accuracy(kernel_matrix(spec, test_ds.X, Z) @ alpha, test_ds), batches=1)
    tcfg = TrainConfig(batch_size=cfg.batch_size, nystrom_size=cfg.nystrom_size, level=cfg.level,
                       period=1 if method == "ep3" else "auto", epochs=cfg.epochs, seed=cfg.seed,
                       projection="inexact", ep2=EP2Config(epochs=cfg.ep2_epochs))
    rep = train(train_ds.X, Y, Z, tcfg, spec, eval_data=(test_ds.X, test_ds.Y()))
    wall = (time.perf_counter() - t0) * 1e3
    c = rep.config
    model = rep.model
    return BenchRow(method, p, min(cfg.batch_size, train_ds.n), c["nystrom_size"], c["level"],
                    rep.period, cfg.epochs, wall, rep.cost.total,
                    _accuracy(predict(model, train_ds.X), train_ds),
                    _accuracy(predict(model, test_ds.X), test_ds),
                    batches=len(rep.cost.batches), trace=rep.trace)


def _run_job(args):
    return run_one(*args)


def run_sweep(train_ds: Dataset, test_ds: Dataset, spec: KernelSpec, cfg: BenchConfig,
              parallel: int = 0) -> list[BenchRow]:
    """Every (method, p) pair; rows come back in sweep order whether or not runs are parallel."""
    jobs = [(method, p, train_ds, test_ds, spec, cfg) for method in cfg.methods for p in cfg.ps]
    if parallel and parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_run_job, jobs))
    rows = []
    for job in jobs:
        log.info("bench: %s p=%d", job[0], job[1])
        rows.append(run_one(*job))
    return rows


def write_csv(rows: list[BenchRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow(r.csv_row())


def write_trace(rows: list[BenchRow], path) -> None:
    """Long format: one line per (run, trace record, metric)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for r in rows:
            for rec in r.trace:
                for metric in ("mse", "accuracy"):
                    if metric in rec:
                        w.writerow([r.method, r.p, rec["kind"], rec["step"], rec["epoch"],
                                    rec.get("projection", ""), metric, repr(rec[metric])])


def loglog_slope(ps, values) -> float:
    """Least-squares slope of ``log(values)`` against ``log(ps)``."""
    return float(np.polyfit(np.log(np.asarray(ps, float)), np.log(np.asarray(values, float)), 1)[0])


def bench_summary(rows: list[BenchRow], cfg: BenchConfig) -> dict:
    out = {"config": asdict(cfg), "slopes": {}}
    for method in ("ep4", "ep3"):
        sel = [r for r in rows if r.method == method]
        if len(sel) >= 2:
            out["slopes"][method] = loglog_slope([r.p for r in sel],
                                                 [r.amortized_flops for r in sel])
    return out
