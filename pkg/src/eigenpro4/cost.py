"""Multiply-accumulate accounting for the training loop.

Counting convention: a kernel-matrix (or dense factor) product with an
``r x k`` matrix costs ``r * k``, independent of the number of output
columns. Kernel evaluations themselves are not counted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

# line items of one batch, keyed like the steps of the training loop
BATCH_ITEMS = (
    "grad_centers",    # K(X_m, Z) alpha                  m p
    "grad_tmp",        # K(X_m, Z_tmp) alpha_tmp          m |Z_tmp|
    "grad_nystrom",    # K(X_m, X_s) alpha_s              m s
    "h1_kernel",       # K(X_s, X_m) g                    m s
    "h1_factor",       # F^T (K(X_s, X_m) g)              s q
    "nystrom_update",  # F h1                             s q
    "accum_kernel",    # K(Z, X_m) g                      m p
    "accum_correct",   # M h1                             p q
)


def flops_per_batch(m: int, p: int, s: int, q: int, batches_into_period: int,
                    tmp_batch_size: int | None = None) -> int:
    """Cost of one batch: ``2mp + 2ms + 2sq + pq + m^2 * batches_into_period``.

    When the batch is smaller than the earlier batches of its period (the
    last batch of an epoch), pass the earlier size as ``tmp_batch_size``;
    the temporary-center term is then ``m * tmp_batch_size * batches_into_period``.
    """
    if min(m, p, s, q, batches_into_period) < 0:
        raise ValueError("all sizes must be nonnegative")
    prev = m if tmp_batch_size is None else tmp_batch_size
    return 2 * m * p + 2 * m * s + 2 * s * q + p * q + m * prev * batches_into_period


def period_cost(m: int, p: int, s: int, q: int, T: int) -> int:
    """Total cost of ``T`` batches between two projections (projection excluded)."""
    return T * (2 * m * p + 2 * m * s + 2 * s * q + p * q) + m * m * T * (T - 1) // 2


def average_batch_cost(T: float, p: float, m: float, s: float, q: float,
                       T_ep2: float) -> float:
    """Per-batch cost averaged over a period, including one projection of cost ``p^2 T_ep2``."""
    return (T * (2 * m * p + 2 * m * s + 2 * s * q + p * q)
            + m * m * T * (T - 1) / 2 + p * p * T_ep2) / T


def optimal_period(p: float, m: float, T_ep2: float) -> int:
    """``round((p / m) * sqrt(2 T_ep2))``, at least 1."""
    if p <= 0 or m <= 0 or T_ep2 <= 0:
        raise ValueError("p, m and T_ep2 must be positive")
    return max(1, int(round(p / m * math.sqrt(2.0 * T_ep2))))


@dataclass
class CostModel:
    """Running tally plus per-batch and per-projection breakdowns."""

    total: int = 0
    batches: list = field(default_factory=list)
    projections: list = field(default_factory=list)
    _open: dict | None = None

    def begin_batch(self, **info) -> None:
        self._open = {"items": {k: 0 for k in BATCH_ITEMS}, **info}

    def add(self, item: str, count: int) -> None:
        self._open["items"][item] += int(count)

    def end_batch(self) -> dict:
        rec = self._open
        rec["flops"] = sum(rec["items"].values())
        self.total += rec["flops"]
        self.batches.append(rec)
        self._open = None
        return rec

    def add_projection(self, flops: int, **info) -> None:
        self.total += int(flops)
        self.projections.append({"flops": int(flops), **info})

    @property
    def batch_flops(self) -> int:
        return sum(b["flops"] for b in self.batches)

    @property
    def projection_flops(self) -> int:
        return sum(r["flops"] for r in self.projections)

    def amortized_per_batch(self) -> float:
        return self.total / max(len(self.batches), 1)
