"""Datasets: CSV and binary containers, target encoding, synthetic blobs, metrics."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InputError
from .model import classify

BINARY_MAGIC = b"KSLV"
BINARY_VERSION = 1
# magic, version, n, d, c, precision tag, label kind
_HEADER = struct.Struct("<4sIQQQBB")
_PRECISION = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
LABELS_CLASS, LABELS_REAL = 0, 1


@dataclass(frozen=True)
class Dataset:
    """Features plus either integer class ids (``labels``) or real targets."""

    X: np.ndarray
    labels: Optional[np.ndarray] = None  # (n,) int class ids
    targets: Optional[np.ndarray] = None  # (n, c) real targets
    n_classes: int = 1
    name: str = ""
    provenance: str = ""

    def __post_init__(self):
        if (self.labels is None) == (self.targets is None):
            raise InputError("a dataset needs exactly one of labels or targets")
        if not np.all(np.isfinite(self.X)):
            raise InputError("features contain non-finite values")
        if self.labels is not None:
            if self.labels.shape != (self.X.shape[0],):
                raise InputError("one label per row required")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
                raise InputError(f"label ids must lie in [0, {self.n_classes})")
        elif self.targets.shape[0] != self.X.shape[0]:
            raise InputError("one target row per sample required")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def is_classification(self) -> bool:
        return self.labels is not None

    def Y(self) -> np.ndarray:
        """Regression targets: one-hot rows for class labels, raw targets otherwise."""
        if self.labels is not None:
            return encode_targets(self.labels, self.n_classes)
        return self.targets

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx],
                       None if self.labels is None else self.labels[idx],
                       None if self.targets is None else self.targets[idx],
                       self.n_classes, self.name, self.provenance)

    def split(self, test_fraction: float, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        perm = np.random.default_rng(seed).permutation(self.n)
        k = int(round(self.n * test_fraction))
        return self.subset(np.sort(perm[k:])), self.subset(np.sort(perm[:k]))


def encode_targets(labels, c: int) -> np.ndarray:
    """One-hot encode class ids; ``c == 1`` passes real targets through as a column."""
    labels = np.asarray(labels)
    if c == 1:
        return labels.astype(np.float64).reshape(-1, 1)
    if labels.size and (labels.min() < 0 or labels.max() >= c
                        or not np.all(labels == np.round(labels))):
        raise InputError(f"class ids must be integers in [0, {c})")
    Y = np.zeros((labels.shape[0], c))
    Y[np.arange(labels.shape[0]), labels.astype(int)] = 1.0
    return Y


def load_csv(path, has_header: bool = True, label_column: int = -1,
             targets: str = "auto") -> Dataset:
    """Read a rectangular CSV; one column holds the label, the rest are features.

    ``targets`` is ``"class"``, ``"real"`` or ``"auto"`` (class ids when every
    label is a non-negative integer).
    """
    path = Path(path)
    rows = []
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            width = None
            for lineno, row in enumerate(reader, start=1):
                if has_header and lineno == 1:
                    continue
                if not row:
                    continue
                if width is None:
                    width = len(row)
                elif len(row) != width:
                    raise InputError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
                try:
                    vals = [float(v) for v in row]
                except ValueError as exc:
                    raise InputError(f"{path}:{lineno}: {exc}") from None
                if not all(np.isfinite(vals)):
                    raise InputError(f"{path}:{lineno}: non-finite value")
                rows.append(vals)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise InputError(f"{path}: no data rows")
    A = np.array(rows, dtype=np.float64)
    if A.shape[1] < 2:
        raise InputError(f"{path}: need at least one feature column and a label column")
    col = label_column % A.shape[1]
    y = A[:, col]
    X = np.delete(A, col, axis=1)
    integral = bool(np.all(y == np.round(y)) and y.min() >= 0)
    if targets == "class" or (targets == "auto" and integral):
        if not integral:
            raise InputError(f"{path}: class labels must be non-negative integers")
        labels = y.astype(np.int64)
        return Dataset(X, labels=labels, n_classes=int(labels.max()) + 1, name=path.stem,
                       provenance=f"csv:{path}")
    return Dataset(X, targets=y[:, None], name=path.stem, provenance=f"csv:{path}")


def save_csv(ds: Dataset, path, header: bool = True) -> None:
    """Write features then the label column; floats use ``repr`` so they round-trip exactly."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow([f"x{j}" for j in range(ds.d)] + ["label"])
        lab = ds.labels if ds.labels is not None else ds.targets[:, 0]
        for x, l in zip(ds.X, lab):
            w.writerow([repr(float(v)) for v in x]
                       + [str(int(l)) if ds.labels is not None else repr(float(l))])


def save_binary(ds: Dataset, path, precision: str = "f64") -> None:
    tag = {"f32": 0, "f64": 1}[precision]
    dt = _PRECISION[tag]
    kind = LABELS_CLASS if ds.is_classification else LABELS_REAL
    c = ds.n_classes if ds.is_classification else ds.targets.shape[1]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(BINARY_MAGIC, BINARY_VERSION, ds.n, ds.d, c, tag, kind))
        fh.write(np.ascontiguousarray(ds.X, dtype=dt).tobytes())
        if kind == LABELS_CLASS:
            fh.write(np.ascontiguousarray(ds.labels, dtype="<i8").tobytes())
        else:
            fh.write(np.ascontiguousarray(ds.targets, dtype=dt).tobytes())


def load_binary(path) -> Dataset:
    """Load the binary container; arrays are views over one memory-mapped buffer."""
    path = Path(path)
    try:
        size = path.stat().st_size
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if size < _HEADER.size:
        raise InputError(f"{path}: truncated header")
    with open(path, "rb") as fh:
        magic, version, n, d, c, tag, kind = _HEADER.unpack(fh.read(_HEADER.size))
    if magic != BINARY_MAGIC:
        raise InputError(f"{path}: bad magic {magic!r}")
    if version != BINARY_VERSION:
        raise InputError(f"{path}: unsupported version {version}")
    if tag not in _PRECISION or kind not in (LABELS_CLASS, LABELS_REAL):
        raise InputError(f"{path}: bad precision or label tag")
    if n == 0:
        raise InputError(f"{path}: empty dataset")
    dt = _PRECISION[tag]
    label_bytes = n * 8 if kind == LABELS_CLASS else n * c * dt.itemsize
    expected = _HEADER.size + n * d * dt.itemsize + label_bytes
    if size != expected:
        raise InputError(f"{path}: expected {expected} bytes, found {size} (truncated?)")
    buf = np.memmap(path, dtype=np.uint8, mode="r")
    off = _HEADER.size
    X = np.frombuffer(buf, dtype=dt, count=n * d, offset=off).reshape(n, d)
    off += n * d * dt.itemsize
    if not np.all(np.isfinite(X)):
        raise InputError(f"{path}: features contain non-finite values")
    if kind == LABELS_CLASS:
        labels = np.frombuffer(buf, dtype="<i8", count=n, offset=off)
        return Dataset(X, labels=labels, n_classes=c, name=path.stem, provenance=f"bin:{path}")
    targets = np.frombuffer(buf, dtype=dt, count=n * c, offset=off).reshape(n, c)
    if not np.all(np.isfinite(targets)):
        raise InputError(f"{path}: targets contain non-finite values")
    return Dataset(X, targets=targets, name=path.stem, provenance=f"bin:{path}")


def class_means(d: int, c: int) -> np.ndarray:
    """Fixed class centers: simplex vertices ``e_k`` when ``c <= d``, else fixed unit vectors."""
    if c <= d:
        return np.eye(c, d)
    M = np.random.default_rng(12345).standard_normal((c, d))
    return M / np.linalg.norm(M, axis=1, keepdims=True)


def synth_blobs(n: int, d: int, c: int, spread: float = 0.3, seed: int = 0) -> Dataset:
    """``c`` isotropic Gaussian blobs of standard deviation ``spread`` around fixed means."""
    if min(n, d, c) < 1:
        raise InputError("n, d and c must be positive")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % c)
    X = class_means(d, c)[labels] + spread * rng.standard_normal((n, d))
    return Dataset(X, labels=labels.astype(np.int64), n_classes=c,
                   name=f"blobs-n{n}-d{d}-c{c}", provenance=f"synth_blobs(spread={spread}, seed={seed})")


def parse_data_spec(spec: str, seed: int = 0) -> Dataset:
    """``blobs:n=2000,d=10,c=5[,spread=0.3]``, a ``.csv`` path or a binary container path."""
    if spec.startswith("blobs"):
        opts = {"n": 1000, "d": 10, "c": 5, "spread": 0.3, "seed": seed}
        _, _, rest = spec.partition(":")
        for item in filter(None, rest.split(",")):
            key, _, val = item.partition("=")
            if key not in opts:
                raise InputError(f"unknown blobs option {key!r}")
            opts[key] = float(val) if key == "spread" else int(val)
        return synth_blobs(opts["n"], opts["d"], opts["c"], opts["spread"], opts["seed"])
    path = Path(spec)
    if path.suffix.lower() == ".csv":
        return load_csv(path)
    return load_binary(path)


def metrics(pred_values, labels) -> dict:
    """MSE against the encoded targets and, for ``c >= 2``, argmax accuracy.

    ``labels`` holds class ids (one-hot encoded here) or, for a single
    output column, real targets.
    """
    V = np.asarray(pred_values, dtype=np.float64)
    V = V[:, None] if V.ndim == 1 else V
    labels = np.asarray(labels)
    if labels.shape[0] != V.shape[0]:
        raise InputError(f"{V.shape[0]} predictions for {labels.shape[0]} labels")
    c = V.shape[1]
    Y = encode_targets(labels, c) if c > 1 else labels.astype(np.float64).reshape(-1, 1)
    out = {"mse": float(np.mean((V - Y) ** 2))}
    if c > 1:
        out["accuracy"] = float(np.mean(classify(V) == labels))
    return out
