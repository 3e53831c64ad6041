"""General kernel models, the between-projection auxiliary state, and model files."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, NumericError
from .kernels import KernelFamily, KernelSpec, kernel_matrix
from .preconditioner import NystromPreconditioner


@dataclass
class KernelModel:
    """``f(x) = sum_j alpha_j K(x, z_j)`` with one weight column per output."""

    spec: KernelSpec
    Z: np.ndarray  # (p, d)
    alpha: np.ndarray  # (p, c)

    def __post_init__(self):
        if self.Z.ndim != 2 or self.Z.shape[0] < 1:
            raise InputError(f"centers must be (p, d) with p >= 1, got {self.Z.shape}")
        if self.alpha.ndim == 1:
            self.alpha = self.alpha[:, None]
        if self.alpha.shape[0] != self.Z.shape[0]:
            raise InputError(f"{self.Z.shape[0]} centers but {self.alpha.shape[0]} weight rows")

    @property
    def p(self) -> int:
        return self.Z.shape[0]

    @property
    def c(self) -> int:
        return self.alpha.shape[1]

    @classmethod
    def zeros(cls, spec: KernelSpec, Z, c: int, dtype=np.float64) -> "KernelModel":
        Z = np.asarray(Z, dtype=dtype)
        return cls(spec, Z, np.zeros((Z.shape[0], c), dtype=dtype))

    def copy(self) -> "KernelModel":
        return KernelModel(self.spec, self.Z, self.alpha.copy())


@dataclass
class AuxiliaryState:
    """Temporary centers and weights accumulated since the last projection.

    ``Z_tmp``/``alpha_tmp`` hold one block per processed batch; ``alpha_s``
    are the weights on the Nystrom subsample; ``h`` is the accumulated
    gradient evaluated at the model centers.
    """

    alpha_s: np.ndarray
    h: np.ndarray
    Z_tmp: list = field(default_factory=list)
    alpha_tmp: list = field(default_factory=list)
    batches_seen: int = 0

    @classmethod
    def empty(cls, p: int, s: int, c: int, dtype=np.float64) -> "AuxiliaryState":
        return cls(alpha_s=np.zeros((s, c), dtype=dtype), h=np.zeros((p, c), dtype=dtype))

    def reset(self) -> None:
        self.Z_tmp.clear()
        self.alpha_tmp.clear()
        self.alpha_s[...] = 0
        self.h[...] = 0
        self.batches_seen = 0

    @property
    def tmp_rows(self) -> int:
        return sum(b.shape[0] for b in self.Z_tmp)

    def is_reset(self) -> bool:
        return (not self.Z_tmp and not self.alpha_tmp and self.batches_seen == 0
                and not self.alpha_s.any() and not self.h.any())


def predict(model: KernelModel, X) -> np.ndarray:
    X = np.asarray(X)
    return kernel_matrix(model.spec, X, model.Z, dtype=model.alpha.dtype) @ model.alpha


def predict_auxiliary(model: KernelModel, state: AuxiliaryState,
                      P: NystromPreconditioner, X) -> np.ndarray:
    """Auxiliary model: original centers + temporary batches + Nystrom track."""
    X = np.asarray(X)
    out = predict(model, X)
    dtype = model.alpha.dtype
    for Zb, ab in zip(state.Z_tmp, state.alpha_tmp):
        out += kernel_matrix(model.spec, X, Zb, dtype=dtype) @ ab
    if state.alpha_s.shape[0]:
        out += kernel_matrix(model.spec, X, P.X_s, dtype=dtype) @ state.alpha_s
    return out


def classify(values) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    values = np.asarray(values)
    if values.ndim != 2 or values.shape[1] < 2:
        raise InputError(f"classify needs (j, c>=2) values, got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise NumericError("non-finite prediction values")
    return values.argmax(axis=1)


# -- serialization -----------------------------------------------------------

MODEL_MAGIC = b"KSLV-KMODEL\x00\x00\x00\x01\x00"
_FAMILY_TAG = {KernelFamily.LAPLACE: 0, KernelFamily.GAUSSIAN: 1}
_PRECISION_TAG = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_HEADER = struct.Struct("<BBdQQQ")


def save_model(model: KernelModel, path) -> Path:
    """Write the binary container and a ``.json`` sidecar next to it."""
    path = Path(path)
    dtype = np.dtype(model.alpha.dtype)
    if dtype not in _PRECISION_TAG:
        raise InputError(f"unsupported precision {dtype}")
    le = dtype.newbyteorder("<")
    p, d = model.Z.shape
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(_HEADER.pack(_FAMILY_TAG[model.spec.family], _PRECISION_TAG[dtype],
                              float(model.spec.bandwidth), p, d, model.c))
        fh.write(np.ascontiguousarray(model.Z, dtype=le).tobytes())
        fh.write(np.ascontiguousarray(model.alpha, dtype=le).tobytes())
    meta = {"format": "kslv-kernel-model", "version": 1,
            "kernel": model.spec.family.value, "bandwidth": model.spec.bandwidth,
            "precision": dtype.name, "p": p, "d": d, "c": model.c}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2))
    return path


def load_model(path) -> KernelModel:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read model file {path}: {exc}") from exc
    if len(raw) < len(MODEL_MAGIC) + _HEADER.size or not raw.startswith(MODEL_MAGIC):
        raise InputError(f"{path} is not a kernel model file (bad magic)")
    fam, prec, bw, p, d, c = _HEADER.unpack_from(raw, len(MODEL_MAGIC))
    try:
        family = {v: k for k, v in _FAMILY_TAG.items()}[fam]
        dtype = {v: k for k, v in _PRECISION_TAG.items()}[prec]
    except KeyError:
        raise InputError(f"{path}: unknown kernel or precision tag") from None
    le = dtype.newbyteorder("<")
    off = len(MODEL_MAGIC) + _HEADER.size
    need = off + (p * d + p * c) * dtype.itemsize
    if len(raw) != need:
        raise InputError(f"{path}: expected {need} bytes, found {len(raw)}")
    Z = np.frombuffer(raw, dtype=le, count=p * d, offset=off).reshape(p, d)
    off += p * d * dtype.itemsize
    alpha = np.frombuffer(raw, dtype=le, count=p * c, offset=off).reshape(p, c)
    return KernelModel(KernelSpec(family, bw), Z.astype(dtype), alpha.astype(dtype))
