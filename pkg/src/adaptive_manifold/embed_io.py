"""Embedding sets on disk and in memory, plus synthetic data and the
l2 / PLC feature pre-processing.

AMEB layout, all little-endian::

    0-3    magic b"AMEB"
    4-7    u32 version (= 1)
    8-11   u32 d
    12-19  u64 n
    20-23  u32 num_classes
    24-    n records of (u32 label, d x float32)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from os import PathLike

import numpy as np

MAGIC = b"AMEB"
VERSION = 1
HEADER = struct.Struct("<4sIIQI")


class AmebError(ValueError):
    """Base class for malformed AMEB files."""


class BadMagicError(AmebError):
    pass


class VersionMismatchError(AmebError):
    pass


class TruncatedFileError(AmebError):
    pass


class TrailingBytesError(AmebError):
    pass


class NonFiniteValueError(AmebError):
    pass


class LabelRangeError(AmebError):
    pass


@dataclass
class EmbeddingSet:
    """Feature vectors (one column per example) with integer class labels.

    ``num_classes`` is the declared class count; it may exceed
    ``labels.max() + 1`` when a file declares classes with no examples.
    """

    vectors: np.ndarray
    labels: np.ndarray
    num_classes: int | None = None
    class_names: list[str] | None = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be a d x n matrix")
        d, n = self.vectors.shape
        if d < 1 or n < 1:
            raise ValueError(f"need d >= 1 and n >= 1, got d={d}, n={n}")
        if self.labels.shape != (n,):
            raise ValueError(f"expected {n} labels, got {self.labels.shape}")
        if np.any(self.labels < 0):
            raise ValueError("labels must be non-negative")
        if self.num_classes is None:
            if self.class_names is not None:
                self.num_classes = len(self.class_names)
            else:
                self.num_classes = int(self.labels.max()) + 1
        if np.any(self.labels >= self.num_classes):
            raise ValueError(f"label >= num_classes ({self.num_classes})")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("vectors contain non-finite entries")

    @property
    def dim(self) -> int:
        return self.vectors.shape[0]

    def __len__(self) -> int:
        return self.vectors.shape[1]

    def indices_of(self, cls: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cls)


def _record_dtype(d: int) -> np.dtype:
    return np.dtype([("label", "<u4"), ("vec", "<f4", (d,))])


def save_embeddings(emb: EmbeddingSet, path: str | PathLike) -> None:
    d, n = emb.vectors.shape
    records = np.empty(n, dtype=_record_dtype(d))
    records["label"] = emb.labels
    records["vec"] = emb.vectors.T
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, d, n, emb.num_classes))
        fh.write(records.tobytes())


def load_embeddings(path: str | PathLike) -> EmbeddingSet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < HEADER.size:
        raise TruncatedFileError(f"{path}: truncated header ({len(raw)} bytes)")
    _, version, d, n, num_classes = HEADER.unpack_from(raw)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    dtype = _record_dtype(d)
    expected = HEADER.size + n * dtype.itemsize
    if len(raw) < expected:
        raise TruncatedFileError(
            f"{path}: truncated, {len(raw)} bytes but header implies {expected}"
        )
    if len(raw) > expected:
        raise TrailingBytesError(f"{path}: {len(raw) - expected} trailing bytes")
    records = np.frombuffer(raw, dtype=dtype, count=n, offset=HEADER.size)
    vectors = records["vec"].T.astype(np.float64)
    labels = records["label"].astype(np.int64)
    bad = np.flatnonzero(~np.all(np.isfinite(vectors), axis=0))
    if bad.size:
        raise NonFiniteValueError(f"{path}: non-finite value in record {bad[0]}")
    over = np.flatnonzero(labels >= num_classes)
    if over.size:
        raise LabelRangeError(
            f"{path}: record {over[0]} has label {labels[over[0]]} "
            f">= declared class count {num_classes}"
        )
    return EmbeddingSet(vectors, labels, num_classes=num_classes)


@dataclass
class SynthConfig:
    num_classes: int
    dim: int
    per_class: int
    class_sep: float = 4.0
    noise_sigma: float = 1.0
    seed: int = 0


def synth_gaussian(cfg: SynthConfig) -> EmbeddingSet:
    """Isotropic Gaussian classes around ``class_sep * e_c``.

    Class means sit on scaled coordinate axes, so every pair of means is
    exactly ``class_sep * sqrt(2)`` apart. Requires ``num_classes <= dim``.
    """
    for name in ("num_classes", "dim", "per_class", "class_sep", "noise_sigma"):
        if getattr(cfg, name) <= 0:
            raise ValueError(f"{name} must be positive")
    if cfg.num_classes > cfg.dim:
        raise ValueError(
            f"num_classes={cfg.num_classes} exceeds dim={cfg.dim}; "
            "one-hot class means need num_classes <= dim"
        )
    rng = np.random.default_rng(cfg.seed)
    means = cfg.class_sep * np.eye(cfg.dim, cfg.num_classes)
    labels = np.repeat(np.arange(cfg.num_classes), cfg.per_class)
    noise = rng.normal(0.0, cfg.noise_sigma, size=(cfg.dim, labels.size))
    return EmbeddingSet(means[:, labels] + noise, labels, num_classes=cfg.num_classes)


def class_means(emb: EmbeddingSet) -> np.ndarray:
    """Per-class mean column (d x num_classes); NaN for empty classes."""
    out = np.full((emb.dim, emb.num_classes), np.nan)
    for c in range(emb.num_classes):
        idx = emb.indices_of(c)
        if idx.size:
            out[:, c] = emb.vectors[:, idx].mean(axis=1)
    return out


def preprocess_l2(vectors: np.ndarray) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=0)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValueError(f"column {zero[0]} has zero norm")
    return vectors / norms


def preprocess_plc(vectors: np.ndarray) -> np.ndarray:
    """Signed square root, column l2-normalization, then centering.

    On non-negative (post-ReLU) features the signed root is the plain
    elementwise root. The mean is taken over the columns given, so call
    it once on the support and query columns of an episode together.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    powered = np.sign(vectors) * np.sqrt(np.abs(vectors))
    normed = preprocess_l2(powered)
    return normed - normed.mean(axis=1, keepdims=True)


PREPROCESSORS = {"l2": preprocess_l2, "plc": preprocess_plc}


def preprocess(vectors: np.ndarray, method: str) -> np.ndarray:
    try:
        fn = PREPROCESSORS[method]
    except KeyError:
        raise ValueError(f"unknown preprocessing {method!r}; use 'l2' or 'plc'") from None
    return fn(vectors)
