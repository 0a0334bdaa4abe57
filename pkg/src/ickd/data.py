"""Synthetic datasets and the binary dataset file format.

Every generator draws from ``numpy.random.Philox`` (a counter-based
generator) keyed only by the integer seed, so datasets are reproducible
across machines and numpy versions that keep Philox's stream stable.

File layout (little-endian)::

    b"ICKD"  0x01  N:u32  D:u32  K:u16  features:f64[N*D] (row-major)  labels:u16[N]
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgumentError

DATASET_MAGIC = b"ICKD"
DATASET_RECORD = 0x01
_HEADER = struct.Struct("<4sBIIH")


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64).ravel()
        if x.ndim != 2:
            raise InvalidArgumentError(f"features must be a matrix, got shape {x.shape}")
        if x.shape[0] != y.size:
            raise InvalidArgumentError(f"{x.shape[0]} feature rows but {y.size} labels")
        if not np.all(np.isfinite(x)):
            raise InvalidArgumentError("features contain non-finite values")
        k = int(self.class_count)
        if k < 2:
            raise InvalidArgumentError("class_count must be >= 2")
        if y.size and (y.min() < 0 or y.max() >= k):
            raise InvalidArgumentError(f"labels must lie in [0, {k})")
        if y.size < k:
            raise InvalidArgumentError(f"need at least {k} samples for {k} classes, got {y.size}")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "class_count", k)

    def __len__(self):
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.class_count)

    def checksum(self) -> str:
        return hashlib.sha256(dataset_bytes(self)).hexdigest()


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def gen_blobs(k: int, per_class: int, dim: int, spread: float, seed: int) -> LabeledDataset:
    """Isotropic Gaussian clusters around centres on the unit sphere.

    Samples are ordered class by class.
    """
    if k < 2 or per_class < 2 or dim < 1:
        raise InvalidArgumentError("gen_blobs needs k >= 2, per_class >= 2, dim >= 1")
    if spread < 0:
        raise InvalidArgumentError("spread must be nonnegative")
    rng = _rng(seed)
    centers = rng.standard_normal((k, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    noise = rng.standard_normal((k, per_class, dim)) * spread
    x = (centers[:, None, :] + noise).reshape(k * per_class, dim)
    y = np.repeat(np.arange(k), per_class)
    return LabeledDataset(x, y, k)


SPIRAL_TURNS = 1.0
SPIRAL_R0 = 0.1


def spiral_point(cls: int, k: int, radius, angle_noise=0.0):
    """Point on arm ``cls`` at the given radius; the arm angle grows linearly with radius."""
    radius = np.asarray(radius, dtype=np.float64)
    theta = 2.0 * np.pi * cls / k + 2.0 * np.pi * SPIRAL_TURNS * radius + angle_noise
    return np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=-1)


def gen_spirals(k: int, per_class: int, noise: float, seed: int) -> LabeledDataset:
    """Interleaved 2-D spiral arms with Gaussian angular noise."""
    if not 2 <= k <= 8:
        raise InvalidArgumentError("gen_spirals supports 2 to 8 arms")
    if per_class < 2:
        raise InvalidArgumentError("per_class must be >= 2")
    rng = _rng(seed)
    radius = SPIRAL_R0 + (1.0 - SPIRAL_R0) * np.linspace(0.0, 1.0, per_class)
    parts = []
    for c in range(k):
        jitter = rng.standard_normal(per_class) * noise
        parts.append(spiral_point(c, k, radius, jitter))
    x = np.concatenate(parts)
    y = np.repeat(np.arange(k), per_class)
    return LabeledDataset(x, y, k)


def stratified_split(ds: LabeledDataset, test_fraction: float, seed: int):
    """Split each class separately; returns ``(train, test)``."""
    if not 0.0 < test_fraction < 1.0:
        raise InvalidArgumentError("test_fraction must lie in (0, 1)")
    rng = _rng(seed)
    train_idx, test_idx = [], []
    for c in range(ds.class_count):
        members = np.flatnonzero(ds.labels == c)
        members = members[rng.permutation(members.size)]
        n_test = int(round(members.size * test_fraction))
        test_idx.append(members[:n_test])
        train_idx.append(members[n_test:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return ds.subset(train_idx), ds.subset(test_idx)


def dataset_bytes(ds: LabeledDataset) -> bytes:
    n, d = ds.features.shape
    if ds.class_count > 0xFFFF:
        raise InvalidArgumentError("class_count does not fit in u16")
    head = _HEADER.pack(DATASET_MAGIC, DATASET_RECORD, n, d, ds.class_count)
    return head + ds.features.astype("<f8").tobytes() + ds.labels.astype("<u2").tobytes()


def dataset_from_bytes(buf: bytes) -> LabeledDataset:
    if len(buf) < _HEADER.size:
        raise FormatError("dataset header truncated", len(buf))
    magic, record, n, d, k = _HEADER.unpack_from(buf, 0)
    if magic != DATASET_MAGIC:
        raise FormatError("bad dataset magic", 0)
    if record != DATASET_RECORD:
        raise FormatError(f"unexpected record type 0x{record:02x}", 4)
    pos = _HEADER.size
    feat_end = pos + 8 * n * d
    if len(buf) < feat_end:
        raise FormatError("feature block truncated", len(buf))
    lab_end = feat_end + 2 * n
    if len(buf) < lab_end:
        raise FormatError("label block truncated", len(buf))
    if len(buf) > lab_end:
        raise FormatError("trailing bytes after label block", lab_end)
    x = np.frombuffer(buf, dtype="<f8", count=n * d, offset=pos).reshape(n, d)
    y = np.frombuffer(buf, dtype="<u2", count=n, offset=feat_end)
    try:
        return LabeledDataset(x, y.astype(np.int64), k)
    except InvalidArgumentError as exc:
        raise FormatError(str(exc), pos) from None


def save_dataset(ds: LabeledDataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def load_dataset(path) -> LabeledDataset:
    return dataset_from_bytes(Path(path).read_bytes())
