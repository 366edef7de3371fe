"""Labeled datasets, IID client partitioning, and uniform label-flip noise."""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DomainError, ParseError, ShapeError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Features in ``[0, 1]^d`` with integer class labels.

    ``noise_rate`` is ``None`` for clean data and the injected flip rate for
    noised copies.
    """

    features: np.ndarray
    labels: np.ndarray
    class_count: int
    noise_rate: float | None = None

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        y = np.array(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ShapeError(f"features {x.shape} and labels {y.shape} do not pair up")
        if y.size == 0:
            raise DomainError("dataset must be nonempty")
        if self.class_count < 1 or y.min() < 0 or y.max() >= self.class_count:
            raise DomainError(f"labels must lie in [0, {self.class_count})")
        if not (np.all(x >= 0.0) and np.all(x <= 1.0)):
            raise DomainError("feature components must lie in [0, 1]")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "class_count", int(self.class_count))

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def provenance(self) -> str:
        return "clean" if self.noise_rate is None else f"noised({self.noise_rate:g})"

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[indices], self.labels[indices],
                              self.class_count, self.noise_rate)

    def head(self, limit: int | None) -> "LabeledDataset":
        if limit is None or limit >= len(self):
            return self
        return self.subset(np.arange(limit))

    def __eq__(self, other):
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (
            self.class_count == other.class_count
            and self.noise_rate == other.noise_rate
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None


def partition_indices(n: int, client_count: int, seed: int) -> list[np.ndarray]:
    if client_count <= 0 or client_count > n:
        raise DomainError(f"cannot split {n} examples across {client_count} clients")
    order = np.random.default_rng(seed).permutation(n)
    base, extra = divmod(n, client_count)
    shards = []
    start = 0
    for k in range(client_count):
        size = base + (1 if k < extra else 0)
        shards.append(order[start:start + size])
        start += size
    return shards


def partition_iid(dataset: LabeledDataset, client_count: int, seed: int) -> list[LabeledDataset]:
    """Seeded shuffle, then contiguous near-equal shards.

    Leftover examples go one each to the lowest-numbered clients, so 101
    examples over 4 clients gives sizes (26, 25, 25, 25).
    """
    return [dataset.subset(idx) for idx in partition_indices(len(dataset), client_count, seed)]


def flip_count(rate: float, n: int) -> int:
    """``round(rate * n)`` with halves rounded up."""
    return int(math.floor(rate * n + 0.5))


def inject_label_noise(dataset: LabeledDataset, rate: float, seed: int) -> LabeledDataset:
    """Flip exactly ``round(rate * n)`` labels, each to a uniformly drawn other class.

    The flipped examples come from the front of one seeded permutation and the
    replacement offsets are drawn for every example up front, so with a fixed
    seed the flipped set at a lower rate is a subset of the one at a higher
    rate, with the same replacement labels.
    """
    if not 0.0 <= rate <= 1.0:
        raise DomainError(f"noise rate {rate} outside [0, 1]")
    n = len(dataset)
    count = flip_count(rate, n)
    c = dataset.class_count
    if count > 0 and c < 2:
        raise DomainError("label noise needs at least two classes")
    labels = np.array(dataset.labels)
    if count > 0:
        rng = np.random.default_rng(seed)
        order = rng.permutation(n)
        offsets = rng.integers(1, c, size=n)
        chosen = order[:count]
        labels[chosen] = (labels[chosen] + offsets[chosen]) % c
    return LabeledDataset(dataset.features, labels, c, float(rate))


# ---------------------------------------------------------------------------
# IDX files


def _read_maybe_gzip(path: Path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, which: str) -> tuple[list[int], bytes]:
    if len(raw) < 4:
        raise ParseError(f"{which}.header", "truncated file")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise ParseError(f"{which}.magic", f"wrong magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise ParseError(f"{which}.header", "truncated file")
    shape = list(struct.unpack(f">{ndim}I", raw[4:end]))
    need = int(np.prod(shape))
    body = raw[end:]
    if len(body) < need:
        raise ParseError(f"{which}.data", f"truncated file: need {need} bytes, have {len(body)}")
    return shape, body[:need]


def load_idx(images_path, labels_path, limit: int | None = None, class_count: int = 10) -> LabeledDataset:
    """Read an MNIST-style IDX image/label pair (optionally gzipped).

    Pixels are scaled by 1/255 so every feature lies in [0, 1].
    """
    img_shape, img_body = _parse_idx(_read_maybe_gzip(images_path), IDX_IMAGES_MAGIC, "images")
    lab_shape, lab_body = _parse_idx(_read_maybe_gzip(labels_path), IDX_LABELS_MAGIC, "labels")
    if img_shape[0] != lab_shape[0]:
        raise ParseError("count", f"{img_shape[0]} images but {lab_shape[0]} labels")
    n = img_shape[0]
    if limit is not None:
        n = min(n, int(limit))
    if n == 0:
        raise ParseError("count", "no examples")
    width = int(np.prod(img_shape[1:]))
    pixels = np.frombuffer(img_body, dtype=np.uint8, count=n * width).reshape(n, width)
    labels = np.frombuffer(lab_body, dtype=np.uint8, count=n).astype(np.int64)
    if labels.max() >= class_count:
        raise ParseError("labels.data", f"label {labels.max()} >= {class_count}")
    return LabeledDataset(pixels / 255.0, labels, class_count)


def _write_bytes(path: Path, payload: bytes) -> None:
    path = Path(path)
    if path.suffix == ".gz":
        payload = gzip.compress(payload, mtime=0)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


def write_idx(dataset: LabeledDataset, images_path, labels_path, image_shape: Sequence[int] | None = None) -> None:
    """Write ``dataset`` as an IDX pair; features are stored as round(255 * x)."""
    n, d = dataset.features.shape
    shape = list(image_shape) if image_shape is not None else [1, d]
    if len(shape) != 2 or int(np.prod(shape)) != d:
        raise ShapeError(f"image shape {shape} is not (rows, cols) holding {d} features")
    if dataset.labels.max() > 255:
        raise DomainError("IDX labels are single bytes")
    pixels = np.rint(dataset.features * 255.0).astype(np.uint8)
    img = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, *shape)
    lab = struct.pack(">II", IDX_LABELS_MAGIC, n)
    _write_bytes(images_path, img + pixels.tobytes())
    _write_bytes(labels_path, lab + dataset.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# synthetic data


def make_blobs(n: int, dim: int, class_count: int, seed: int, spread: float = 0.12,
               centers_seed: int | None = None) -> LabeledDataset:
    """Gaussian class blobs clipped to the unit cube.

    Centers come from ``centers_seed`` (default ``seed``) so a train and a test
    set can share geometry while drawing different points.
    """
    crng = np.random.default_rng(seed if centers_seed is None else centers_seed)
    centers = crng.uniform(0.2, 0.8, size=(class_count, dim))
    rng = np.random.default_rng([seed, 1])
    labels = rng.integers(0, class_count, size=n)
    x = centers[labels] + spread * rng.standard_normal((n, dim))
    return LabeledDataset(np.clip(x, 0.0, 1.0), labels, class_count)
