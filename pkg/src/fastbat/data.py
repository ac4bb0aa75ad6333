"""Datasets: two toy generators and an IDX (MNIST) reader/writer.

Features always live in [0, 1] because the perturbation box clips against
pixel bounds.
"""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from fastbat.errors import ContractViolation, IdxParseError

PROVENANCES = ("two_moons", "gaussian_blobs", "mnist_subset")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

STREAM_DATA = 5
STREAM_SPLIT = 6


@dataclass
class Dataset:
    features: np.ndarray  # [N, d] in [0, 1]
    labels: np.ndarray  # [N] int64
    train_idx: np.ndarray
    test_idx: np.ndarray
    provenance: str
    num_classes: int

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ContractViolation(f"unknown provenance {self.provenance!r}")
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ContractViolation("features must be [N, d] with one label per row")
        if self.features.size and (self.features.min() < 0 or self.features.max() > 1):
            raise ContractViolation("features must lie in [0, 1]")
        if np.intersect1d(self.train_idx, self.test_idx).size:
            raise ContractViolation("train and test splits overlap")

    @property
    def image_domain(self) -> bool:
        return self.provenance == "mnist_subset"

    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.features[self.train_idx], self.labels[self.train_idx]

    def test(self) -> tuple[np.ndarray, np.ndarray]:
        return self.features[self.test_idx], self.labels[self.test_idx]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.train_idx, dtype="<i8").tobytes())
        return h.hexdigest()


def split_indices(n: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle, then the first ``round(n * test_fraction)`` go to test.

    Both halves are kept non-empty whenever n >= 2 and the fraction is in (0, 1).
    """
    if not 0.0 <= test_fraction < 1.0:
        raise ContractViolation("test_fraction must be in [0, 1)")
    perm = np.random.default_rng(np.random.SeedSequence([seed, STREAM_SPLIT])).permutation(n)
    n_test = int(round(n * test_fraction))
    if test_fraction > 0 and n >= 2:
        n_test = min(max(n_test, 1), n - 1)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def _rescale(points: np.ndarray) -> np.ndarray:
    lo = points.min(axis=0)
    span = points.max(axis=0) - lo
    out = (points - lo) / np.where(span > 0, span, 1.0)
    return np.clip(out, 0.0, 1.0)


def _balanced_labels(n: int, classes: int) -> np.ndarray:
    return np.arange(n) % classes


def gen_two_moons(n: int, noise: float = 0.1, seed: int = 0, test_fraction: float = 0.25) -> Dataset:
    """Two interleaving half circles, labels alternate so classes stay balanced."""
    if n < 2:
        raise ContractViolation("two moons needs n >= 2")
    rng = np.random.default_rng(np.random.SeedSequence([seed, STREAM_DATA]))
    labels = _balanced_labels(n, 2)
    t = rng.uniform(0.0, np.pi, size=n)
    outer = np.stack([np.cos(t), np.sin(t)], axis=1)
    inner = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    pts = np.where(labels[:, None] == 0, outer, inner) + noise * rng.normal(size=(n, 2))
    train_idx, test_idx = split_indices(n, test_fraction, seed)
    return Dataset(_rescale(pts), labels.astype(np.int64), train_idx, test_idx, "two_moons", 2)


def gen_blobs(n: int, centers: int = 3, spread: float = 1.0, seed: int = 0,
              test_fraction: float = 0.25) -> Dataset:
    """Isotropic Gaussian clusters around centres drawn from [-5, 5]^2."""
    if n < 2 or centers < 1:
        raise ContractViolation("blobs needs n >= 2 and centers >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, STREAM_DATA]))
    means = rng.uniform(-5.0, 5.0, size=(centers, 2))
    labels = _balanced_labels(n, centers)
    pts = means[labels] + spread * rng.normal(size=(n, 2))
    train_idx, test_idx = split_indices(n, test_fraction, seed)
    return Dataset(_rescale(pts), labels.astype(np.int64), train_idx, test_idx, "gaussian_blobs", centers)


# ---------------------------------------------------------------- IDX


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _header(buf: bytes, magic: int, ndim: int, what: str) -> tuple[int, ...]:
    need = 4 + 4 * ndim
    if len(buf) < 4:
        raise IdxParseError(f"{what}: truncated before magic number", len(buf))
    (found,) = struct.unpack_from(">I", buf, 0)
    if found != magic:
        raise IdxParseError(f"{what}: bad magic 0x{found:08x}, expected 0x{magic:08x}", 0)
    if len(buf) < need:
        raise IdxParseError(f"{what}: truncated header", len(buf))
    return struct.unpack_from(f">{ndim}I", buf, 4)


def parse_idx_images(buf: bytes) -> np.ndarray:
    count, rows, cols = _header(buf, IDX_IMAGES_MAGIC, 3, "images")
    end = 16 + count * rows * cols
    if len(buf) < end:
        raise IdxParseError(f"images: truncated payload, need {end} bytes", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=count * rows * cols, offset=16).reshape(count, rows, cols)


def parse_idx_labels(buf: bytes) -> np.ndarray:
    (count,) = _header(buf, IDX_LABELS_MAGIC, 1, "labels")
    if len(buf) < 8 + count:
        raise IdxParseError(f"labels: truncated payload, need {8 + count} bytes", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=8).copy()


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise ContractViolation("IDX images must be uint8 [count, rows, cols]")
    header = struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape)
    Path(path).write_bytes(header + images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.dtype != np.uint8:
        raise ContractViolation("IDX labels must be uint8 [count]")
    Path(path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def load_mnist_idx(images_path, labels_path, limit: Optional[int] = None,
                   test_fraction: float = 0.2, seed: int = 0) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped), keep the first ``limit`` examples."""
    images = parse_idx_images(_read_bytes(images_path))
    labels = parse_idx_labels(_read_bytes(labels_path))
    if len(images) != len(labels):
        raise IdxParseError(f"count mismatch: {len(images)} images vs {len(labels)} labels", 4)
    if limit is not None:
        if limit < 1:
            raise ContractViolation("limit must be positive")
        images, labels = images[:limit], labels[:limit]
    features = images.reshape(len(images), -1).astype(np.float64) / 255.0
    train_idx, test_idx = split_indices(len(labels), test_fraction, seed)
    return Dataset(features, labels.astype(np.int64), train_idx, test_idx, "mnist_subset", 10)


def first_image_checksum(images_path) -> str:
    images = parse_idx_images(_read_bytes(images_path))
    if not len(images):
        raise ContractViolation("IDX file holds no images")
    return hashlib.sha256(images[0].tobytes()).hexdigest()


def export_mlxtend_digits(out_dir, seed: int = 0) -> tuple[Path, Path]:
    """Write the 5000-digit MNIST sample bundled with mlxtend as shuffled IDX files.

    The bundled array is sorted by class, so it is permuted once with a fixed
    seed; a front truncation then stays roughly class balanced.
    """
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    perm = np.random.default_rng(np.random.SeedSequence([seed, STREAM_DATA])).permutation(len(y))
    images = np.asarray(x)[perm].round().astype(np.uint8).reshape(-1, 28, 28)
    labels = np.asarray(y)[perm].astype(np.uint8)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    img_path, lbl_path = out / "mnist5k-images-idx3-ubyte", out / "mnist5k-labels-idx1-ubyte"
    write_idx_images(img_path, images)
    write_idx_labels(lbl_path, labels)
    return img_path, lbl_path
