from __future__ import annotations

import gzip
import struct

import numpy as np
import pytest

from fastbat.data import (
    first_image_checksum,
    gen_blobs,
    gen_two_moons,
    load_mnist_idx,
    parse_idx_images,
    parse_idx_labels,
    split_indices,
    write_idx_images,
    write_idx_labels,
)
from fastbat.errors import ContractViolation, IdxParseError

# Frozen from the generators; any change to sampling or rescaling shows up here.
TWO_MOONS_100_DIGEST = "b5aa1ab816131f90e004246ce848b1992f7ab9467f36891ba76cd2791ad63731"
BLOBS_90_DIGEST = "7347a7dfc9c2e1ba25d20c5940524abd49ef42a04c945b7301d2b429b193fbb1"
# First image of the mlxtend 5000-digit sample after the fixed export shuffle.
MLXTEND_FIRST_IMAGE_SHA256 = "aa2aca8bcad2d867ae8b402e3a39cc106e0ea52dd3287772e12319deade423ce"


def test_toy_generators_are_seeded_and_bounded():
    moons = gen_two_moons(100, 0.1, 0, 0.25)
    assert moons.digest() == TWO_MOONS_100_DIGEST
    assert gen_blobs(90, 3, 1.0, 0, 0.25).digest() == BLOBS_90_DIGEST
    assert moons.features.min() >= 0.0 and moons.features.max() <= 1.0
    assert len(moons.test_idx) == 25 and np.bincount(moons.labels).tolist() == [50, 50]
    assert gen_two_moons(100, 0.1, 1).digest() != TWO_MOONS_100_DIGEST


def test_two_point_dataset_keeps_both_splits():
    d = gen_two_moons(2, seed=3)
    assert len(d.train_idx) == 1 and len(d.test_idx) == 1
    assert sorted(d.labels.tolist()) == [0, 1]
    with pytest.raises(ContractViolation):
        gen_two_moons(1)


def test_split_is_a_partition():
    tr, te = split_indices(37, 0.3, 4)
    assert sorted(np.concatenate([tr, te]).tolist()) == list(range(37))
    assert len(te) == 11
    with pytest.raises(ContractViolation):
        split_indices(10, 1.0, 0)


def _images(n=3):
    img = np.zeros((n, 2, 2), dtype=np.uint8)
    img[0, 0, 0] = 255
    img[1, 1, 1] = 128
    return img


def test_idx_round_trip_and_pixel_scaling(tmp_path):
    ip, lp = tmp_path / "i", tmp_path / "l"
    write_idx_images(ip, _images())
    write_idx_labels(lp, np.array([7, 1, 0], dtype=np.uint8))
    data = load_mnist_idx(ip, lp, test_fraction=0.0)
    assert data.features.shape == (3, 4)
    assert data.features[0, 0] == 1.0 and data.features[1, 3] == 128 / 255
    assert data.labels.tolist() == [7, 1, 0] and data.image_domain
    assert len(load_mnist_idx(ip, lp, limit=2, test_fraction=0.0).labels) == 2


def test_gzipped_files_are_read_transparently(tmp_path):
    raw = struct.pack(">IIII", 0x803, 1, 2, 2) + bytes([0, 255, 0, 0])
    (tmp_path / "i.gz").write_bytes(gzip.compress(raw))
    (tmp_path / "l.gz").write_bytes(gzip.compress(struct.pack(">II", 0x801, 1) + bytes([4])))
    data = load_mnist_idx(tmp_path / "i.gz", tmp_path / "l.gz", test_fraction=0.0)
    assert data.features.tolist() == [[0.0, 1.0, 0.0, 0.0]]


def test_idx_magic_and_truncation_errors():
    good = struct.pack(">IIII", 0x803, 2, 2, 2) + bytes(8)
    assert parse_idx_images(good).shape == (2, 2, 2)
    with pytest.raises(IdxParseError, match="magic") as info:
        parse_idx_images(struct.pack(">IIII", 0x804, 2, 2, 2) + bytes(8))
    assert info.value.offset == 0
    with pytest.raises(IdxParseError, match="truncated payload"):
        parse_idx_images(good[:-1])
    with pytest.raises(IdxParseError, match="header"):
        parse_idx_images(good[:10])
    with pytest.raises(IdxParseError):
        parse_idx_labels(struct.pack(">II", 0x801, 5) + bytes(4))


def test_count_mismatch_is_rejected(tmp_path):
    write_idx_images(tmp_path / "i", _images(3))
    write_idx_labels(tmp_path / "l", np.zeros(2, dtype=np.uint8))
    with pytest.raises(IdxParseError, match="count mismatch"):
        load_mnist_idx(tmp_path / "i", tmp_path / "l")


def test_mlxtend_export_checksum(mnist_files):
    images, labels = mnist_files
    assert first_image_checksum(images) == MLXTEND_FIRST_IMAGE_SHA256
    data = load_mnist_idx(images, labels, limit=2500)
    assert data.features.shape == (2500, 784)
    assert len(data.test_idx) == 500
    assert np.bincount(data.labels, minlength=10).min() > 150
