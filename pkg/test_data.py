#!/usr/bin/env python3
"""
Tests for IDX loading, MCAR masks, zero imputation and mask files.
"""

import gzip
import os
import struct
import sys
import tempfile

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '.'))

import numpy as np
import pytest

from latentfill import data
from latentfill.errors import (BadMagic, DimensionMismatch, InvalidRate, InvalidValue, ManifestMismatch, ShapeMismatch,
                               Truncated)


def _write_idx(directory, images, labels=None, image_magic=2051, label_magic=2049, gz=False, cut=0):
    n, rows, cols = images.shape
    blob = struct.pack(">IIII", image_magic, n, rows, cols) + images.astype(np.uint8).tobytes()
    if cut:
        blob = blob[:-cut]
    suffix = ".gz" if gz else ""
    image_path = os.path.join(directory, "images-idx3-ubyte" + suffix)
    opener = gzip.open if gz else open
    with opener(image_path, "wb") as f:
        f.write(blob)
    label_path = None
    if labels is not None:
        label_path = os.path.join(directory, "labels-idx1-ubyte" + suffix)
        with opener(label_path, "wb") as f:
            f.write(struct.pack(">II", label_magic, len(labels)) + np.asarray(labels, dtype=np.uint8).tobytes())
    return image_path, label_path


def _pixels(n=3, rows=28, cols=28, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(n, rows, cols), dtype=np.uint8)


def test_load_idx_scales_to_unit_interval():
    """Pixels are divided by 255 and labels come back as integers."""
    pixels = _pixels()
    pixels[0, 0, 0], pixels[0, 0, 1] = 0, 255
    with tempfile.TemporaryDirectory() as tmp:
        image_path, label_path = _write_idx(tmp, pixels, [7, 1, 3])
        batch = data.load_idx(image_path, label_path)
    assert batch.data.shape == (3, 1, 28, 28)
    assert batch.data.dtype == np.float32
    assert batch.data[0, 0, 0, 0] == 0.0
    assert batch.data[0, 0, 0, 1] == 1.0
    np.testing.assert_allclose(batch.data[:, 0], pixels / 255.0, rtol=0, atol=1e-7)
    assert batch.labels.tolist() == [7, 1, 3]


def test_load_idx_gzip():
    """A gzipped file loads the same as the plain one."""
    pixels = _pixels(n=2, seed=1)
    with tempfile.TemporaryDirectory() as tmp:
        plain, _ = _write_idx(tmp, pixels)
        zipped, _ = _write_idx(tmp, pixels, gz=True)
        assert np.array_equal(data.load_idx(plain).data, data.load_idx(zipped).data)


def test_load_idx_rejects_label_magic_as_images():
    """A label file's magic (2049) in the image slot is a BadMagic."""
    with tempfile.TemporaryDirectory() as tmp:
        image_path, _ = _write_idx(tmp, _pixels(n=1), image_magic=2049)
        with pytest.raises(BadMagic):
            data.load_idx(image_path)


def test_load_idx_truncated():
    """Fewer pixel bytes than the header declares is reported as Truncated."""
    with tempfile.TemporaryDirectory() as tmp:
        image_path, _ = _write_idx(tmp, _pixels(n=2), cut=10)
        with pytest.raises(Truncated):
            data.load_idx(image_path)
        short = os.path.join(tmp, "short")
        with open(short, "wb") as f:
            f.write(b"\x00\x00")
        with pytest.raises(Truncated):
            data.load_idx(short)


def test_load_idx_label_count_mismatch():
    with tempfile.TemporaryDirectory() as tmp:
        image_path, label_path = _write_idx(tmp, _pixels(n=3), [1, 2])
        with pytest.raises(DimensionMismatch):
            data.load_idx(image_path, label_path)


def test_load_idx_empty_file_is_valid():
    """A well-formed file with zero images gives an empty batch."""
    with tempfile.TemporaryDirectory() as tmp:
        image_path, _ = _write_idx(tmp, np.zeros((0, 28, 28), dtype=np.uint8))
        batch = data.load_idx(image_path)
    assert len(batch) == 0
    assert batch.data.shape == (0, 1, 28, 28)


def test_image_batch_rejects_out_of_range():
    with pytest.raises(ValueError):
        data.ImageBatch(np.full((1, 1, 2, 2), 1.5))
    with pytest.raises(ShapeMismatch):
        data.ImageBatch(np.zeros((2, 2)))


def test_mask_rate_extremes():
    """Rate 0 observes everything, rate 1 observes nothing."""
    assert data.mcar_mask(4, (1, 28, 28), 0.0, seed=3).masks.min() == 1
    assert data.mcar_mask(4, (1, 28, 28), 1.0, seed=3).masks.max() == 0


def test_mask_rate_statistics():
    """Over 10^6 entries the missing fraction is close to the rate."""
    masks = data.mcar_mask(1000, (1, 25, 40), 0.5, seed=11).masks
    assert masks.size == 1_000_000
    missing = 1.0 - masks.mean()
    assert abs(missing - 0.5) < 0.0025
    assert set(np.unique(masks).tolist()) <= {0, 1}


def test_mask_determinism_and_order_independence():
    """Image i's mask depends only on (seed, rate, i), not on how many images were drawn."""
    a = data.mcar_mask(5, (1, 28, 28), 0.3, seed=42)
    b = data.mcar_mask(5, (1, 28, 28), 0.3, seed=42)
    c = data.mcar_mask(3, (1, 28, 28), 0.3, seed=42)
    d = data.mcar_mask(5, (1, 28, 28), 0.3, seed=43)
    assert np.array_equal(a.masks, b.masks)
    assert np.array_equal(a.masks[:3], c.masks)
    assert not np.array_equal(a.masks, d.masks)


def test_mask_invalid_rate():
    for rate in (-0.1, 1.5):
        with pytest.raises(InvalidRate):
            data.mcar_mask(1, (1, 28, 28), rate, seed=0)


def test_mask_seed_range():
    """Seeds must fit the unsigned 32-bit header field; the bounds themselves are fine."""
    for seed in (-1, 2 ** 32):
        with pytest.raises(InvalidValue, match="outside"):
            data.mcar_mask(1, (1, 4, 4), 0.5, seed=seed)
    top = data.mcar_mask(2, (1, 4, 4), 0.5, seed=2 ** 32 - 1)
    assert top.masks.shape == (2, 1, 4, 4)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "negative.masks")
        with pytest.raises(InvalidValue):
            data.save_masks(data.MaskSet(top.masks, 0.5, -3), path)
        assert not os.path.exists(path)


def test_zero_impute():
    """Missing pixels become zero and zero imputation is idempotent."""
    images = data.ImageBatch(np.full((2, 1, 28, 28), 0.7, dtype=np.float32))
    masks = data.mcar_mask(2, (1, 28, 28), 0.5, seed=5)
    imputed = data.zero_impute(images, masks)
    observed = masks.masks.astype(bool)
    assert np.all(imputed.data[~observed] == 0.0)
    np.testing.assert_allclose(imputed.data[observed], 0.7)
    again = data.zero_impute(imputed, masks)
    assert np.array_equal(again.data, imputed.data)

    full = data.zero_impute(images, data.mcar_mask(2, (1, 28, 28), 0.0, seed=5))
    assert np.array_equal(full.data, images.data)
    empty = data.zero_impute(images, data.mcar_mask(2, (1, 28, 28), 1.0, seed=5))
    assert not empty.data.any()


def test_zero_impute_shape_mismatch():
    images = data.ImageBatch(np.zeros((2, 1, 28, 28)))
    with pytest.raises(ShapeMismatch):
        data.zero_impute(images, data.mcar_mask(3, (1, 28, 28), 0.5, seed=0))


def test_make_split_persistent_masks():
    images = data.ImageBatch(np.zeros((4, 1, 28, 28)), np.arange(4))
    split = data.make_split(images, 0.25, seed=9, role="test")
    assert split.role == "test"
    assert split.masks.masks.shape == images.data.shape
    assert np.array_equal(split.masks.masks, data.mcar_mask(4, (1, 28, 28), 0.25, 9).masks)


def test_mask_file_round_trip_and_tamper():
    """Saved masks reload bit-identical; a flipped bit fails verification."""
    masks = data.mcar_mask(7, (1, 28, 28), 0.6, seed=123)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "train.masks")
        data.save_masks(masks, path)
        loaded = data.load_masks(path, (1, 28, 28), verify=True)
        assert np.array_equal(loaded.masks, masks.masks)
        assert loaded.seed == 123
        assert abs(loaded.rate - 0.6) < 1e-6

        with open(path, "r+b") as f:
            f.seek(data.MASK_HEADER.size + 5)
            byte = f.read(1)[0]
            f.seek(data.MASK_HEADER.size + 5)
            f.write(bytes([byte ^ 0x01]))
        with pytest.raises(ManifestMismatch):
            data.load_masks(path, (1, 28, 28), verify=True)

        bad = os.path.join(tmp, "bad.masks")
        with open(bad, "wb") as f:
            f.write(b"NOPE" + b"\x00" * 12)
        with pytest.raises(BadMagic):
            data.load_masks(bad, (1, 28, 28))


@pytest.mark.skipif(not os.environ.get("LATENTFILL_MNIST_DIR"), reason="LATENTFILL_MNIST_DIR not set")
def test_real_mnist():
    """The real training set has 60000 images of 28x28."""
    images_path, labels_path = data.mnist_paths(os.environ["LATENTFILL_MNIST_DIR"], "train")
    batch = data.load_idx(images_path, labels_path)
    assert batch.data.shape == (60000, 1, 28, 28)
    assert batch.labels.max() == 9


if __name__ == "__main__":
    print("Testing IDX loading...")
    test_load_idx_scales_to_unit_interval()
    test_load_idx_gzip()
    test_load_idx_rejects_label_magic_as_images()
    test_load_idx_truncated()
    test_load_idx_label_count_mismatch()
    test_load_idx_empty_file_is_valid()
    test_image_batch_rejects_out_of_range()
    print("Testing masks...")
    test_mask_rate_extremes()
    test_mask_rate_statistics()
    test_mask_determinism_and_order_independence()
    test_mask_invalid_rate()
    test_mask_seed_range()
    test_zero_impute()
    test_zero_impute_shape_mismatch()
    test_make_split_persistent_masks()
    test_mask_file_round_trip_and_tamper()
    print("✅ All data tests passed")
