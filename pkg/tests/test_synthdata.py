import numpy as np
import pytest

from metaboot.errors import ValidationError
from metaboot.synthdata import (
    centroid_accuracy,
    generate,
    load_dataset,
    save_dataset,
    split,
)


def test_generation_deterministic():
    a = generate(4, 6, seed=9)
    b = generate(4, 6, seed=9)
    for ia, ib in zip(a.images, b.images):
        assert np.array_equal(ia.pixels, ib.pixels)
    assert np.array_equal(a.latent, b.latent)


def test_pixels_in_range_and_shape():
    ds = generate(10, 3, seed=1)  # >8 classes cycles families with new params
    assert len(ds) == 30
    for img in ds.images:
        assert img.pixels.shape == (16, 16)
        assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0


def test_two_class_centroid_separability():
    ds = generate(2, 20, seed=3)  # bar vs ring
    assert centroid_accuracy(ds) >= 0.95


def test_default_scale_centroid_separability():
    ds = generate(8, 20, seed=3)
    assert centroid_accuracy(ds) >= 0.95


def test_invalid_counts():
    with pytest.raises(ValidationError):
        generate(1, 10, seed=0)
    with pytest.raises(ValidationError):
        generate(4, 1, seed=0)


def test_split_class_disjoint_partition():
    ds = generate(8, 5, seed=4)
    train, evaluation = split(ds, 0.5, seed=5)
    assert len(train) + len(evaluation) == len(ds)
    assert not train.labeled() and np.all(train.latent == -1)
    assert evaluation.labeled() and len(evaluation.classes()) == 4
    assert len(train) == 20 and len(evaluation) == 20
    # Same seed, same split.
    train2, eval2 = split(ds, 0.5, seed=5)
    assert np.array_equal(eval2.latent, evaluation.latent)
    for a, b in zip(train.images, train2.images):
        assert np.array_equal(a.pixels, b.pixels)


def test_split_too_few_classes():
    ds = generate(3, 4, seed=6)
    with pytest.raises(ValidationError):
        split(ds, 0.9, seed=0)


def test_file_roundtrip_bitwise(tmp_path):
    ds = generate(4, 5, seed=7)
    path = tmp_path / "data.bmsd"
    save_dataset(path, ds)
    loaded = load_dataset(path)
    assert np.array_equal(loaded.latent, ds.latent)
    for a, b in zip(loaded.images, ds.images):
        assert np.array_equal(a.pixels, b.pixels)
    # Re-saving the loaded dataset reproduces the file byte for byte.
    path2 = tmp_path / "data2.bmsd"
    save_dataset(path2, loaded)
    assert path.read_bytes() == path2.read_bytes()


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.bmsd"
    path.write_bytes(b"NOPE" + b"\0" * 32)
    with pytest.raises(ValidationError):
        load_dataset(path)
