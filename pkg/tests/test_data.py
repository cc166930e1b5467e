import numpy as np
import pytest

from quantsponge.data import (
    ToyDatasetSpec,
    generate_toy_dataset,
    load_dataset,
    save_dataset,
    split_dataset,
)


def test_same_seed_identical_bytes():
    spec = ToyDatasetSpec(seed=42, count=30)
    a_img, a_lab = generate_toy_dataset(spec)
    b_img, b_lab = generate_toy_dataset(spec)
    assert a_img.tobytes() == b_img.tobytes()
    np.testing.assert_array_equal(a_lab, b_lab)


def test_different_seed_differs():
    a_img, _ = generate_toy_dataset(ToyDatasetSpec(seed=1, count=10))
    b_img, _ = generate_toy_dataset(ToyDatasetSpec(seed=2, count=10))
    assert not np.array_equal(a_img, b_img)


def test_class_histogram_uniform():
    _, labels = generate_toy_dataset(ToyDatasetSpec(seed=0, count=47, classes=10))
    counts = np.bincount(labels, minlength=10)
    assert counts.max() - counts.min() <= 1


def test_labels_below_class_count():
    _, labels = generate_toy_dataset(ToyDatasetSpec(seed=0, count=25, classes=7))
    assert labels.max() < 7


def test_pixel_range():
    images, _ = generate_toy_dataset(ToyDatasetSpec(seed=3, count=12))
    assert images.min() >= 0.0 and images.max() <= 1.0
    assert images.dtype == np.float32


def test_split_sizes_and_balance():
    images, labels = generate_toy_dataset(ToyDatasetSpec(seed=0, count=100))
    tr_x, tr_y, te_x, te_y = split_dataset(images, labels, 0.8)
    assert len(tr_x) == 80 and len(te_x) == 20
    counts = np.bincount(te_y, minlength=10)
    assert counts.max() - counts.min() <= 1


def test_save_load_round_trip(tmp_path):
    images, labels = generate_toy_dataset(ToyDatasetSpec(seed=5, count=6))
    path = str(tmp_path / "d.npz")
    save_dataset(path, images, labels)
    li, ll = load_dataset(path)
    np.testing.assert_array_equal(li, images)
    np.testing.assert_array_equal(ll, labels)


def test_invalid_spec():
    with pytest.raises(ValueError):
        ToyDatasetSpec(count=0)
    with pytest.raises(ValueError):
        ToyDatasetSpec(classes=1)
