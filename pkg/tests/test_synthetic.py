import numpy as np
import pytest

from minicnn.synthetic import SHAPE_NAMES, SyntheticConfig, gen_synthetic


def test_deterministic_per_seed():
    a = gen_synthetic(SyntheticConfig(4, 5, size=12, seed=3))
    b = gen_synthetic(SyntheticConfig(4, 5, size=12, seed=3))
    c = gen_synthetic(SyntheticConfig(4, 5, size=12, seed=4))
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, c.images)


def test_balanced_and_in_range():
    ds = gen_synthetic(SyntheticConfig(10, 7, size=16, seed=0))
    assert ds.images.shape == (70, 1, 16, 16)
    assert np.bincount(ds.labels).tolist() == [7] * 10
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert ds.class_names == SHAPE_NAMES


def test_named_classes():
    ds = gen_synthetic(SyntheticConfig(("ring", "disk"), 3, size=10))
    assert ds.class_names == ("ring", "disk")
    assert ds.num_classes == 2


@pytest.mark.parametrize("classes", [1, 11, ("disk",), ("disk", "disk"), ("disk", "blob")])
def test_bad_classes(classes):
    with pytest.raises(ValueError):
        gen_synthetic(SyntheticConfig(classes, 2, size=8))


def test_classes_differ_on_average():
    ds = gen_synthetic(SyntheticConfig(10, 20, size=20, noise=0.0, seed=1))
    means = np.stack([ds.images[ds.labels == k].mean(axis=0).ravel() for k in range(10)])
    d = np.linalg.norm(means[:, None] - means[None], axis=2)
    assert d[~np.eye(10, dtype=bool)].min() > 0.5
