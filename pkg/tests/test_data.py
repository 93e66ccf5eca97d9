import numpy as np
import pytest
from fractions import Fraction
from PIL import Image

from segbank.data import (ClassFrequencyTable, DatasetError, class_weights,
                          downsample_labels, load_dataset, load_split,
                          make_split, make_toy_dataset, render_shapes,
                          save_split, update_frequencies)


@pytest.fixture(scope="module")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    make_toy_dataset(root, class_count=3, n=12, seed=0, size=64)
    return root


def test_load_dataset_counts_and_shapes(toy_root):
    ds = load_dataset(toy_root, toy_root / "manifest.txt", class_count=3)
    assert len(ds) == 12
    img = ds.load_image(0)
    lab = ds.load_label(0)
    assert img.shape == (64, 64, 3) and img.dtype == np.float32
    assert img.min() >= 0.0 and img.max() <= 1.0
    assert lab.shape == (64, 64) and lab.dtype == np.int64
    assert set(np.unique(lab)) <= {0, 1, 2}


def test_load_dataset_missing_manifest(tmp_path):
    with pytest.raises(DatasetError, match="manifest"):
        load_dataset(tmp_path, tmp_path / "nope.txt", class_count=3)


def test_load_dataset_missing_image(tmp_path):
    (tmp_path / "manifest.txt").write_text("images/x.png\n")
    with pytest.raises(DatasetError, match="missing image"):
        load_dataset(tmp_path, tmp_path / "manifest.txt", class_count=3)


def test_validate_rejects_out_of_range_labels(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "labels").mkdir()
    Image.fromarray(np.zeros((8, 8, 3), dtype=np.uint8)).save(tmp_path / "images/a.png")
    Image.fromarray(np.full((8, 8), 7, dtype=np.uint8)).save(tmp_path / "labels/a.png")
    (tmp_path / "manifest.txt").write_text("images/a.png\tlabels/a.png\n")
    with pytest.raises(DatasetError, match="outside"):
        load_dataset(tmp_path, tmp_path / "manifest.txt", class_count=3)


def test_validate_rejects_shape_mismatch(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "labels").mkdir()
    Image.fromarray(np.zeros((8, 8, 3), dtype=np.uint8)).save(tmp_path / "images/a.png")
    Image.fromarray(np.zeros((4, 8), dtype=np.uint8)).save(tmp_path / "labels/a.png")
    (tmp_path / "manifest.txt").write_text("images/a.png\tlabels/a.png\n")
    with pytest.raises(DatasetError, match="shape"):
        load_dataset(tmp_path, tmp_path / "manifest.txt", class_count=3)


def test_unlabeled_manifest_lines(tmp_path):
    (tmp_path / "images").mkdir()
    Image.fromarray(np.zeros((8, 8, 3), dtype=np.uint8)).save(tmp_path / "images/a.png")
    (tmp_path / "manifest.txt").write_text("images/a.png\n")
    ds = load_dataset(tmp_path, tmp_path / "manifest.txt", class_count=3)
    assert ds.load_label(0) is None


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def test_make_split_ratio_count(toy_root):
    ds = load_dataset(toy_root, toy_root / "manifest.txt", class_count=3)
    split = make_split(ds, "1/4", seed=0)
    # round(12/4) = 3 labeled
    assert len(split.labeled_ids) == 3
    assert len(split.unlabeled_ids) == 9
    assert not set(split.labeled_ids) & set(split.unlabeled_ids)


def test_make_split_minimum_one_labeled(toy_root):
    ds = load_dataset(toy_root, toy_root / "manifest.txt", class_count=3)
    split = make_split(ds, Fraction(1, 1000), seed=0)
    assert len(split.labeled_ids) == 1


def test_make_split_deterministic(toy_root):
    ds = load_dataset(toy_root, toy_root / "manifest.txt", class_count=3)
    a = make_split(ds, "1/4", seed=7)
    b = make_split(ds, "1/4", seed=7)
    c = make_split(ds, "1/4", seed=8)
    assert a.labeled_ids == b.labeled_ids
    assert a.labeled_ids != c.labeled_ids


def test_split_roundtrip(toy_root, tmp_path):
    ds = load_dataset(toy_root, toy_root / "manifest.txt", class_count=3)
    split = make_split(ds, "1/4", seed=3)
    save_split(split, tmp_path / "split.txt")
    loaded = load_split(tmp_path / "split.txt")
    assert loaded.labeled_ids == split.labeled_ids
    assert loaded.unlabeled_ids == split.unlabeled_ids
    assert loaded.ratio == Fraction(1, 4) and loaded.seed == 3


def test_split_rejects_bad_ratio(toy_root):
    ds = load_dataset(toy_root, toy_root / "manifest.txt", class_count=3)
    with pytest.raises(ValueError):
        make_split(ds, "3/2", seed=0)


# ---------------------------------------------------------------------------
# class frequencies and weights
# ---------------------------------------------------------------------------

def test_update_frequencies_skips_ignore():
    table = ClassFrequencyTable.empty(3)
    update_frequencies(table, np.array([[0, 1], [255, 2]]))
    assert table.counts.tolist() == [1, 1, 1]


def test_class_weights_median_rule():
    # frequencies (0.5, 0.25, 0.25): median 0.25 -> sqrt(0.25/0.5) = sqrt(0.5)
    table = ClassFrequencyTable.empty(3)
    table.counts = np.array([50, 25, 25], dtype=np.int64)
    w = class_weights(table)
    np.testing.assert_allclose(w, [np.sqrt(0.5), 1.0, 1.0], atol=1e-12)


def test_class_weights_zero_count_class_is_neutral():
    table = ClassFrequencyTable.empty(3)
    table.counts = np.array([30, 0, 10], dtype=np.int64)
    w = class_weights(table)
    assert w[1] == 1.0
    # median over nonzero normalized freqs {0.75, 0.25} = 0.5
    np.testing.assert_allclose(w[0], np.sqrt(0.5 / 0.75), atol=1e-12)
    np.testing.assert_allclose(w[2], np.sqrt(0.5 / 0.25), atol=1e-12)


def test_class_weights_disabled():
    table = ClassFrequencyTable.empty(4)
    table.counts = np.array([5, 1, 1, 1], dtype=np.int64)
    assert class_weights(table, balanced=False).tolist() == [1.0] * 4


def test_class_weights_all_zero_raises():
    with pytest.raises(ValueError):
        class_weights(ClassFrequencyTable.empty(3))


def test_downsample_labels_topleft_anchor():
    lab = np.array([[0, 1], [2, 3]])
    assert downsample_labels(lab, 2).tolist() == [[0]]
    lab8 = np.arange(64).reshape(8, 8)
    out = downsample_labels(lab8, 4)
    assert out.tolist() == [[0, 4], [32, 36]]


def test_downsample_labels_non_divisible():
    lab = np.arange(25).reshape(5, 5)
    assert downsample_labels(lab, 2).shape == (3, 3)


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

def test_render_shapes_deterministic():
    a_img, a_mask = render_shapes(np.random.default_rng(5), size=64, class_count=3)
    b_img, b_mask = render_shapes(np.random.default_rng(5), size=64, class_count=3)
    assert np.array_equal(a_img, b_img) and np.array_equal(a_mask, b_mask)


def test_render_shapes_mask_values():
    rng = np.random.default_rng(0)
    seen = set()
    for _ in range(20):
        _, mask = render_shapes(rng, size=64, class_count=4)
        seen |= set(np.unique(mask).tolist())
    assert seen <= {0, 1, 2, 3}
    assert {1, 2, 3} <= seen  # every shape class appears somewhere in 20 draws


def test_make_toy_dataset_roundtrip(tmp_path):
    make_toy_dataset(tmp_path, class_count=3, n=4, seed=1, size=32)
    ds = load_dataset(tmp_path, tmp_path / "manifest.txt", class_count=3)
    assert len(ds) == 4
    assert ds.load_image(2).shape == (32, 32, 3)
