import struct

import numpy as np
import pytest

from splitlab.data import (
    CSVFormatError,
    Dataset,
    EmptyFileError,
    IDXCountMismatchError,
    IDXMagicError,
    MissingColumnError,
    gen_synthetic,
    imbalanced_binary,
    load_csv,
    load_idx,
    train_test_split,
    write_csv,
    write_idx,
)
from splitlab.numerics import RngStream


# synthetic generator

def test_positive_count_band():
    data = imbalanced_binary(n=10_000, seed=0)
    assert abs(int(data.labels.sum()) - 500) <= 70


def test_means_are_separation_apart():
    data = gen_synthetic(20_000, 8, 3, [1 / 3] * 3, 4.0, RngStream(1))
    means = np.stack([data.features[data.labels == c].mean(axis=0) for c in range(3)])
    for a in range(3):
        for b in range(a + 1, 3):
            assert abs(np.linalg.norm(means[a] - means[b]) - 4.0) < 0.15


def test_zero_separation_is_chance_for_linear_model():
    rng = RngStream(2)
    data = gen_synthetic(4000, 10, 2, [0.7, 0.3], 0.0, rng)
    train, test = train_test_split(data, 0.5, rng.child("split"))
    # least-squares linear classifier as the "linear classifier"
    A = np.column_stack([train.features, np.ones(len(train))])
    w, *_ = np.linalg.lstsq(A, train.labels.astype(float), rcond=None)
    pred = (np.column_stack([test.features, np.ones(len(test))]) @ w > 0.5).astype(int)
    assert abs(np.mean(pred == test.labels) - 0.7) <= 0.03


def test_stream_prefix_property():
    small = gen_synthetic(100, 6, 2, [0.9, 0.1], 3.0, RngStream(5))
    big = gen_synthetic(200, 6, 2, [0.9, 0.1], 3.0, RngStream(5))
    np.testing.assert_array_equal(big.features[:100], small.features)
    np.testing.assert_array_equal(big.labels[:100], small.labels)


@pytest.mark.parametrize("weights", [[0.5, 0.6], [1.0], [-0.1, 1.1]])
def test_bad_weights(weights):
    with pytest.raises(ValueError):
        gen_synthetic(10, 4, 2, weights, 1.0, RngStream(0))


def test_negative_separation():
    with pytest.raises(ValueError):
        gen_synthetic(10, 4, 2, [0.5, 0.5], -1.0, RngStream(0))


def test_dataset_is_read_only():
    data = imbalanced_binary(n=100)
    with pytest.raises(ValueError):
        data.features[0, 0] = 1.0


def test_dataset_rejects_bad_labels():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), [0, 2], 2)
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan, 0.0]]), [0], 2)


# split

def test_split_sizes_and_determinism():
    data = gen_synthetic(100, 4, 2, [0.5, 0.5], 2.0, RngStream(0))
    tr, te = train_test_split(data, 0.2, RngStream(9))
    assert (len(tr), len(te)) == (80, 20)
    tr2, te2 = train_test_split(data, 0.2, RngStream(9))
    np.testing.assert_array_equal(tr.ids, tr2.ids)
    np.testing.assert_array_equal(te.ids, te2.ids)
    assert set(tr.ids.tolist()).isdisjoint(te.ids.tolist())


def test_split_exact_sizes_balanced():
    data = Dataset(np.zeros((100, 1)), [0] * 50 + [1] * 50, 2)
    tr, te = train_test_split(data, 0.2, RngStream(0))
    assert (len(tr), len(te)) == (80, 20)


def test_split_stratified():
    data = imbalanced_binary(n=5000, seed=3)
    tr, te = train_test_split(data, 0.2, RngStream(1))
    for c in range(2):
        total = int((data.labels == c).sum())
        assert abs(int((te.labels == c).sum()) - 0.2 * total) <= 1


def test_split_needs_two_per_class():
    data = Dataset(np.zeros((5, 1)), [0, 0, 0, 0, 1], 2)
    with pytest.raises(ValueError):
        train_test_split(data, 0.2, RngStream(0))


def test_split_fraction_range():
    data = imbalanced_binary(n=100)
    for f in (0.0, 1.0):
        with pytest.raises(ValueError):
            train_test_split(data, f)


# CSV

def test_csv_fixture(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("a,b,label\n1,2.5,7\n-3,0,3\n4e1,1,7\n")
    data = load_csv(path, "label")
    np.testing.assert_array_equal(data.features, [[1, 2.5], [-3, 0], [40, 1]])
    np.testing.assert_array_equal(data.labels, [1, 0, 1])
    assert data.label_values == (3, 7)
    assert data.k == 2


def test_csv_non_numeric_location(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("a,b,c,label\n1,2,3,0\n4,5,x,1\n")
    with pytest.raises(CSVFormatError) as info:
        load_csv(path, "label")
    assert (info.value.row, info.value.col) == (2, 3)
    assert "(row 2, col 3)" in str(info.value)


def test_csv_missing_column(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(MissingColumnError):
        load_csv(path, "label")


def test_csv_empty(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("")
    with pytest.raises(EmptyFileError):
        load_csv(path, "label")
    path.write_text("a,label\n")
    with pytest.raises(EmptyFileError):
        load_csv(path, "label")


def test_csv_ragged_row(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("a,label\n1,0\n2\n")
    with pytest.raises(CSVFormatError):
        load_csv(path, "label")


def test_csv_round_trip(tmp_path):
    data = gen_synthetic(50, 5, 3, [0.2, 0.3, 0.5], 2.0, RngStream(4))
    path = tmp_path / "s.csv"
    write_csv(data, path)
    back = load_csv(path, "label")
    np.testing.assert_allclose(back.features, data.features, rtol=1e-15)
    np.testing.assert_array_equal(back.labels, data.labels)


# IDX

def test_idx_fixture(tmp_path):
    imgs = np.array([[[0, 255], [51, 102]], [[0, 0], [0, 0]]], dtype=np.uint8)
    write_idx(imgs, [3, 1], tmp_path / "i", tmp_path / "l")
    raw = (tmp_path / "i").read_bytes()
    assert struct.unpack(">IIII", raw[:16]) == (0x803, 2, 2, 2)
    data = load_idx(tmp_path / "i", tmp_path / "l")
    np.testing.assert_allclose(data.features, [[0, 1, 0.2, 0.4], [0, 0, 0, 0]])
    np.testing.assert_array_equal(data.labels, [3, 1])
    assert not np.any(data.features[1])


def test_idx_count_mismatch(tmp_path):
    imgs = np.zeros((2, 2, 2), dtype=np.uint8)
    write_idx(imgs, [1, 2], tmp_path / "i", tmp_path / "l")
    (tmp_path / "l").write_bytes(struct.pack(">II", 0x801, 3) + bytes([1, 2, 0]))
    with pytest.raises(IDXCountMismatchError):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_idx_bad_magic(tmp_path):
    write_idx(np.zeros((1, 2, 2), dtype=np.uint8), [0], tmp_path / "i", tmp_path / "l")
    raw = bytearray((tmp_path / "i").read_bytes())
    raw[3] = 0x01
    (tmp_path / "i").write_bytes(bytes(raw))
    with pytest.raises(IDXMagicError):
        load_idx(tmp_path / "i", tmp_path / "l")
