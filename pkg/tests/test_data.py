import gzip
import struct

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from fedpara.data import (
    Dataset,
    IdxFormatError,
    PartitionError,
    load_idx,
    make_blob_task,
    split_dirichlet,
    split_iid,
    split_pathological,
    subsample_train,
    synth_blobs,
    with_local_test,
    write_idx,
)


def assert_partition_law(part, n):
    idx = np.concatenate([part.train[c] for c in sorted(part.train)] +
                         [part.test[c] for c in sorted(part.test)])
    assert len(np.unique(idx)) == idx.size  # disjoint
    assert idx.size == n and set(idx.tolist()) == set(range(n))  # covers everything


def blobs(C=10, per=20, seed=0):
    return synth_blobs(C, per, 5, 1.0, seed)


# ----------------------------------------------------------------------------
# synthesis


def test_zero_spread_zero_variance():
    d = synth_blobs(3, 10, 4, 0.0, 0)
    for c in range(3):
        rows = d.features[d.labels == c]
        assert np.all(rows == rows[0])


def test_blobs_deterministic():
    a, b = synth_blobs(4, 10, 3, 1.0, 7), synth_blobs(4, 10, 3, 1.0, 7)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.features, synth_blobs(4, 10, 3, 1.0, 8).features)


def test_small_spread_linearly_separable():
    train, test = make_blob_task(5, 100, 100, 10, 0.05, 3)
    # least-squares linear classifier on one-hot targets
    X = np.hstack([train.features, np.ones((len(train), 1))])
    W, *_ = np.linalg.lstsq(X, np.eye(5)[train.labels], rcond=None)
    Xt = np.hstack([test.features, np.ones((len(test), 1))])
    assert np.mean((Xt @ W).argmax(1) == test.labels) > 0.99


def test_blob_task_shares_centers():
    train, test = make_blob_task(3, 50, 50, 4, 0.0, 1)
    for c in range(3):
        assert np.array_equal(train.features[train.labels == c][0], test.features[test.labels == c][0])


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), [0, 1], 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), [0, 2], 2)
    with pytest.raises(ValueError):
        synth_blobs(1, 5, 2, 1.0, 0)


# ----------------------------------------------------------------------------
# IDX


def write_pair(tmp_path, images, labels):
    write_idx(tmp_path / "img", images)
    write_idx(tmp_path / "lbl", labels)
    return tmp_path / "img", tmp_path / "lbl"


def test_idx_fixture_exact(tmp_path):
    images = np.array([[[0, 255], [51, 102]], [[1, 2], [3, 4]]], dtype=np.uint8)
    img, lbl = write_pair(tmp_path, images, np.array([3, 7], dtype=np.uint8))
    raw = img.read_bytes()
    assert raw[:4] == b"\x00\x00\x08\x03"
    assert struct.unpack(">III", raw[4:16]) == (2, 2, 2)
    d = load_idx(img, lbl)
    assert d.features.shape == (2, 4)
    np.testing.assert_array_equal(d.features[0], [0.0, 1.0, 0.2, 0.4])
    np.testing.assert_array_equal(d.features[1], np.array([1, 2, 3, 4]) / 255.0)
    assert d.labels.tolist() == [3, 7]


def test_idx_gzip(tmp_path):
    images = np.arange(8, dtype=np.uint8).reshape(2, 2, 2)
    img, lbl = write_pair(tmp_path, images, np.array([0, 1], dtype=np.uint8))
    gz = tmp_path / "img.gz"
    gz.write_bytes(gzip.compress(img.read_bytes()))
    assert np.array_equal(load_idx(gz, lbl).features, load_idx(img, lbl).features)


def test_idx_bad_magic(tmp_path):
    images = np.zeros((2, 2, 2), dtype=np.uint8)
    img, lbl = write_pair(tmp_path, images, np.array([0, 1], dtype=np.uint8))
    with pytest.raises(IdxFormatError, match="byte offset 0"):
        load_idx(lbl, img)


def test_idx_truncated(tmp_path):
    images = np.zeros((2, 2, 2), dtype=np.uint8)
    img, lbl = write_pair(tmp_path, images, np.array([0, 1], dtype=np.uint8))
    img.write_bytes(img.read_bytes()[:-3])
    with pytest.raises(IdxFormatError, match="byte offset 21"):
        load_idx(img, lbl)
    img.write_bytes(b"\x00\x00\x08\x03\x00\x00")
    with pytest.raises(IdxFormatError, match="byte offset 6"):
        load_idx(img, lbl)


def test_idx_count_mismatch(tmp_path):
    img, lbl = write_pair(tmp_path, np.zeros((2, 2, 2), dtype=np.uint8), np.array([0, 1, 1], dtype=np.uint8))
    with pytest.raises(IdxFormatError):
        load_idx(img, lbl)


# ----------------------------------------------------------------------------
# partitioning


def test_iid_edge_cases():
    d = blobs(C=2, per=5)
    one = split_iid(d, 1, 0)
    assert one.train[0].tolist() == list(range(10))
    each = split_iid(d, 10, 0)
    assert sorted(len(v) for v in each.train.values()) == [1] * 10
    with pytest.raises(PartitionError):
        split_iid(d, 11, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.integers(0, 2**31))
def test_iid_balanced_partition(K, seed):
    d = blobs(C=3, per=20)
    part = split_iid(d, K, seed)
    sizes = part.sizes()
    assert max(sizes) - min(sizes) <= 1
    assert_partition_law(part, len(d))


def test_dirichlet_large_alpha_near_uniform():
    d = synth_blobs(5, 2000, 2, 1.0, 0)
    part = split_dirichlet(d, 4, 1e6, 0)
    for idx in part.train.values():
        props = np.bincount(d.labels[idx], minlength=5) / idx.size
        assert np.all(np.abs(props - 0.2) < 0.05 * 0.2 + 1e-9)


def test_dirichlet_replayable():
    d = blobs()
    a, b = split_dirichlet(d, 10, 0.5, 3), split_dirichlet(d, 10, 0.5, 3)
    assert all(np.array_equal(a.train[c], b.train[c]) for c in range(10))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 20), st.floats(0.05, 10), st.integers(0, 2**31))
def test_dirichlet_partition_law(K, alpha, seed):
    d = blobs()
    part = split_dirichlet(d, K, alpha, seed)
    assert all(v.size > 0 for v in part.train.values())
    assert_partition_law(part, len(d))


def test_dirichlet_errors():
    with pytest.raises(PartitionError):
        split_dirichlet(blobs(), 5, 0.0, 0)
    with pytest.raises(PartitionError):
        split_dirichlet(blobs(C=2, per=2), 5, 1.0, 0)


def test_pathological_half_clients_two_labels_each():
    d = blobs(C=10, per=20)
    part = split_pathological(d, 5, 2, 0)
    for idx in part.train.values():
        assert len(np.unique(d.labels[idx])) == 2
    assert_partition_law(part, len(d))


@settings(max_examples=30, deadline=None)
@given(st.integers(5, 40), st.integers(1, 4), st.integers(0, 2**31))
def test_pathological_label_bound(K, cpc, seed):
    assume(K * cpc >= 10)
    d = blobs(C=10, per=20)
    part = split_pathological(d, K, cpc, seed)
    for idx in part.train.values():
        assert len(np.unique(d.labels[idx])) <= cpc
    assert_partition_law(part, len(d))


def test_pathological_all_classes_per_client():
    d = blobs(C=4, per=10)
    part = split_pathological(d, 3, 4, 0)
    assert_partition_law(part, len(d))


def test_pathological_deterministic_and_infeasible():
    d = blobs()
    a, b = split_pathological(d, 10, 2, 5), split_pathological(d, 10, 2, 5)
    assert all(np.array_equal(a.train[c], b.train[c]) for c in range(10))
    with pytest.raises(PartitionError):
        split_pathological(d, 4, 2, 0)  # 8 shards cannot cover 10 labels


def test_local_test_split_80_20():
    d = blobs()
    part = with_local_test(split_iid(d, 4, 0), 0.2, 1)
    for c in range(4):
        assert len(part.test[c]) == 10 and len(part.train[c]) == 40
    assert_partition_law(part, len(d))


def test_subsample_train_only():
    d = blobs()
    base = with_local_test(split_iid(d, 4, 0), 0.2, 1)
    sub = subsample_train(base, 0.2, 2)
    for c in range(4):
        assert len(sub.train[c]) == 8
        assert set(sub.train[c]) <= set(base.train[c])
        assert np.array_equal(sub.test[c], base.test[c])
