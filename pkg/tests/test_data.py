import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixcal import data
from mixcal.errors import FormatError, ValidationError


def _idx_images(tmp_path, header_and_bytes: bytes, name="img.idx"):
    path = tmp_path / name
    path.write_bytes(header_and_bytes)
    return path


def _label_file(tmp_path, labels, name="lab.idx"):
    path = tmp_path / name
    path.write_bytes(bytes([0, 0, 8, 1]) + struct.pack(">I", len(labels)) + bytes(labels))
    return path


# --- blobs -------------------------------------------------------------------


def test_blobs_shape_and_determinism():
    a = data.make_blobs(3, 20, 5, 4.0, 1.0, seed=1)
    b = data.make_blobs(3, 20, 5, 4.0, 1.0, seed=1)
    assert a.features.shape == (60, 5) and a.n_classes == 3
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(np.bincount(a.labels), [20, 20, 20])


def test_zero_spread_blobs_sit_on_centers():
    ds = data.make_blobs(3, 10, 4, 2.0, 0.0, seed=2)
    for k in range(3):
        rows = ds.features[ds.labels == k]
        assert np.all(rows == rows[0])
    # nearest-center classification is perfect
    centers = np.stack([ds.features[ds.labels == k][0] for k in range(3)])
    pred = np.argmin(((ds.features[:, None] - centers[None]) ** 2).sum(axis=2), axis=1)
    np.testing.assert_array_equal(pred, ds.labels)


def test_latent_blobs_live_near_a_subspace():
    ds = data.make_blobs(4, 200, 10, 2.5, 1.0, seed=0, latent_dim=3, ambient_std=0.01)
    centered = ds.features - ds.features.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    assert sv[3] < 0.05 * sv[2]


def test_blob_errors():
    with pytest.raises(ValidationError):
        data.make_blobs(1, 10, 2, 1.0, 1.0, 0)
    with pytest.raises(ValidationError):
        data.make_blobs(2, 10, 2, 1.0, -1.0, 0)
    with pytest.raises(ValidationError):
        data.make_blobs(2, 10, 2, 1.0, 1.0, 0, latent_dim=3)


# --- IDX ---------------------------------------------------------------------


def test_idx_hand_fixture(tmp_path):
    images = _idx_images(tmp_path, bytes([0, 0, 8, 3]) + struct.pack(">3I", 1, 2, 2) + bytes([0, 255, 128, 64]))
    labels = _label_file(tmp_path, [7])
    ds = data.load_idx(images, labels, n_classes=10)
    np.testing.assert_array_equal(ds.features, [[0.0, 1.0, 128 / 255, 64 / 255]])
    np.testing.assert_array_equal(ds.labels, [7])


def test_idx_empty(tmp_path):
    images = _idx_images(tmp_path, bytes([0, 0, 8, 3]) + struct.pack(">3I", 0, 28, 28))
    ds = data.load_idx(images, _label_file(tmp_path, []))
    assert len(ds) == 0 and ds.dim == 784


def test_idx_round_trip(tmp_path):
    r = np.random.default_rng(0)
    pixels = r.integers(0, 256, size=(5, 3, 4), dtype=np.uint8)
    labels = r.integers(0, 10, size=5)
    data.write_idx(pixels, labels, tmp_path / "i", tmp_path / "l")
    ds = data.load_idx(tmp_path / "i", tmp_path / "l")
    np.testing.assert_array_equal(np.round(ds.features * 255).astype(np.uint8), pixels.reshape(5, 12))
    np.testing.assert_array_equal(ds.labels, labels)


@pytest.mark.parametrize("raw, where", [
    (bytes([0, 0, 8, 1]) + struct.pack(">3I", 1, 1, 1) + b"\x00", "byte 0"),
    (bytes([0, 0, 8, 3]) + struct.pack(">2I", 1, 2), "byte 12"),
    (bytes([0, 0, 8, 3]) + struct.pack(">3I", 2, 2, 2) + bytes(5), "byte 21"),
    (bytes([0, 0, 8, 3]) + struct.pack(">3I", 1, 1, 1) + bytes(3), "after byte 17"),
])
def test_idx_errors_name_the_offset(tmp_path, raw, where):
    images = _idx_images(tmp_path, raw)
    with pytest.raises(FormatError, match=where):
        data.load_idx(images, _label_file(tmp_path, [0]))


def test_idx_count_mismatch(tmp_path):
    images = _idx_images(tmp_path, bytes([0, 0, 8, 3]) + struct.pack(">3I", 1, 1, 1) + b"\x05")
    with pytest.raises(ValidationError):
        data.load_idx(images, _label_file(tmp_path, [0, 1]))


# --- CSV ---------------------------------------------------------------------


def test_csv_basic_and_remap(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("a,b,label\n1.5,2,7\n-3,4e-1,3\n")
    ds = data.load_csv(path)
    assert len(ds) == 2 and ds.dim == 2
    np.testing.assert_array_equal(ds.labels, [1, 0])
    assert ds.label_map == (3, 7)


@pytest.mark.parametrize("text, msg", [
    ("a,label\n1,0\n2\n", "row 3"),
    ("a,label\n1,0\nx,1\n", "row 3"),
    ("a,label\n1,0.5\n", "row 2"),
    ("a,b\n1,0\n", "label"),
    ("", "empty"),
])
def test_csv_errors(tmp_path, text, msg):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(FormatError, match=msg):
        data.load_csv(path)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_csv_round_trip(tmp_path_factory, seed):
    r = np.random.default_rng(seed)
    n, dim = int(r.integers(1, 20)), int(r.integers(1, 5))
    original = data.Dataset(r.normal(0, 10 ** r.uniform(-5, 5), size=(n, dim)),
                            r.integers(0, 3, n), 3, label_map=(2, 5, 9))
    path = tmp_path_factory.mktemp("csv") / "rt.csv"
    data.write_csv(original, path)
    back = data.load_csv(path)
    np.testing.assert_allclose(back.features, original.features, rtol=1e-12, atol=0)
    present = np.unique(original.labels)
    np.testing.assert_array_equal(np.asarray(back.label_map), np.asarray(original.label_map)[present])


# --- normalization and splits ------------------------------------------------


def test_normalization():
    r = np.random.default_rng(0)
    x = r.normal(3, 2, size=(50, 3))
    x[:, 1] = 4.2
    train = data.Dataset(x, np.zeros(50, dtype=np.int64), 1)
    mean, std = data.normalize_stats(train)
    normed = data.apply_normalization(train, mean, std)
    np.testing.assert_array_equal(normed.features[:, 1], 0.0)
    keep = [0, 2]
    assert np.all(np.abs(normed.features[:, keep].mean(axis=0)) < 1e-10)
    np.testing.assert_allclose(normed.features[:, keep].std(axis=0), 1.0, atol=1e-10)
    m, s = normed.normalization
    np.testing.assert_array_equal(normed.features, (x - m) / s)


def test_other_splits_use_train_statistics():
    ds = data.make_blobs(2, 100, 3, 1.0, 1.0, 0)
    train, val, _ = data.split(ds, (0.5, 0.5, 0.0), seed=0)
    mean, std = data.normalize_stats(train)
    v = data.apply_normalization(val, mean, std)
    np.testing.assert_array_equal(v.features, (val.features - mean) / std)
    assert np.any(np.abs(v.features.mean(axis=0)) > 1e-6)


def test_split_contracts():
    ds = data.make_blobs(3, 30, 2, 1.0, 1.0, 0)
    tr, va, te = data.split(ds, (1.0, 0.0, 0.0), seed=0)
    assert (len(tr), len(va), len(te)) == (90, 0, 0)
    parts = data.split(ds, (0.6, 0.2, 0.2), seed=4)
    again = data.split(ds, (0.6, 0.2, 0.2), seed=4)
    rows = np.concatenate([p.features for p in parts])
    assert rows.shape == ds.features.shape
    # disjoint and complete: every original row appears exactly once
    keys = sorted(map(tuple, rows))
    assert keys == sorted(map(tuple, ds.features))
    for a, b in zip(parts, again):
        np.testing.assert_array_equal(a.features, b.features)
    with pytest.raises(ValidationError):
        data.split(ds, (0.5, 0.6, 0.1))
