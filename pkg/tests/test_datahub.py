import gzip

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ddm import datahub, nets
from ddm.errors import (ClusterSizeError, ConfigError, IdxCountMismatchError, IdxMagicError,
                        IdxTruncatedError)


def _ds(n=30, L=3, d=4, seed=0):
    r = np.random.default_rng(seed)
    return datahub.LabeledDataset(r.random((n, d)), np.arange(n) % L, L)


def test_dataset_invariants():
    with pytest.raises(ConfigError):
        datahub.LabeledDataset(np.zeros((0, 2)), np.zeros(0, dtype=int), 2)
    with pytest.raises(ConfigError):
        datahub.LabeledDataset(np.zeros((2, 2)), np.array([0, 2]), 2)


def test_idx_roundtrip_and_gzip(tmp_path):
    r = np.random.default_rng(0)
    ds = datahub.LabeledDataset(r.integers(0, 256, (5, 3, 4)) / 255.0, np.array([0, 1, 2, 1, 0]), 3)
    datahub.write_idx(tmp_path / "x.idx", tmp_path / "y.idx", ds)
    back = datahub.load_idx(tmp_path / "x.idx", tmp_path / "y.idx")
    assert np.allclose(back.images, ds.images) and np.array_equal(back.labels, ds.labels)
    for name in ("x.idx", "y.idx"):
        (tmp_path / (name + ".gz")).write_bytes(gzip.compress((tmp_path / name).read_bytes()))
    gz = datahub.load_idx(tmp_path / "x.idx.gz", tmp_path / "y.idx.gz")
    assert np.array_equal(gz.images, back.images)


def test_idx_errors(tmp_path):
    ds = _ds(4, 2, 4)
    ds = datahub.LabeledDataset(np.round(ds.images * 255) / 255, ds.labels, 2)
    datahub.write_idx(tmp_path / "x.idx", tmp_path / "y.idx", ds)
    raw = (tmp_path / "x.idx").read_bytes()
    (tmp_path / "bad.idx").write_bytes(b"\x00\x00\x09\x01" + raw[4:])
    with pytest.raises(IdxMagicError):
        datahub.load_idx(tmp_path / "bad.idx", tmp_path / "y.idx")
    (tmp_path / "short.idx").write_bytes(raw[:-3])
    with pytest.raises(IdxTruncatedError):
        datahub.load_idx(tmp_path / "short.idx", tmp_path / "y.idx")
    datahub.write_idx(tmp_path / "x3.idx", tmp_path / "y3.idx", ds.subset([0, 1, 2]))
    with pytest.raises(IdxCountMismatchError):
        datahub.load_idx(tmp_path / "x.idx", tmp_path / "y3.idx")


def test_csv_roundtrip(tmp_path):
    ds = _ds()
    datahub.save_csv(tmp_path / "d.csv", ds)
    back = datahub.load_csv(tmp_path / "d.csv")
    assert np.allclose(back.images, ds.images) and np.array_equal(back.labels, ds.labels)
    assert (tmp_path / "d.csv").read_text().splitlines()[0].startswith("label,pixel0,pixel1")


def test_make_blobs_range_and_groups():
    ds = datahub.make_blobs(3, 20, 5, 4.0, 0, subclusters=2, sub_separation=3.0)
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    assert len(ds) == 60 and ds.class_count == 3
    assert set(np.unique(ds.groups)) == set(range(6))
    again = datahub.make_blobs(3, 20, 5, 4.0, 0, subclusters=2, sub_separation=3.0)
    assert np.array_equal(ds.images, again.images)


def test_kmeans_objective_never_increases():
    X = np.random.default_rng(1).random((80, 3))
    _, _, hist = datahub.kmeans(X, 5, np.random.default_rng(0))
    assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))


def test_kmeans_on_identical_points_keeps_clusters_nonempty():
    labels, _, _ = datahub.kmeans(np.zeros((6, 2)), 3, np.random.default_rng(0))
    assert set(labels) == {0, 1, 2}


@given(st.integers(2, 4), st.integers(1, 4), st.integers(0, 1000))
def test_cluster_partition_property(L, C, seed):
    ds = _ds(n=L * 6, L=L, seed=seed)
    h = datahub.cluster(ds, datahub.embed(ds), C, seed)
    assert h.K == L * C
    h.check(len(ds))
    for k, idx in enumerate(h.cluster_partition):
        assert np.all(ds.labels[idx] == h.cluster_class(k))
    first = [h.cluster_partition[k].min() for k in h.clusters_of_class(0)]
    assert first == sorted(first)


def test_cluster_c1_is_class_partition():
    ds = _ds()
    h = datahub.cluster(ds, datahub.embed(ds), 1, 0)
    assert all(np.array_equal(a, b) for a, b in zip(h.cluster_partition, h.class_partition))


def test_cluster_size_error_names_class():
    ds = datahub.LabeledDataset(np.random.default_rng(0).random((5, 2)), [0, 0, 0, 0, 1], 2)
    with pytest.raises(ClusterSizeError) as e:
        datahub.cluster(ds, datahub.embed(ds), 2, 0)
    assert list(e.value.offenders) == [1]


def test_assignment_csv_roundtrip(tmp_path):
    ds = _ds()
    h = datahub.cluster(ds, datahub.embed(ds), 2, 0)
    datahub.export_assignment_csv(tmp_path / "a.csv", h, ["seed: 0"])
    back = datahub.load_assignment_csv(tmp_path / "a.csv", 2)
    assert all(np.array_equal(a, b) for a, b in zip(h.cluster_partition, back.cluster_partition))
    assert (tmp_path / "a.csv").read_text().splitlines()[1] == "index,class,cluster"


def test_model_feature_embedding():
    ds = _ds(d=4)
    spec = nets.ModelSpec((4,), 3, widths=(6,))
    f = datahub.embed(ds, "model_features", spec, nets.init(spec))
    assert f.shape == (len(ds), 6)
    with pytest.raises(ConfigError):
        datahub.embed(ds, "model_features")


def test_mnist_subset_is_balanced():
    tr, te = datahub.load_mnist_subset(200, 100)
    assert tr.images.shape == (200, 784) and te.images.shape == (100, 784)
    assert np.array_equal(np.bincount(tr.labels), np.full(10, 20))
    assert tr.images.min() >= 0 and tr.images.max() <= 1
    assert not set(map(bytes, tr.images)) & set(map(bytes, te.images))
