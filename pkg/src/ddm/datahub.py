"""Datasets, feature embedding and the two-level (class / cluster) partition."""

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nets
from ._seeding import array_hash, substream
from .errors import (ClusterSizeError, ConfigError, IdxCountMismatchError, IdxMagicError,
                     IdxTruncatedError, ShapeError)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(eq=False)
class LabeledDataset:
    """``images`` (N, *pixel dims) with values in [0, 1]; integer ``labels`` (N,)."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    groups: np.ndarray = None   # generating sub-population id, when known
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.labels)
        if n == 0:
            raise ConfigError("dataset is empty")
        if self.images.shape[0] != n:
            raise ShapeError(n, self.images.shape[0], "image count")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ConfigError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.class_count,
                              None if self.groups is None else self.groups[idx], self.name)

    def fingerprint(self):
        return array_hash(self.images, self.labels)


@dataclass(eq=False)
class ClusterHierarchy:
    """Class-level and cluster-level partitions of ``range(N)``.

    Cluster ``kappa = class * C + c`` holds the ``c``-th K-means cluster of
    that class. Index arrays are sorted ascending.
    """

    class_partition: list
    cluster_partition: list
    C: int
    meta: dict = field(default_factory=dict)

    @property
    def L(self):
        return len(self.class_partition)

    @property
    def K(self):
        return len(self.cluster_partition)

    def cluster_class(self, kappa):
        return kappa // self.C

    def cluster_classes(self):
        return np.repeat(np.arange(self.L), self.C)

    def clusters_of_class(self, cls):
        return list(range(cls * self.C, (cls + 1) * self.C))

    def partition(self, level):
        if level == "cluster":
            return self.cluster_partition, self.cluster_classes()
        if level == "class":
            return self.class_partition, np.arange(self.L)
        raise ConfigError(f"unknown hierarchy level {level!r}")

    def assignment(self, n=None):
        """Cluster id per sample."""
        n = n if n is not None else sum(len(p) for p in self.cluster_partition)
        out = np.full(n, -1, dtype=np.int64)
        for k, idx in enumerate(self.cluster_partition):
            out[idx] = k
        return out

    def indices_without(self, excluded, level="cluster"):
        parts, _ = self.partition(level)
        keep = [parts[k] for k in range(len(parts)) if k not in set(excluded)]
        if not keep:
            return np.zeros(0, dtype=np.int64)
        return np.sort(np.concatenate(keep))

    def check(self, n):
        """Assert the partition invariants for a dataset of size ``n``."""
        allc = np.concatenate(self.cluster_partition)
        if len(allc) != n or not np.array_equal(np.sort(allc), np.arange(n)):
            raise ConfigError("clusters do not partition the dataset")
        for l, cls_idx in enumerate(self.class_partition):
            members = np.concatenate([self.cluster_partition[k] for k in self.clusters_of_class(l)])
            if not np.array_equal(np.sort(members), np.sort(cls_idx)):
                raise ConfigError(f"clusters of class {l} do not tile the class")
        if any(len(p) == 0 for p in self.cluster_partition):
            raise ConfigError("empty cluster")


# -- IDX / CSV ---------------------------------------------------------------

def _read_bytes(path):
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw, magic, path):
    if len(raw) < 8:
        raise IdxTruncatedError(f"{path}: file too short for an IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxMagicError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(raw) < hdr:
        raise IdxTruncatedError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:hdr])
    count = int(np.prod(dims))
    payload = raw[hdr:]
    if len(payload) < count:
        raise IdxTruncatedError(f"{path}: payload has {len(payload)} bytes, header promises {count}")
    return np.frombuffer(payload[:count], dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, class_count=None):
    """Read an IDX image/label pair (optionally gzipped). Pixels are scaled to [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images_path} has {images.shape[0]} images but {labels_path} has {labels.shape[0]} labels")
    labels = labels.astype(np.int64)
    L = class_count or int(labels.max()) + 1
    return LabeledDataset(images.astype(np.float64) / 255.0, labels, L, name=Path(images_path).name)


def write_idx(images_path, labels_path, dataset):
    """Write a dataset as IDX (pixels quantised to bytes)."""
    imgs = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8)
    if imgs.ndim == 2:
        imgs = imgs.reshape(imgs.shape[0], 1, imgs.shape[1])
    imgs = imgs.reshape(imgs.shape[0], imgs.shape[-2], imgs.shape[-1])
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *imgs.shape))
        f.write(imgs.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(dataset.labels)))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def save_csv(path, dataset):
    """``label,pixel0,...`` with one row per sample; pixels written exactly."""
    flat = dataset.images.reshape(len(dataset), -1)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label"] + [f"pixel{i}" for i in range(flat.shape[1])])
        for y, row in zip(dataset.labels, flat):
            w.writerow([int(y)] + [repr(float(v)) for v in row])


def load_csv(path, image_shape=None, class_count=None):
    """Inverse of :func:`save_csv`. Values above 1 are taken as bytes and scaled."""
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    labels = arr[:, 0].astype(np.int64)
    pix = arr[:, 1:]
    if pix.size and pix.max() > 1.0:
        pix = pix / 255.0
    if image_shape is not None:
        pix = pix.reshape((len(labels),) + tuple(image_shape))
    L = class_count or int(labels.max()) + 1
    return LabeledDataset(pix, labels, L, name=Path(path).name)


def load_mnist_subset(n_train=2000, n_test=1000, seed=0, flat=True):
    """Class-balanced split of the 5000-digit MNIST sample shipped with mlxtend.

    Returns ``(train, test)``; images are (N, 784) when ``flat`` else (N, 1, 28, 28).
    """
    try:
        from mlxtend.data import mnist_data
    except ImportError as e:  # pragma: no cover
        raise ConfigError("the MNIST subset needs the optional 'mlxtend' package") from e
    X, y = mnist_data()
    X = X / 255.0
    rng = substream(seed, "mnist_split")
    per_tr, per_te = n_train // 10, n_test // 10
    tr, te = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(y == c))
        if len(idx) < per_tr + per_te:
            raise ConfigError(f"only {len(idx)} digits of class {c} available")
        tr.append(idx[:per_tr])
        te.append(idx[per_tr:per_tr + per_te])
    tr, te = np.sort(np.concatenate(tr)), np.sort(np.concatenate(te))
    shape = (-1, 784) if flat else (-1, 1, 28, 28)
    train = LabeledDataset(X[tr].reshape(shape), y[tr], 10, name="mnist-subset-train")
    test = LabeledDataset(X[te].reshape(shape), y[te], 10, name="mnist-subset-test")
    return train, test


# -- synthetic data ----------------------------------------------------------

def _class_means(L, dim, separation):
    if dim >= L:
        return np.eye(L, dim) * (separation / np.sqrt(2.0))
    if dim >= 2:
        ang = 2 * np.pi * np.arange(L) / L
        radius = separation / (2 * np.sin(np.pi / L)) if L > 1 else 0.0
        m = np.zeros((L, dim))
        m[:, 0], m[:, 1] = radius * np.cos(ang), radius * np.sin(ang)
        return m
    return (np.arange(L) * separation).reshape(L, 1).astype(float)


def make_blobs(L, per_class, dim, separation, seed, subclusters=1, sub_separation=0.0,
               std=1.0):
    """Gaussian class blobs, affinely mapped into [0, 1] with one global scale.

    Class means are pairwise ``separation`` apart (in the unit-variance frame).
    With ``subclusters > 1`` each class is a mixture of that many sub-blobs
    offset by ``sub_separation`` along directions orthogonal to the class
    layout where possible; ``groups`` records the generating sub-blob.
    """
    if L < 1 or per_class < 1 or dim < 1 or subclusters < 1:
        raise ConfigError("make_blobs sizes must be positive")
    rng = substream(seed, "blobs")
    means = _class_means(L, dim, separation)
    xs, ys, gs = [], [], []
    for l in range(L):
        counts = np.full(subclusters, per_class // subclusters)
        counts[: per_class % subclusters] += 1
        for j, cnt in enumerate(counts):
            centre = means[l].copy()
            if subclusters > 1:
                direction = np.zeros(dim)
                direction[(L + j // 2) % dim if dim > L else (j // 2) % dim] = 1.0  # off the class layout
                sign = 1.0 if j % 2 == 0 else -1.0
                centre = centre + sign * (sub_separation / 2.0) * direction
            xs.append(centre + std * rng.standard_normal((cnt, dim)))
            ys.append(np.full(cnt, l))
            gs.append(np.full(cnt, l * subclusters + j))
    x = np.concatenate(xs)
    lo, hi = x.min(), x.max()
    x = (x - lo) / (hi - lo) if hi > lo else np.full_like(x, 0.5)
    return LabeledDataset(x, np.concatenate(ys), L,
                          np.concatenate(gs), name=f"blobs-L{L}-d{dim}")


# -- embedding & clustering --------------------------------------------------

def embed(dataset, extractor="raw_pixels", spec=None, params=None):
    """One feature row per sample: flattened pixels or the model's penultimate layer."""
    if extractor == "raw_pixels":
        return dataset.images.reshape(len(dataset), -1).copy()
    if extractor == "model_features":
        if spec is None or params is None:
            raise ConfigError("model_features extractor needs spec and params")
        if dataset.image_shape != spec.input_shape and \
                int(np.prod(dataset.image_shape)) != spec.input_dim:
            raise ShapeError(spec.input_shape, dataset.image_shape, "extractor input")
        return nets.features(spec, params, dataset.images)
    raise ConfigError(f"unknown extractor {extractor!r}")


def _sq_dists(X, centroids):
    d = (X * X).sum(1)[:, None] - 2.0 * X @ centroids.T + (centroids * centroids).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp_init(X, k, rng):
    n = X.shape[0]
    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[rng.integers(n)]
    closest = _sq_dists(X, centroids[:1]).ravel()
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            j = int(rng.integers(n))
        else:
            j = int(rng.choice(n, p=closest / total))
        centroids[i] = X[j]
        closest = np.minimum(closest, _sq_dists(X, centroids[i:i + 1]).ravel())
    return centroids


def kmeans(X, k, rng, max_iter=100, tol=1e-6):
    """Lloyd iterations from k-means++ seeds.

    Ties go to the lowest centroid index (``argmin``); an emptied centroid is
    re-seeded at the point farthest from its assigned centroid. Returns
    ``(labels, centroids, objective history)`` where the history holds the
    within-cluster sum of squares after each assignment step.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if k > n:
        raise ClusterSizeError(f"cannot form {k} clusters from {n} points")
    centroids = kmeans_pp_init(X, k, rng)
    history = []
    labels = None
    for _ in range(max_iter):
        d = _sq_dists(X, centroids)
        labels = np.argmin(d, axis=1)
        counts = np.bincount(labels, minlength=k)
        while (counts == 0).any():
            empty = int(np.flatnonzero(counts == 0)[0])
            own = d[np.arange(n), labels]
            own[counts[labels] <= 1] = -1.0     # never strip a singleton cluster
            far = int(np.argmax(own))
            labels[far] = empty
            counts = np.bincount(labels, minlength=k)
        history.append(float(d[np.arange(n), labels].sum()))
        new = np.vstack([X[labels == j].mean(0) for j in range(k)])
        shift = float(np.sqrt(((new - centroids) ** 2).sum(1)).max())
        centroids = new
        if shift < tol:
            break
    # final objective w.r.t. the returned centroids
    d = _sq_dists(X, centroids)
    final = np.argmin(d, axis=1)
    if np.bincount(final, minlength=k).min() > 0:
        labels = final
    history.append(float(((X - centroids[labels]) ** 2).sum()))
    return labels, centroids, history


def cluster(dataset, features, C, seed, max_iter=100, tol=1e-6):
    """Per-class K-means into ``C`` clusters each; ``K = L * C`` clusters in total."""
    if C < 1:
        raise ConfigError("C must be >= 1")
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] != len(dataset):
        raise ShapeError(len(dataset), features.shape[0], "feature rows")
    L = dataset.class_count
    class_part = [np.flatnonzero(dataset.labels == l) for l in range(L)]
    small = [l for l, idx in enumerate(class_part) if len(idx) < C]
    if small:
        raise ClusterSizeError(
            f"classes {small} have fewer than C={C} samples "
            f"(sizes {[len(class_part[l]) for l in small]})", small)
    cluster_part = []
    histories = []
    for l, idx in enumerate(class_part):
        if C == 1:
            cluster_part.append(idx.copy())
            histories.append([])
            continue
        labels, centroids, hist = kmeans(features[idx], C, substream(seed, "cluster", l),
                                         max_iter, tol)
        # order clusters within a class by their smallest member index
        order = sorted(range(C), key=lambda j: idx[labels == j].min())
        for j in order:
            cluster_part.append(idx[labels == j])
        histories.append(hist)
    h = ClusterHierarchy(class_part, cluster_part, C, {"kmeans_history": histories, "seed": seed})
    h.check(len(dataset))
    return h


def export_assignment_csv(path, hierarchy, header_lines=()):
    """CSV ``index,class,cluster`` (cluster is the global id)."""
    rows = []
    for k, idx in enumerate(hierarchy.cluster_partition):
        for i in idx:
            rows.append((int(i), hierarchy.cluster_class(k), k))
    rows.sort()
    with open(path, "w", newline="") as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        w = csv.writer(f)
        w.writerow(["index", "class", "cluster"])
        w.writerows(rows)


def load_assignment_csv(path, C):
    with open(path) as f:
        body = [line for line in f if not line.startswith("#")]
    rows = np.array([[int(v) for v in r] for r in csv.reader(body[1:]) if r],
                    dtype=np.int64).reshape(-1, 3)
    idx, cls, k = rows[:, 0], rows[:, 1], rows[:, 2]
    K = int(k.max()) + 1
    L = K // C
    cluster_part = [np.sort(idx[k == j]) for j in range(K)]
    class_part = [np.sort(idx[cls == l]) for l in range(L)]
    return ClusterHierarchy(class_part, cluster_part, C)
