"""Offline phase: learn one tiny synthetic set per cluster by (reverse) gradient matching.

For a sampled checkpoint pair ``(theta_t, theta_{t+s})`` and each cluster,
the real gradient ``g_r = grad L(theta_t; D_k)`` over the whole cluster is
held fixed while the synthetic pixels ``S_k`` descend

* reverse mode: ``Dist(g_r, -grad L(theta_{t+s}; S_k))``
* forward mode: ``Dist(g_r, grad L(theta_t; S_k))`` (plain gradient matching)

Fine-tuning the final model on ``S_k`` then walks back the contribution
``D_k`` made along the trajectory.
"""

from dataclasses import asdict, dataclass, field
import json
import logging
import struct
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import nets
from ._seeding import array_hash, stable_hash, substream
from .errors import ClusterSizeError, ConfigError, DDMError

log = logging.getLogger(__name__)

SYNSET_MAGIC = b"DDMSYN01"


@dataclass(frozen=True)
class DistillConfig:
    lr_img: float = 0.1
    steps: int = 50
    step_len: int = 4
    dist: str = "cosine"
    mode: str = "reverse"
    augment: bool = False
    flip: bool = False
    ipc: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.lr_img > 0:
            raise ConfigError("lr_img must be > 0")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.step_len < 1:
            raise ConfigError("step_len must be >= 1")
        if self.ipc < 1:
            raise ConfigError("ipc must be >= 1")
        if self.mode not in ("reverse", "forward"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        dc.GradDistance(self.dist)

    def to_dict(self):
        return asdict(self)

    def hash(self):
        return stable_hash(self.to_dict())


@dataclass(eq=False)
class Synset:
    """``pixels[k]`` holds the ``ipc`` synthetic samples standing in for cluster ``k``."""

    pixels: np.ndarray          # (K, ipc, *image dims)
    labels: np.ndarray          # (K, ipc)
    cluster_ids: np.ndarray     # (K,)
    sizes: np.ndarray           # real cluster sizes, (K,)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.cluster_ids = np.asarray(self.cluster_ids, dtype=np.int64)
        self.sizes = np.asarray(self.sizes, dtype=np.int64)
        K, ipc = self.labels.shape
        if self.pixels.shape[:2] != (K, ipc) or len(self.cluster_ids) != K:
            raise ConfigError("synset arrays disagree on K / ipc")
        if ipc < 1:
            raise ConfigError("ipc must be >= 1")

    @property
    def K(self):
        return self.labels.shape[0]

    @property
    def ipc(self):
        return self.labels.shape[1]

    @property
    def image_shape(self):
        return tuple(self.pixels.shape[2:])

    def copy(self):
        return Synset(self.pixels.copy(), self.labels.copy(), self.cluster_ids.copy(),
                      self.sizes.copy(), dict(self.provenance))

    def select(self, kappas):
        """Stack the samples of the listed entries: ``(inputs, labels)``."""
        kappas = list(kappas)
        x = self.pixels[kappas].reshape((-1,) + self.image_shape)
        y = self.labels[kappas].reshape(-1)
        return x, y

    def hash(self):
        return array_hash(self.pixels, self.labels, self.cluster_ids)

    def save(self, path):
        header = {"K": self.K, "ipc": self.ipc, "image_shape": list(self.image_shape),
                  "cluster_ids": self.cluster_ids.tolist(), "sizes": self.sizes.tolist(),
                  "provenance": self.provenance}
        hb = json.dumps(header, sort_keys=True).encode()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(SYNSET_MAGIC)
            f.write(struct.pack("<I", len(hb)))
            f.write(hb)
            f.write(self.labels.astype("<i8").tobytes())
            f.write(self.pixels.astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        raw = Path(path).read_bytes()
        if raw[:8] != SYNSET_MAGIC:
            raise DDMError(f"{path}: not a synset file")
        (n,) = struct.unpack("<I", raw[8:12])
        h = json.loads(raw[12:12 + n])
        K, ipc, shape = h["K"], h["ipc"], tuple(h["image_shape"])
        off = 12 + n
        labels = np.frombuffer(raw[off:off + 8 * K * ipc], dtype="<i8").reshape(K, ipc)
        off += 8 * K * ipc
        npx = K * ipc * int(np.prod(shape))
        pix = np.frombuffer(raw[off:off + 8 * npx], dtype="<f8")
        if pix.size != npx:
            raise DDMError(f"{path}: truncated pixel payload")
        return cls(pix.reshape((K, ipc) + shape).astype(np.float64), labels.astype(np.int64),
                   np.array(h["cluster_ids"]), np.array(h["sizes"]), h["provenance"])


def init_synset(data, hierarchy, ipc, seed, level="cluster"):
    """Copy ``ipc`` uniformly sampled members of each cluster; labels = the cluster's class."""
    parts, classes = hierarchy.partition(level)
    small = [k for k, p in enumerate(parts) if len(p) < ipc]
    if small:
        raise ClusterSizeError(f"clusters {small} have fewer than ipc={ipc} members", small)
    rng = substream(seed, "synset_init")
    pix = np.empty((len(parts), ipc) + data.image_shape)
    for k, p in enumerate(parts):
        pix[k] = data.images[np.sort(rng.choice(p, size=ipc, replace=False))]
    labels = np.repeat(np.asarray(classes, dtype=np.int64)[:, None], ipc, axis=1)
    return Synset(pix, labels, np.arange(len(parts)), [len(p) for p in parts],
                  {"level": level, "init_seed": seed})


# -- augmentation ------------------------------------------------------------

def _shift_index(shape, dy, dx, flip):
    """Gather index (with the zero sentinel) implementing a shift/flip of (N, C, H, W)."""
    n, c, h, w = shape
    ni, ci, yi, xi = np.ix_(np.arange(n), np.arange(c), np.arange(h), np.arange(w))
    src_x = (w - 1 - xi) if flip else xi
    sy, sx = yi - dy, src_x - dx
    valid = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
    flat = ((ni * c + ci) * h + np.clip(sy, 0, h - 1)) * w + np.clip(sx, 0, w - 1)
    return np.where(valid, flat, n * c * h * w)


def _image_view(shape):
    """(C, H, W) view of a per-sample shape, or None if it is not image-like."""
    if len(shape) == 3:
        return shape
    if len(shape) == 2:
        return (1,) + tuple(shape)
    if len(shape) == 1:
        side = int(round(np.sqrt(shape[0])))
        if side * side == shape[0] and side >= 8:
            return (1, side, side)
    return None


def sample_augmentation(rng, flip=False, max_shift=2):
    return (int(rng.integers(-max_shift, max_shift + 1)),
            int(rng.integers(-max_shift, max_shift + 1)),
            bool(flip and rng.random() < 0.5))


def augment_tensor(x, image_shape, aug):
    """Apply one (dy, dx, flip) draw to a batch, differentiably."""
    view = _image_view(image_shape)
    if view is None or aug == (0, 0, False):
        return x
    n = x.shape[0]
    idx = _shift_index((n,) + view, *aug)
    return dc.gather(x, idx).reshape((n,) + tuple(image_shape))


def augment_array(x, image_shape, aug):
    with dc.no_grad():
        return augment_tensor(dc.Tensor(x), image_shape, aug).data


# -- distillation ------------------------------------------------------------

def valid_starts(traj, step_len, reverse=True):
    """Checkpoint epochs ``t`` usable as a start: ``t + s < tau`` and both saved."""
    if step_len % traj.stride:
        raise ConfigError(f"checkpoint stride {traj.stride} must divide step length {step_len}")
    starts = [t for t in traj.epoch_list if t + step_len < traj.epochs and traj.has(t + step_len)]
    if not starts:
        raise ConfigError(
            f"no checkpoint pair (t, t+{step_len}) with t+{step_len} < {traj.epochs}")
    return starts


def _synthetic_theta(traj, t, cfg):
    return traj.at(t + cfg.step_len) if cfg.mode == "reverse" else traj.at(t)


def distill(spec, traj, data, hierarchy, cfg, level="cluster", synset=None, history=None):
    """Optimise the synset pixels; returns a new :class:`Synset`.

    ``history``, if a list, receives the summed matching distance before
    each iteration's update.
    """
    syn = (synset or init_synset(data, hierarchy, cfg.ipc, cfg.seed, level)).copy()
    parts, _ = hierarchy.partition(level)
    if syn.K != len(parts):
        raise ConfigError(f"synset has {syn.K} entries but the partition has {len(parts)}")
    model = nets.Model(spec)
    dist = dc.GradDistance(cfg.dist, tuple(traj.initial.names))
    starts = valid_starts(traj, cfg.step_len) if cfg.steps else []
    rng_t = substream(cfg.seed, "distill_t")
    rng_aug = substream(cfg.seed, "augment")
    degenerate = 0
    for it in range(cfg.steps):
        t = starts[int(rng_t.integers(len(starts)))]
        theta_r = traj.at(t)
        theta_s = _synthetic_theta(traj, t, cfg)
        total = 0.0
        for k, idx in enumerate(parts):
            aug = sample_augmentation(rng_aug, cfg.flip) if cfg.augment else (0, 0, False)
            real = data.images[idx]
            if cfg.augment:
                real = augment_array(real, data.image_shape, aug)
            g_r = dc.grad_params(model, theta_r, real, data.labels[idx])

            def fwd(tensors, x, _aug=aug):
                return model(tensors, augment_tensor(x, syn.image_shape, _aug))

            res = dc.grad_synthetic(fwd, theta_s, syn.pixels[k], syn.labels[k], g_r, dist,
                                    mode=cfg.mode, strict=False)
            degenerate += len(res.degenerate)
            total += res.value
            syn.pixels[k] = np.clip(syn.pixels[k] - cfg.lr_img * res.grad, 0.0, 1.0)
        if history is not None:
            history.append(total)
        log.debug("distill iter %d (t=%d): matching loss %.6f", it, t, total)
    if degenerate:
        log.info("distill: %d degenerate gradient segments scored as orthogonal", degenerate)
    syn.provenance = {**syn.provenance, "trajectory_hash": traj.hash(),
                      "distill_config_hash": cfg.hash(), "level": level, "mode": cfg.mode,
                      "degenerate_segments": degenerate}
    return syn


def matching_loss(spec, traj, data, hierarchy, synset, cfg, level="cluster", starts=None):
    """Sum over start epochs and clusters of the matching distance (no augmentation)."""
    parts, _ = hierarchy.partition(level)
    model = nets.Model(spec)
    dist = dc.GradDistance(cfg.dist, tuple(traj.initial.names))
    starts = valid_starts(traj, cfg.step_len) if starts is None else starts
    total = 0.0
    for t in starts:
        theta_r = traj.at(t)
        theta_s = _synthetic_theta(traj, t, cfg)
        for k, idx in enumerate(parts):
            g_r = dc.grad_params(model, theta_r, data.images[idx], data.labels[idx])
            total += dc.matching_value(model, theta_s, synset.pixels[k], synset.labels[k], g_r,
                                       dist, mode=cfg.mode)
    return total


# -- export ------------------------------------------------------------------

def _to_2d(img):
    img = np.asarray(img)
    if img.ndim == 1:
        view = _image_view(img.shape)
        return img.reshape(view[1:]) if view else img.reshape(1, -1)
    if img.ndim == 3:
        return img if img.shape[0] == 3 else img[0]
    return img


def write_pnm(path, img):
    img = _to_2d(img)
    q = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    if q.ndim == 3:  # (3, H, W) -> P6
        h, w = q.shape[1:]
        body, magic = q.transpose(1, 2, 0).tobytes(), b"P6"
    else:
        h, w = q.shape
        body, magic = q.tobytes(), b"P5"
    with open(path, "wb") as f:
        f.write(magic + f"\n{w} {h}\n255\n".encode())
        f.write(body)


def read_pnm(path):
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:  # magic, width, height, maxval; one whitespace byte ends the header
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    body = raw[pos + 1:]
    a = np.frombuffer(body, dtype=np.uint8).astype(np.float64) / maxval
    if magic == b"P6":
        return a.reshape(h, w, 3).transpose(2, 0, 1)
    return a.reshape(h, w)


def export_synset_images(synset, directory, C=None):
    """One PGM/PPM per synthetic sample, ``class<l>_cluster<c>[_<i>].pgm``."""
    if synset.pixels.min() < 0 or synset.pixels.max() > 1:
        raise ConfigError("synset pixels must lie in [0, 1] for export")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in range(synset.K):
        label = int(synset.labels[k, 0])
        c = k % C if C else int(synset.cluster_ids[k])
        for i in range(synset.ipc):
            img = synset.pixels[k, i]
            ext = "ppm" if img.ndim == 3 and img.shape[0] == 3 else "pgm"
            suffix = f"_{i}" if synset.ipc > 1 else ""
            p = d / f"class{label}_cluster{c}{suffix}.{ext}"
            write_pnm(p, img)
            paths.append(p)
    return paths
