"""Plain-SGD training with trajectory checkpoints, synset fine-tuning, exact retraining."""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
import json
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import nets
from ._seeding import array_hash, stable_hash, substream
from .errors import ConfigError, NumericError, TrainingDiverged
from .params import load_checkpoint, save_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    epochs: int = 30
    batch_size: int = 64
    checkpoint_stride: int = 1
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1 or self.checkpoint_stride < 1:
            raise ConfigError("batch_size and checkpoint_stride must be >= 1")

    def to_dict(self):
        return asdict(self)

    def hash(self):
        return stable_hash(self.to_dict())


@dataclass(eq=False)
class Trajectory:
    """Checkpoints ``(epoch, theta)`` of one SGD run, epoch 0 being the init."""

    checkpoints: list
    lr: float
    epochs: int
    batch_size: int
    seed: int
    stride: int = 1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        epochs = [t for t, _ in self.checkpoints]
        if not epochs or epochs[0] != 0 or any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ConfigError("trajectory epochs must start at 0 and increase strictly")
        first = self.checkpoints[0][1]
        if any(not p.same_layout(first) for _, p in self.checkpoints):
            raise ConfigError("trajectory checkpoints disagree on the segment map")

    @property
    def epoch_list(self):
        return [t for t, _ in self.checkpoints]

    def at(self, t):
        for e, p in self.checkpoints:
            if e == t:
                return p
        raise KeyError(t)

    def has(self, t):
        return t in self.epoch_list

    @property
    def initial(self):
        return self.checkpoints[0][1]

    @property
    def final(self):
        return self.checkpoints[-1][1]

    def hash(self):
        return array_hash(*[p.data for _, p in self.checkpoints])

    def save(self, directory, spec_hash="", extra_meta=None):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for t, p in self.checkpoints:
            save_checkpoint(d / f"epoch_{t}.ckpt", p, spec_hash, {"epoch": t})
        meta = {"lr": self.lr, "epochs": self.epochs, "batch_size": self.batch_size,
                "seed": self.seed, "stride": self.stride, "epoch_list": self.epoch_list,
                "spec_hash": spec_hash, "trajectory_hash": self.hash(), **self.meta,
                **(extra_meta or {})}
        (d / "meta").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        meta = json.loads((d / "meta").read_text())
        cps = [(t, load_checkpoint(d / f"epoch_{t}.ckpt")[0]) for t in meta["epoch_list"]]
        keep = {k: v for k, v in meta.items()
                if k not in ("lr", "epochs", "batch_size", "seed", "stride", "epoch_list")}
        return cls(cps, meta["lr"], meta["epochs"], meta["batch_size"], meta["seed"],
                   meta["stride"], keep)


def epoch_order(seed, epoch, n, shuffle=True):
    """Visit order for one epoch; depends only on (seed, epoch, n)."""
    if not shuffle:
        return np.arange(n)
    return substream(seed, "shuffle", epoch).permutation(n)


def _sgd_epochs(spec, theta, data, cfg, keep_mask, record):
    model = nets.Model(spec)
    n = len(data)
    checkpoints = [(0, theta)] if record else None
    last_good = (0, theta)
    for epoch in range(cfg.epochs):
        order = epoch_order(cfg.seed, epoch, n, cfg.shuffle)
        if keep_mask is not None:
            order = order[keep_mask[order]]
        if cfg.lr > 0:
            w = theta.data.copy()
            for start in range(0, len(order), cfg.batch_size):
                b = order[start:start + cfg.batch_size]
                try:
                    _, g = dc.loss_and_grad(model, theta.with_data(w), data.images[b],
                                            data.labels[b])
                except NumericError as e:
                    raise TrainingDiverged(f"training diverged in epoch {epoch + 1}: {e}",
                                           e.layer, last_good[1], last_good[0]) from e
                w -= cfg.lr * g.data
            theta = theta.with_data(w)
            if not theta.is_finite():
                raise TrainingDiverged(f"non-finite parameters after epoch {epoch + 1}",
                                       None, last_good[1], last_good[0])
        last_good = (epoch + 1, theta)
        if record and ((epoch + 1) % cfg.checkpoint_stride == 0 or epoch + 1 == cfg.epochs):
            checkpoints.append((epoch + 1, theta))
    return theta, checkpoints


def train(spec, data, cfg):
    """SGD from ``nets.init(spec)``; returns the checkpointed trajectory."""
    theta0 = nets.init(spec)
    _, cps = _sgd_epochs(spec, theta0, data, cfg, None, record=True)
    return Trajectory(cps, cfg.lr, cfg.epochs, cfg.batch_size, cfg.seed, cfg.checkpoint_stride,
                      {"spec_hash": spec.hash(), "data": data.fingerprint()})


def finetune(spec, start, inputs, labels, epochs, lr, weights=None):
    """Full-batch gradient descent for ``epochs`` steps from ``start``.

    With ``weights`` (one per group in ``inputs``, given as a list of arrays)
    the objective is ``sum_g weights[g] * mean loss over group g``; otherwise
    it is the mean loss over all samples.
    """
    if epochs < 0 or lr < 0:
        raise ConfigError("epochs and lr must be non-negative")
    if epochs == 0 or lr == 0:
        return start
    model = nets.Model(spec)
    if weights is None:
        x, y = np.asarray(inputs), np.asarray(labels)
        sw = None
    else:
        groups = [(np.asarray(a), np.asarray(b), float(w)) for a, b, w in zip(inputs, labels, weights)]
        if not groups or any(len(b) == 0 for _, b, _ in groups):
            raise ConfigError("finetune needs at least one sample per group")
        x = np.concatenate([a for a, _, _ in groups])
        y = np.concatenate([b for _, b, _ in groups])
        sw = np.concatenate([np.full(len(b), gw / len(b)) for _, b, gw in groups])
    if len(y) == 0:
        raise ConfigError("finetune needs at least one sample")
    w = start.data.copy()
    for step in range(epochs):
        try:
            _, g = dc.loss_and_grad(model, start.with_data(w), x, y, weights=sw)
        except NumericError as e:
            raise TrainingDiverged(f"fine-tuning diverged at step {step + 1}: {e}",
                                   e.layer, start.with_data(w), step) from e
        w -= lr * g.data
    out = start.with_data(w)
    if not out.is_finite():
        raise TrainingDiverged("fine-tuning produced non-finite parameters", None, start, 0)
    return out


def retrain_without(spec, data, hierarchy, excluded, cfg, level="cluster"):
    """Exact unlearning: retrain from the same init and shuffle stream without ``excluded``.

    Excluded samples are skipped inside each epoch's permutation, so the
    remaining samples are visited in the same relative order as in
    :func:`train`.
    """
    parts, _ = hierarchy.partition(level)
    excluded = sorted(set(int(k) for k in excluded))
    if any(k < 0 or k >= len(parts) for k in excluded):
        raise ConfigError(f"excluded ids must lie in [0, {len(parts)})")
    if len(excluded) == len(parts):
        raise ConfigError("cannot exclude every cluster")
    keep = np.ones(len(data), dtype=bool)
    for k in excluded:
        keep[parts[k]] = False
    if not keep.any():
        raise ConfigError("excluding these clusters removes all data")
    theta, _ = _sgd_epochs(spec, nets.init(spec), data, cfg,
                           None if not excluded else keep, record=False)
    return theta


def _retrain_job(args):
    spec, data, hierarchy, excluded, cfg, level = args
    return retrain_without(spec, data, hierarchy, excluded, cfg, level)


def retrain_many(spec, data, hierarchy, excluded_sets, cfg, level="cluster", workers=1):
    """``retrain_without`` for each set in ``excluded_sets``, optionally in a process pool."""
    jobs = [(spec, data, hierarchy, tuple(ex), cfg, level) for ex in excluded_sets]
    if workers <= 1 or len(jobs) <= 1:
        return [_retrain_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_retrain_job, jobs))
