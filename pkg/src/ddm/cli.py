"""Command-line pipeline.

Usage::

    python -m ddm <verb> --config CONFIG.json --out DIR [--force] [--workers N] [--seed N]

Verbs run one stage each (``cluster``, ``train``, ``distill``, ``evaluate``,
``oracle``, ``diagnose``, ``report``) and read the artifacts of earlier
stages from ``DIR``. Every stage writes ``stamp.json`` holding the hash of
the configuration sections it depends on; rerunning with the same config is
a cache hit, and a changed config is refused unless ``--force`` is given.

Exit codes: 0 success, 2 input error, 3 missing artifact, 4 numeric failure.
"""

import argparse
import copy
import csv
import io
import json
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import attributor as at
from . import datahub, diagnostics, distiller, nets, trainer
from ._seeding import stable_hash, substream
from .errors import (ArtifactConflictError, ConfigError, DDMError, MissingArtifactError,
                     NumericError)

log = logging.getLogger("ddm")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INPUT, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

DATASET_KEYS = {
    "mnist_subset": {"n_train": 2000, "n_test": 1000},
    "blobs": {"L": 2, "per_class": 40, "test_per_class": 100, "dim": 8, "separation": 4.0,
              "subclusters": 1, "sub_separation": 0.0, "std": 1.0},
    "idx": {"train_images": None, "train_labels": None, "test_images": None,
            "test_labels": None, "class_count": None},
    "csv": {"train": None, "test": None, "class_count": None},
}

DEFAULTS = {
    "version": SCHEMA_VERSION,
    "seed": 0,
    "dataset": {"kind": "mnist_subset"},
    "corruption": {"kind": "none", "fraction": 0.2, "norm": 0.1},
    "model": {"architecture": "mlp", "widths": [128, 64], "channels": [8, 16], "kernel": 3,
              "activation": "relu", "init": "kaiming"},
    "cluster": {"C": 10},
    "train": {"lr": 0.1, "epochs": 30, "batch_size": 64, "checkpoint_stride": 1,
              "shuffle": True},
    "distill": {"lr_img": 10.0, "steps": 100, "step_len": 4, "dist": "cosine",
                "mode": "reverse", "augment": False, "flip": False, "ipc": 1,
                "class_level": True},
    "finetune": {"epochs": 150, "lr": 0.015, "weighting": "size"},
    "attribution": {"n_test": 20, "masks": None, "objectives": ["dist1", "dist2", "dist3"],
                    "search": "hierarchical", "fit_dist": "l2"},
    "oracle": {"random": True, "fidelity_clusters": 4, "n_heldout": 500},
    "diagnose": {"n_val": 200, "masks": None, "percentages": [0, 1, 10, 20, 50],
                 "seeds": [0, 1, 2], "ranking_path": "scalar"},
}

STAGE_SECTIONS = {
    "cluster": ["dataset", "corruption", "cluster"],
    "train": ["dataset", "corruption", "model", "train"],
    "distill": ["dataset", "corruption", "cluster", "model", "train", "distill"],
    "evaluate": ["dataset", "corruption", "cluster", "model", "train", "distill", "finetune",
                 "attribution"],
    "oracle": ["dataset", "corruption", "cluster", "model", "train", "distill", "finetune",
               "attribution", "oracle"],
    "diagnose": ["dataset", "corruption", "cluster", "model", "train", "distill", "finetune",
                 "diagnose"],
}
UPSTREAM = {"cluster": [], "train": [], "distill": ["cluster", "train"],
            "evaluate": ["distill"], "oracle": ["evaluate"], "diagnose": ["distill"]}


# -- configuration -----------------------------------------------------------

def merge_config(user):
    """Overlay ``user`` on the defaults; unknown keys are errors."""
    if not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(user) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if user.get("version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config version {user.get('version')!r}; "
                          f"expected {SCHEMA_VERSION}")
    cfg = copy.deepcopy(DEFAULTS)
    for key, value in user.items():
        if isinstance(DEFAULTS[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            allowed = set(DEFAULTS[key])
            if key == "dataset":
                kind = value.get("kind", DEFAULTS["dataset"]["kind"])
                if kind not in DATASET_KEYS:
                    raise ConfigError(f"unknown dataset kind {kind!r}")
                allowed = {"kind"} | set(DATASET_KEYS[kind])
                cfg[key] = {"kind": kind, **DATASET_KEYS[kind]}
            bad = set(value) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {key!r}: {sorted(bad)}")
            cfg[key].update(value)
        else:
            cfg[key] = value
    if cfg["dataset"]["kind"] == DEFAULTS["dataset"]["kind"] and len(cfg["dataset"]) == 1:
        cfg["dataset"].update(DATASET_KEYS[cfg["dataset"]["kind"]])
    _validate(cfg)
    return cfg


def _validate(cfg):
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    if cfg["corruption"]["kind"] not in ("none", "labels", "pixels"):
        raise ConfigError(f"unknown corruption kind {cfg['corruption']['kind']!r}")
    for obj in cfg["attribution"]["objectives"]:
        if obj not in ("dist1", "dist2", "dist3"):
            raise ConfigError(f"unknown evaluation objective {obj!r}")
    if cfg["attribution"]["search"] not in ("flat", "hierarchical"):
        raise ConfigError("attribution.search must be 'flat' or 'hierarchical'")
    if cfg["attribution"]["fit_dist"] not in ("l2", "l1", "kl"):
        raise ConfigError("attribution.fit_dist must be l2, l1 or kl")
    # constructing the typed configs validates the remaining fields
    _train_cfg(cfg)
    _distill_cfg(cfg)
    _ft_cfg(cfg)


def load_config(path, seed=None):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        user = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from e
    cfg = merge_config(user)
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def stage_hash(cfg, stage):
    return stable_hash({"version": cfg["version"], "seed": cfg["seed"],
                        **{s: cfg[s] for s in STAGE_SECTIONS[stage]}})


def _train_cfg(cfg):
    t = cfg["train"]
    return trainer.TrainConfig(lr=t["lr"], epochs=t["epochs"], batch_size=t["batch_size"],
                               checkpoint_stride=t["checkpoint_stride"], seed=cfg["seed"],
                               shuffle=t["shuffle"])


def _distill_cfg(cfg):
    d = {k: v for k, v in cfg["distill"].items() if k != "class_level"}
    return distiller.DistillConfig(seed=cfg["seed"], **d)


def _ft_cfg(cfg):
    f = cfg["finetune"]
    return at.FinetuneConfig(epochs=f["epochs"], lr=f["lr"], weighting=f["weighting"],
                             batch_size=cfg["train"]["batch_size"])


# -- data and models -----------------------------------------------------------

def _need_file(path):
    if path is None:
        raise ConfigError("dataset path not set in config")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"input file not found: {p}")
    return p


def load_data(cfg):
    """``(train, test)`` per the dataset and corruption sections."""
    d, seed = cfg["dataset"], cfg["seed"]
    flat = cfg["model"]["architecture"] == "mlp"
    kind = d["kind"]
    if kind == "mnist_subset":
        train, test = datahub.load_mnist_subset(d["n_train"], d["n_test"], seed, flat=flat)
    elif kind == "blobs":
        full = datahub.make_blobs(d["L"], d["per_class"] + d["test_per_class"], d["dim"],
                                  d["separation"], seed, d["subclusters"], d["sub_separation"],
                                  d["std"])
        rng = substream(seed, "blob_split")
        tr = []
        for l in range(d["L"]):
            tr.append(rng.permutation(np.flatnonzero(full.labels == l))[:d["per_class"]])
        tr = np.sort(np.concatenate(tr))
        te = np.setdiff1d(np.arange(len(full)), tr)
        train, test = full.subset(tr), full.subset(te)
    elif kind == "idx":
        train = datahub.load_idx(_need_file(d["train_images"]), _need_file(d["train_labels"]),
                                 d["class_count"])
        test = datahub.load_idx(_need_file(d["test_images"]), _need_file(d["test_labels"]),
                                d["class_count"])
    else:
        train = datahub.load_csv(_need_file(d["train"]), class_count=d["class_count"])
        test = datahub.load_csv(_need_file(d["test"]), class_count=d["class_count"])
    if kind in ("idx", "csv"):
        if flat:
            train = datahub.LabeledDataset(train.images.reshape(len(train), -1), train.labels,
                                           train.class_count, train.groups, train.name)
            test = datahub.LabeledDataset(test.images.reshape(len(test), -1), test.labels,
                                          test.class_count, test.groups, test.name)
        elif train.images.ndim == 3:
            train = datahub.LabeledDataset(train.images[:, None], train.labels,
                                           train.class_count, train.groups, train.name)
            test = datahub.LabeledDataset(test.images[:, None], test.labels,
                                          test.class_count, test.groups, test.name)
    c = cfg["corruption"]
    if c["kind"] == "labels":
        train, _, _ = diagnostics.corrupt_labels(train, c["fraction"], seed)
    elif c["kind"] == "pixels":
        train, _ = diagnostics.inject_noise(train, c["fraction"], c["norm"], seed)
    return train, test


def model_spec(cfg, train):
    m = cfg["model"]
    return nets.ModelSpec(train.image_shape, train.class_count, m["architecture"],
                          tuple(m["widths"]), tuple(m["channels"]), m["kernel"],
                          m["activation"], m["init"], cfg["seed"])


# -- artifacts -----------------------------------------------------------------

class Run:
    """One CLI invocation: config, output directory and lazily loaded inputs."""

    def __init__(self, cfg, out, force=False, workers=1):
        self.cfg, self.out, self.force, self.workers = cfg, Path(out), force, workers
        self._data = None

    @property
    def seed(self):
        return self.cfg["seed"]

    def header(self, stage):
        return [f"config_hash: {stage_hash(self.cfg, stage)}", f"seed: {self.seed}"]

    @property
    def data(self):
        if self._data is None:
            self._data = load_data(self.cfg)
        return self._data

    @property
    def spec(self):
        return model_spec(self.cfg, self.data[0])

    def stage_dir(self, stage):
        return self.out / stage

    def stamp_ok(self, stage):
        p = self.stage_dir(stage) / "stamp.json"
        return p.is_file() and json.loads(p.read_text())["config_hash"] == stage_hash(self.cfg, stage)

    def require(self, stage):
        for up in UPSTREAM[stage]:
            p = self.stage_dir(up) / "stamp.json"
            if not p.is_file():
                raise MissingArtifactError(f"missing artifact {p}: run `{up}` first")
            if not self.stamp_ok(up):
                raise MissingArtifactError(
                    f"artifact {p} was produced by a different config: rerun `{up}`")

    def begin(self, stage):
        """Returns False on a cache hit; prepares an empty stage directory otherwise."""
        self.require(stage)
        d = self.stage_dir(stage)
        stamp = d / "stamp.json"
        if stamp.is_file() and not self.force:
            if self.stamp_ok(stage):
                print(f"{stage}: cached (config hash {stage_hash(self.cfg, stage)})")
                return False
            raise ArtifactConflictError(
                f"{d} holds artifacts from a different config; pass --force to overwrite")
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        return True

    def finish(self, stage):
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.json").write_text(json.dumps(self.cfg, indent=2, sort_keys=True) + "\n")
        stamp = {"stage": stage, "config_hash": stage_hash(self.cfg, stage), "seed": self.seed,
                 "version": SCHEMA_VERSION}
        (self.stage_dir(stage) / "stamp.json").write_text(json.dumps(stamp, indent=2, sort_keys=True) + "\n")

    # loaders for upstream artifacts
    def hierarchy(self):
        return datahub.load_assignment_csv(self.stage_dir("cluster") / "assignment.csv",
                                           self.cfg["cluster"]["C"])

    def trajectory(self):
        return trainer.Trajectory.load(self.stage_dir("train") / "trajectory")

    def synset(self, level):
        p = self.stage_dir("distill") / f"synset_{level}.syn"
        if not p.is_file():
            raise MissingArtifactError(f"missing artifact {p}")
        return distiller.Synset.load(p)

    def eval_indices(self):
        test = self.data[1]
        n = min(self.cfg["attribution"]["n_test"], len(test))
        return np.sort(substream(self.seed, "eval_samples").choice(len(test), n, replace=False))


def _write(path, text):
    Path(path).write_text(text)


def _csv_text(header_lines, rows):
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerows(rows)
    return buf.getvalue()


def _read_csv(path):
    with open(path) as f:
        lines = [l for l in f if not l.startswith("#")]
    return list(csv.DictReader(lines))


# -- stages --------------------------------------------------------------------

def cmd_cluster(run):
    if not run.begin("cluster"):
        return
    train, _ = run.data
    C = run.cfg["cluster"]["C"]
    h = datahub.cluster(train, datahub.embed(train), C, run.seed)
    d = run.stage_dir("cluster")
    datahub.export_assignment_csv(d / "assignment.csv", h, run.header("cluster"))
    sizes = [len(p) for p in h.cluster_partition]
    lines = [*(f"# {l}" for l in run.header("cluster")),
             f"classes L = {h.L}", f"clusters per class C = {C}", f"total clusters K = {h.K}",
             f"cluster sizes: min {min(sizes)}, max {max(sizes)}, mean {np.mean(sizes):.2f}"]
    for l in range(h.L):
        ks = h.clusters_of_class(l)
        lines.append(f"class {l}: " + " ".join(str(sizes[k]) for k in ks))
    _write(d / "summary.txt", "\n".join(lines) + "\n")
    run.finish("cluster")
    print(f"cluster: K = {h.K} clusters ({h.L} classes x {C})")


def cmd_train(run):
    if not run.begin("train"):
        return
    train, test = run.data
    spec = run.spec
    traj = trainer.train(spec, train, _train_cfg(run.cfg))
    d = run.stage_dir("train")
    traj.save(d / "trajectory", spec.hash(),
              {"config_hash": stage_hash(run.cfg, "train"), "global_seed": run.seed})
    acc = nets.accuracy(spec, traj.final, test.images, test.labels)
    loss0 = nets.loss(spec, traj.initial, train.images, train.labels)
    loss1 = nets.loss(spec, traj.final, train.images, train.labels)
    _write(d / "summary.txt", "\n".join([
        *(f"# {l}" for l in run.header("train")),
        f"test_accuracy: {acc:.4f}", f"train_loss_initial: {loss0:.6f}",
        f"train_loss_final: {loss1:.6f}", f"checkpoints: {len(traj.checkpoints)}"]) + "\n")
    run.finish("train")
    print(f"train: test accuracy {100 * acc:.2f}%")


def cmd_distill(run):
    if not run.begin("distill"):
        return
    train, test = run.data
    spec, traj, h = run.spec, run.trajectory(), run.hierarchy()
    dcfg = _distill_cfg(run.cfg)
    d = run.stage_dir("distill")
    levels = ["cluster"] + (["class"] if run.cfg["distill"]["class_level"] else [])
    lines = [*(f"# {l}" for l in run.header("distill"))]
    for level in levels:
        hist = []
        syn = distiller.distill(spec, traj, train, h, dcfg, level=level, history=hist)
        syn.provenance["config_hash"] = stage_hash(run.cfg, "distill")
        syn.save(d / f"synset_{level}.syn")
        distiller.export_synset_images(syn, d / f"images_{level}",
                                       h.C if level == "cluster" else 1)
        first = hist[0] if hist else float("nan")
        last = hist[-1] if hist else float("nan")
        lines.append(f"{level}: K={syn.K} matching loss {first:.6f} -> {last:.6f}")
    syn = distiller.Synset.load(d / "synset_cluster.syn")
    ft = _ft_cfg(run.cfg)
    collapsed = at.perturbed_model(spec, traj.final, syn, np.zeros(syn.K, dtype=np.int64), ft)
    acc0 = nets.accuracy(spec, traj.final, test.images, test.labels)
    acc1 = nets.accuracy(spec, collapsed, test.images, test.labels)
    lines += [f"target_accuracy: {acc0:.4f}", f"full_synset_finetune_accuracy: {acc1:.4f}"]
    _write(d / "summary.txt", "\n".join(lines) + "\n")
    run.finish("distill")
    print(f"distill: accuracy {100 * acc0:.2f}% -> {100 * acc1:.2f}% after full-synset fine-tune")


def _fit(records, fit_dist):
    return at.fit_attribution(records, fit_dist=fit_dist)


def cmd_evaluate(run):
    if not run.begin("evaluate"):
        return
    train, test = run.data
    spec, traj, h = run.spec, run.trajectory(), run.hierarchy()
    acfg, ft = run.cfg["attribution"], _ft_cfg(run.cfg)
    theta = traj.final
    syn = run.synset("cluster")
    K, C, L = syn.K, h.C, h.L
    idx = run.eval_indices()
    X, Y = test.images[idx], test.labels[idx]
    masks = at.sample_masks(K, acfg["masks"] or K, run.seed)

    counter = at.CallCounter()
    t0 = time.perf_counter()
    models = at.perturbed_models(spec, theta, syn, masks, ft, run.workers, counter)
    ft_seconds = (time.perf_counter() - t0) / max(1, counter.calls)
    base = nets.predict(spec, theta, X)
    P = np.stack([nets.predict(spec, p, X) for p in models])
    single = {int(np.flatnonzero(m == 0)[0]): j for j, m in enumerate(masks) if at.zeros_of(m) == 1}

    hier = acfg["search"] == "hierarchical"
    if hier:
        csyn = run.synset("class")
        cmasks = at.single_deletions(L)
        cmodels = at.perturbed_models(spec, theta, csyn, cmasks, ft, run.workers, counter)
        CP = np.stack([nets.predict(spec, p, X) for p in cmodels])

    d = run.stage_dir("evaluate")
    (d / "scores").mkdir()
    (d / "weights").mkdir()
    classes = h.cluster_classes()
    located = [["test_index", "label", "objective", "class", "cluster", "cluster_id"]]
    for i, ti in enumerate(idx):
        recs = [(m, P[j, i]) for j, m in enumerate(masks)] + [(np.ones(K, dtype=np.int64), base[i])]
        model = _fit(recs, acfg["fit_dist"])
        scores = {o: at.influence_scores(model, o, base[i], Y[i]) for o in ("dist1", "dist2", "dist3")}
        at.export_scores_csv(d / "scores" / f"sample_{ti}.csv", scores, classes,
                             run.header("evaluate") + [f"test_index: {ti}", f"label: {Y[i]}"])
        at.export_weights_csv(d / "weights" / f"sample_{ti}.csv", model,
                              run.header("evaluate") + [f"test_index: {ti}"])
        for obj in acfg["objectives"]:
            if hier:
                crecs = [(m, CP[j, i]) for j, m in enumerate(cmasks)] + [(np.ones(L, dtype=np.int64), base[i])]
                l = at.argmax_lowest(at.influence_scores(_fit(crecs, acfg["fit_dist"]), obj, base[i], Y[i]))
                ids = list(range(l * C, (l + 1) * C))
                lrecs = [(1 - np.eye(C, dtype=np.int64)[c], P[single[k], i]) for c, k in enumerate(ids)]
                lrecs.append((np.ones(C, dtype=np.int64), base[i]))
                c = at.argmax_lowest(at.influence_scores(_fit(lrecs, acfg["fit_dist"]), obj, base[i], Y[i]))
                kappa = l * C + c
            else:
                kappa = at.argmax_lowest(scores[obj])
            located.append([int(ti), int(Y[i]), obj, kappa // C, kappa % C, kappa])
    _write(d / "located.csv", _csv_text(run.header("evaluate"), located))
    _write(d / "timing.json", json.dumps({"finetune_seconds_mean": ft_seconds,
                                          "finetune_calls": counter.calls}, indent=2) + "\n")
    lines = [*(f"# {l}" for l in run.header("evaluate")),
             f"search: {acfg['search']}", f"test samples: {len(idx)}",
             f"fine-tune invocations: {counter.calls}"]
    for row in located[1:]:
        lines.append(f"sample {row[0]} (label {row[1]}) {row[2]}: class {row[3]} cluster {row[4]}")
    _write(d / "located.txt", "\n".join(lines) + "\n")
    run.finish("evaluate")
    print(f"evaluate: located clusters for {len(idx)} test samples "
          f"({counter.calls} fine-tunes)")


def cmd_oracle(run):
    if not run.begin("oracle"):
        return
    train, test = run.data
    spec, traj, h = run.spec, run.trajectory(), run.hierarchy()
    ocfg, cfg_t = run.cfg["oracle"], _train_cfg(run.cfg)
    d = run.stage_dir("oracle")
    located = _read_csv(run.stage_dir("evaluate") / "located.csv")
    idx = run.eval_indices()
    pos = {int(t): i for i, t in enumerate(idx)}
    rnd = at.random_selection(h.K, len(idx), run.seed) if ocfg["random"] else []
    fid = []
    if ocfg["fidelity_clusters"]:
        n = min(ocfg["fidelity_clusters"], h.K)
        fid = sorted(substream(run.seed, "fidelity").choice(h.K, n, replace=False).tolist())
    needed = sorted({int(r["cluster_id"]) for r in located} | {int(k) for k in rnd} | set(fid))
    oracles, seconds = {}, []
    for k in needed:
        t0 = time.perf_counter()
        oracles[k] = trainer.retrain_without(spec, train, h, [k], cfg_t)
        seconds.append(time.perf_counter() - t0)
        nets.save_params(d / f"cluster_{k}.ckpt", spec, oracles[k],
                         {"cluster": k, "config_hash": stage_hash(run.cfg, "oracle"),
                          "seed": run.seed})
    X, Y = test.images[idx], test.labels[idx]
    base = nets.predict(spec, traj.final, X)
    preds = {k: nets.predict(spec, p, X) for k, p in oracles.items()}
    rows = [["test_index", "objective", "selector", "cluster_id", "dist"]]
    for r in located:
        i, obj, k = pos[int(r["test_index"])], r["objective"], int(r["cluster_id"])
        v = at.dist_values(base[i], preds[k][i], [Y[i]], obj)[0]
        rows.append([r["test_index"], obj, "ddm", k, repr(float(v))])
        if len(rnd):
            kr = int(rnd[i])
            v = at.dist_values(base[i], preds[kr][i], [Y[i]], obj)[0]
            rows.append([r["test_index"], obj, "random", kr, repr(float(v))])
    _write(d / "dists.csv", _csv_text(run.header("oracle"), rows))
    if fid:
        syn = run.synset("cluster")
        held = test.images[:min(ocfg["n_heldout"], len(test))]
        frows = diagnostics.unlearn_fidelity(spec, traj, train, h, syn,
                                             {k: oracles[k] for k in fid}, _ft_cfg(run.cfg),
                                             held, run.cfg["distill"]["step_len"])
        hdr = "".join(f"# {l}\n" for l in run.header("oracle"))
        _write(d / "fidelity.csv", hdr + diagnostics.fidelity_csv(frows))
        _write(d / "fidelity.txt", hdr + diagnostics.fidelity_text(frows))
    _write(d / "timing.json", json.dumps({"retrain_seconds_mean": float(np.mean(seconds)),
                                          "retrains": len(seconds)}, indent=2) + "\n")
    run.finish("oracle")
    print(f"oracle: {len(needed)} exact retrains")


def cmd_diagnose(run):
    if not run.begin("diagnose"):
        return
    train, test = run.data
    spec, traj, h = run.spec, run.trajectory(), run.hierarchy()
    dcfg = run.cfg["diagnose"]
    syn = run.synset("cluster")
    n_val = min(dcfg["n_val"], len(test) - 1)
    if n_val < 1:
        raise ConfigError("diagnose.n_val must leave at least one test sample")
    val = np.sort(substream(run.seed, "val_split").choice(len(test), n_val, replace=False))
    rest = np.setdiff1d(np.arange(len(test)), val)
    masks = at.sample_masks(syn.K, dcfg["masks"] or syn.K, run.seed)
    recs = diagnostics.validation_records(spec, traj.final, syn, masks, _ft_cfg(run.cfg),
                                          test.images[val], run.workers)
    ranking = diagnostics.rank_quality(recs, test.labels[val], dcfg["ranking_path"])
    report = diagnostics.deletion_sweep(ranking, dcfg["percentages"], spec, train, h,
                                        _train_cfg(run.cfg), test.subset(rest), dcfg["seeds"],
                                        workers=run.workers)
    d = run.stage_dir("diagnose")
    classes = h.cluster_classes()
    rows = [["rank", "cluster_id", "class", "score"]]
    rows += [[r, int(k), classes[k], repr(float(ranking.scores[k]))]
             for r, k in enumerate(ranking.order)]
    hdr = list(run.header("diagnose"))
    if run.cfg["corruption"]["kind"] == "pixels":
        hdr.append(f"noise: L-inf norm {run.cfg['corruption']['norm']} (clamped to [0, 1])")
    _write(d / "ranking.csv", _csv_text(hdr, rows))
    report.header.update({"config_hash": stage_hash(run.cfg, "diagnose"), "seed": run.seed})
    _write(d / "sweep.csv", report.to_csv())
    _write(d / "sweep.txt", "".join(f"# {l}\n" for l in hdr) + report.to_text())
    run.finish("diagnose")
    print("diagnose:\n" + report.to_text(), end="")


def cmd_report(run):
    out = run.out
    have = [s for s in ("evaluate", "oracle", "diagnose") if (out / s / "stamp.json").is_file()]
    if not have:
        raise MissingArtifactError(f"no evaluation artifacts under {out}")
    d = out / "report"
    d.mkdir(parents=True, exist_ok=True)
    parts = []
    if "evaluate" in have:
        parts.append(_report_bars(out, d))
    if "oracle" in have:
        parts.append(_report_avg_dist(out, d))
        if (out / "oracle" / "fidelity.txt").is_file():
            parts.append("Unlearning fidelity (single-cluster deletion vs exact retrain)\n" +
                         "".join(l for l in (out / "oracle" / "fidelity.txt").read_text()
                                 .splitlines(keepends=True) if not l.startswith("#")))
    if "diagnose" in have:
        sweep = (out / "diagnose" / "sweep.csv").read_text()
        _write(d / "sweep.csv", sweep)
        parts.append("Test accuracy (%) after deleting the lowest-ranked clusters\n" +
                     "".join(l for l in (out / "diagnose" / "sweep.txt").read_text()
                             .splitlines(keepends=True) if not l.startswith("#")))
    if "evaluate" in have and "oracle" in have:
        parts.append(_report_timing(out, d))
    stamp = json.loads((out / have[0] / "stamp.json").read_text())
    head = f"# seed: {stamp['seed']}\n" + "".join(
        f"# {s}_config_hash: {json.loads((out / s / 'stamp.json').read_text())['config_hash']}\n"
        for s in have)
    _write(d / "summary.txt", head + "\n" + "\n".join(parts))
    print((d / "summary.txt").read_text(), end="")


def _report_bars(out, d):
    rows = [["test_index", "class", "score_dist1", "score_dist2", "score_dist3"]]
    for p in sorted((out / "evaluate" / "scores").glob("sample_*.csv"),
                    key=lambda q: int(q.stem.split("_")[1])):
        recs = _read_csv(p)
        by_class = {}
        for r in recs:
            acc = by_class.setdefault(int(r["class"]), np.zeros(3))
            acc += [float(r["score_dist1"]), float(r["score_dist2"]), float(r["score_dist3"])]
        ti = p.stem.split("_")[1]
        for cls in sorted(by_class):
            rows.append([ti, cls] + [f"{v:.6g}" for v in by_class[cls]])
    _write(d / "attribution_bars.csv", _csv_text([], rows))
    return f"Per-class attribution bar data: {len(rows) - 1} rows in attribution_bars.csv\n"


def avg_dist_table(dists_csv):
    """``{objective: {selector: mean}}`` from an oracle ``dists.csv``."""
    acc = {}
    for r in _read_csv(dists_csv):
        acc.setdefault(r["objective"], {}).setdefault(r["selector"], []).append(float(r["dist"]))
    return {o: {s: float(np.mean(v)) for s, v in sel.items()} for o, sel in acc.items()}


def _report_avg_dist(out, d):
    table = avg_dist_table(out / "oracle" / "dists.csv")
    rows = [["objective", "ddm_x100", "random_x100", "ratio"]]
    text = ["Avg_dist (x100) of exact unlearning, DDM-located vs random clusters",
            f"{'objective':<10}{'DDM':>12}{'Random':>12}{'ratio':>10}"]
    for obj in sorted(table):
        ddm = table[obj].get("ddm", float("nan"))
        rnd = table[obj].get("random", float("nan"))
        ratio = ddm / rnd if rnd else float("inf")
        rows.append([obj, f"{100 * ddm:.4f}", f"{100 * rnd:.4f}", f"{ratio:.4f}"])
        text.append(f"{obj:<10}{100 * ddm:>12.4f}{100 * rnd:>12.4f}{ratio:>10.3f}")
    _write(d / "avg_dist.csv", _csv_text([], rows))
    return "\n".join(text) + "\n"


def _report_timing(out, d):
    ft = json.loads((out / "evaluate" / "timing.json").read_text())["finetune_seconds_mean"]
    rt = json.loads((out / "oracle" / "timing.json").read_text())["retrain_seconds_mean"]
    speedup = rt / ft if ft > 0 else float("inf")
    _write(d / "timing.csv", _csv_text([], [["finetune_seconds", "retrain_seconds", "speedup"],
                                            [f"{ft:.6f}", f"{rt:.6f}", f"{speedup:.3f}"]]))
    return ("Unlearning wall time per cluster\n"
            f"{'synset fine-tune':<20}{ft:>10.4f} s\n{'exact retrain':<20}{rt:>10.4f} s\n"
            f"{'speedup':<20}{speedup:>10.2f} x\n")


COMMANDS = {"cluster": cmd_cluster, "train": cmd_train, "distill": cmd_distill,
            "evaluate": cmd_evaluate, "diagnose": cmd_diagnose, "oracle": cmd_oracle,
            "report": cmd_report}


def build_parser():
    p = argparse.ArgumentParser(prog="ddm", description="Cluster-level data attribution "
                                "and unlearning with distilled synthetic sets.")
    p.add_argument("verb", choices=list(COMMANDS))
    p.add_argument("--config", help="JSON pipeline config (defaults apply to omitted keys)")
    p.add_argument("--out", required=True, help="artifact directory")
    p.add_argument("--force", action="store_true", help="overwrite artifacts of another config")
    p.add_argument("--workers", type=int, default=1, help="process-pool size for retraining")
    p.add_argument("--seed", type=int, help="override the config's global seed")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "report":
            cfg = merge_config({}) if args.config is None else load_config(args.config, args.seed)
            cmd_report(Run(cfg, args.out))
            return EXIT_OK
        if args.config is None:
            cfg = merge_config({})
            if args.seed is not None:
                cfg["seed"] = args.seed
        else:
            cfg = load_config(args.config, args.seed)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        COMMANDS[args.verb](Run(cfg, args.out, args.force, args.workers))
        return EXIT_OK
    except MissingArtifactError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as e:
        print(f"error: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ArtifactConflictError, DDMError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


def main_entry():
    """Console-script entry point."""
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
