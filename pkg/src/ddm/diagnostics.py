"""Data-quality diagnosis and unlearning-fidelity analysis.

``rank_quality`` scores clusters by the predicted change in summed
validation cross-entropy when the cluster is deleted, ``deletion_sweep``
checks such a ranking against exact retraining, and ``unlearn_fidelity``
compares synset fine-tuning with the exact-unlearn oracle.
"""

from dataclasses import dataclass, field
import csv
import io

import numpy as np

from . import diffcore as dc
from . import nets, trainer
from . import attributor as at
from ._seeding import substream
from .datahub import LabeledDataset
from .errors import ConfigError, MissingArtifactError

DEFAULT_PERCENTAGES = (0, 1, 10, 20, 50)


# -- ranking -----------------------------------------------------------------

@dataclass
class RankedClusters:
    """Clusters in ascending usefulness (worst first).

    ``scores[k]`` is the predicted increase in validation cross-entropy when
    cluster ``k`` is deleted: negative means the model is better without it.
    """

    order: np.ndarray
    scores: np.ndarray
    model: at.AttributionModel = None


def validation_records(spec, theta, synset, masks, ft, val_images, workers=1):
    """(mask, softmax predictions on the validation images) for every mask plus no deletion."""
    models = at.perturbed_models(spec, theta, synset, masks, ft, workers)
    recs = [(np.asarray(m), nets.predict(spec, p, val_images)) for m, p in zip(masks, models)]
    recs.append((np.ones(synset.K, dtype=np.int64), nets.predict(spec, theta, val_images)))
    return recs


def rank_quality(records, val_labels, path="scalar", weights=None):
    """Rank clusters by their predicted effect on the validation-sum cross-entropy.

    ``path="scalar"`` refits a one-output datamodel on the per-record
    summed CE. ``path="vector"`` fits the full prediction datamodel and
    applies the summed CE to its single-deletion outcomes.
    """
    val_labels = np.asarray(val_labels, dtype=np.int64).reshape(-1)
    if val_labels.size == 0:
        raise ConfigError("validation set is empty")
    if path == "scalar":
        ce = [(m, at.outcome_distance(np.asarray(y).reshape(1, -1), "val_sum_ce", label=val_labels))
              for m, y in records]
        model = at.fit_attribution(ce, weights)
        scores = model.W[:, 0].copy()
    elif path == "vector":
        model = at.fit_attribution(records, weights)
        after = at.influence_scores(model, "val_sum_ce", label=val_labels)
        base = at.outcome_distance(model.baseline()[None], "val_sum_ce", label=val_labels)[0]
        scores = after - base
    else:
        raise ConfigError(f"unknown ranking path {path!r}")
    # least-squares round-off must not reorder clusters with no predicted effect
    scale = max(1.0, float(np.abs(model.b).max()))
    scores[np.abs(scores) < at.TIE_RTOL * scale] = 0.0
    return RankedClusters(np.argsort(scores, kind="stable"), scores, model)


# -- sweep -------------------------------------------------------------------

@dataclass
class SweepRow:
    percent: float
    n_deleted: int
    ddm_accuracy: float
    random_accuracies: list

    @property
    def random_mean(self):
        return float(np.mean(self.random_accuracies))


@dataclass
class QualityReport:
    ranking: RankedClusters
    rows: list
    header: dict = field(default_factory=dict)

    def row(self, percent):
        for r in self.rows:
            if r.percent == percent:
                return r
        raise KeyError(percent)

    def to_csv(self):
        buf = io.StringIO()
        for k, v in sorted(self.header.items()):
            buf.write(f"# {k}: {v}\n")
        w = csv.writer(buf, lineterminator="\n")
        n_seeds = len(self.rows[0].random_accuracies) if self.rows else 0
        w.writerow(["percent", "n_deleted", "ddm_accuracy", "random_mean"] +
                   [f"random_{i}" for i in range(n_seeds)])
        for r in self.rows:
            w.writerow([f"{r.percent:g}", r.n_deleted, f"{r.ddm_accuracy:.2f}",
                        f"{r.random_mean:.2f}"] + [f"{a:.2f}" for a in r.random_accuracies])
        return buf.getvalue()

    def to_text(self):
        pcts = [f"{r.percent:g}%" for r in self.rows]
        width = max([8] + [len(p) + 2 for p in pcts])
        lines = ["Deleted".ljust(10) + "".join(p.rjust(width) for p in pcts),
                 "DDM".ljust(10) + "".join(f"{r.ddm_accuracy:.1f}".rjust(width) for r in self.rows),
                 "Random".ljust(10) + "".join(f"{r.random_mean:.1f}".rjust(width) for r in self.rows)]
        return "\n".join(lines) + "\n"


def _accuracy_pct(spec, params, test):
    return 100.0 * nets.accuracy(spec, params, test.images, test.labels)


def deletion_sweep(ranking, percentages, spec, data, hierarchy, cfg, test,
                   seeds=(0, 1, 2), level="cluster", workers=1):
    """Exact retraining without the worst ``p%`` of clusters, against random removal.

    The number of clusters removed at ``p%`` is ``round(p * K / 100)``. Each
    random baseline draws its own subset from a substream of ``seed`` and
    ``p``. Identical exclusion sets are retrained once.
    """
    parts, _ = hierarchy.partition(level)
    K = len(parts)
    order = np.asarray(ranking.order)
    if sorted(order.tolist()) != list(range(K)):
        raise ConfigError("ranking must be a permutation of all cluster ids")
    pcts = [float(p) for p in percentages]
    if any(p < 0 or p >= 100 for p in pcts):
        raise ConfigError("deletion percentages must lie in [0, 100)")
    plan = []
    for p in pcts:
        n = int(round(p * K / 100.0))
        ddm = tuple(sorted(order[:n].tolist()))
        rnd = [tuple(sorted(substream(s, "sweep_random", int(round(p * 1000)))
                            .choice(K, size=n, replace=False).tolist())) for s in seeds]
        plan.append((p, n, ddm, rnd))
    unique = sorted({ex for _, _, d, r in plan for ex in [d, *r]})
    models = trainer.retrain_many(spec, data, hierarchy, unique, cfg, level, workers)
    acc = {ex: _accuracy_pct(spec, m, test) for ex, m in zip(unique, models)}
    rows = [SweepRow(p, n, acc[d], [acc[r] for r in rs]) for p, n, d, rs in plan]
    return QualityReport(ranking, rows, {"seeds": list(seeds), "level": level})


# -- corruption --------------------------------------------------------------

@dataclass
class NoiseRecord:
    """Which images were perturbed, the applied deltas and the exact originals."""

    mask: np.ndarray
    deltas: np.ndarray
    originals: np.ndarray
    norm: float
    norm_kind: str = "linf"


def inject_noise(dataset, fraction, norm, seed):
    """Uniform perturbation of L-infinity norm ``norm`` on a random ``fraction`` of images.

    Each selected image gets ``u ~ U[-1, 1]^d`` rescaled so ``max |u| = norm``,
    then the result is clamped to [0, 1]. ``deltas`` hold the change actually
    applied after clamping.
    """
    if not 0 < fraction <= 1:
        raise ConfigError("fraction must lie in (0, 1]")
    if not norm > 0:
        raise ConfigError("norm must be positive")
    n = len(dataset)
    rng = substream(seed, "noise")
    chosen = np.sort(rng.choice(n, size=max(1, int(round(fraction * n))), replace=False))
    mask = np.zeros(n, dtype=bool)
    mask[chosen] = True
    images = dataset.images.copy()
    originals = images[chosen].copy()
    u = rng.uniform(-1.0, 1.0, size=originals.shape)
    peak = np.abs(u).reshape(len(chosen), -1).max(axis=1)
    u *= (norm / peak).reshape((-1,) + (1,) * (u.ndim - 1))
    images[chosen] = np.clip(originals + u, 0.0, 1.0)
    noisy = LabeledDataset(images, dataset.labels.copy(), dataset.class_count, dataset.groups,
                           f"{dataset.name}+noise")
    return noisy, NoiseRecord(mask, images[chosen] - originals, originals, float(norm))


def restore_noise(noisy, record):
    """Exact inverse of :func:`inject_noise`."""
    images = noisy.images.copy()
    images[record.mask] = record.originals
    return LabeledDataset(images, noisy.labels.copy(), noisy.class_count, noisy.groups,
                          noisy.name.removesuffix("+noise"))


def corrupt_labels(dataset, fraction, seed):
    """Reassign a random ``fraction`` of labels to a different, uniformly drawn class.

    Returns the corrupted dataset, the corruption mask and the original labels.
    """
    if not 0 < fraction <= 1:
        raise ConfigError("fraction must lie in (0, 1]")
    if dataset.class_count < 2:
        raise ConfigError("label corruption needs at least two classes")
    n = len(dataset)
    rng = substream(seed, "label_noise")
    chosen = np.sort(rng.choice(n, size=max(1, int(round(fraction * n))), replace=False))
    labels = dataset.labels.copy()
    shift = rng.integers(1, dataset.class_count, size=len(chosen))
    labels[chosen] = (labels[chosen] + shift) % dataset.class_count
    mask = np.zeros(n, dtype=bool)
    mask[chosen] = True
    out = LabeledDataset(dataset.images.copy(), labels, dataset.class_count, dataset.groups,
                         f"{dataset.name}+labelnoise")
    return out, mask, dataset.labels.copy()


# -- fidelity ----------------------------------------------------------------

@dataclass
class FidelityRow:
    kappa: int
    param_l2: float          # synset fine-tune vs oracle
    baseline_l2: float       # untouched theta_tau vs oracle
    agreement: float         # prediction agreement, fine-tuned vs oracle
    baseline_agreement: float
    eps: float               # accumulated gradient mismatch


def accumulated_error(spec, traj, data, hierarchy, synset, kappa, step_len, mode="reverse",
                      level="cluster"):
    """Gradient mismatch summed over the matching start epochs.

    Reverse mode: ``sum_t |grad L(theta_{t+s}, S_k) + grad L(theta_t, D_k)|``.
    Forward mode, which unlearns by replaying the other clusters, accumulates
    ``sum_t sum_{j != k} |grad L(theta_t, S_j) - grad L(theta_t, D_j)|``.
    Norms are Euclidean over the whole parameter vector.
    """
    from .distiller import valid_starts

    parts, _ = hierarchy.partition(level)
    model = nets.Model(spec)

    def g(theta, x, y):
        return dc.grad_params(model, theta, x, y).data

    total = 0.0
    for t in valid_starts(traj, step_len):
        if mode == "reverse":
            idx = parts[kappa]
            d = (g(traj.at(t + step_len), synset.pixels[kappa], synset.labels[kappa]) +
                 g(traj.at(t), data.images[idx], data.labels[idx]))
            total += float(np.linalg.norm(d))
        elif mode == "forward":
            for j, idx in enumerate(parts):
                if j == kappa:
                    continue
                d = (g(traj.at(t), synset.pixels[j], synset.labels[j]) -
                     g(traj.at(t), data.images[idx], data.labels[idx]))
                total += float(np.linalg.norm(d))
        else:
            raise ConfigError(f"unknown mode {mode!r}")
    return total


def unlearn_fidelity(spec, traj, data, hierarchy, synset, oracles, ft, heldout, step_len,
                     kappas=None, level="cluster"):
    """Per-cluster comparison of synset unlearning against the exact oracle.

    ``oracles`` maps cluster id to the retrained parameters.
    """
    kappas = sorted(oracles) if kappas is None else list(kappas)
    missing = [k for k in kappas if k not in oracles]
    if missing:
        raise MissingArtifactError(f"no oracle model for clusters {missing}")
    theta = traj.final
    mode = synset.provenance.get("mode", "reverse")
    base_pred = nets.predict(spec, theta, heldout).argmax(1)
    rows = []
    for k in kappas:
        mask = np.ones(synset.K, dtype=np.int64)
        mask[k] = 0
        approx = at.perturbed_model(spec, theta, synset, mask, ft)
        oracle_pred = nets.predict(spec, oracles[k], heldout).argmax(1)
        rows.append(FidelityRow(
            k, approx.distance(oracles[k]), theta.distance(oracles[k]),
            float(np.mean(nets.predict(spec, approx, heldout).argmax(1) == oracle_pred)),
            float(np.mean(base_pred == oracle_pred)),
            accumulated_error(spec, traj, data, hierarchy, synset, k, step_len, mode, level)))
    return rows


def fidelity_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cluster_id", "param_l2", "baseline_l2", "agreement", "baseline_agreement", "eps"])
    for r in rows:
        w.writerow([r.kappa, f"{r.param_l2:.6g}", f"{r.baseline_l2:.6g}", f"{r.agreement:.4f}",
                    f"{r.baseline_agreement:.4f}", f"{r.eps:.6g}"])
    return buf.getvalue()


def fidelity_text(rows):
    lines = [f"{'cluster':>8} {'L2(ft)':>10} {'L2(tau)':>10} {'agree':>7} {'agree0':>7} {'eps':>10}"]
    for r in rows:
        lines.append(f"{r.kappa:>8d} {r.param_l2:>10.4f} {r.baseline_l2:>10.4f} "
                     f"{r.agreement:>7.3f} {r.baseline_agreement:>7.3f} {r.eps:>10.4f}")
    return "\n".join(lines) + "\n"
