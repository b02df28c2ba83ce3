"""Online phase: perturb the synset, fine-tune, and fit the linear datamodel.

A record pairs a keep-mask ``p`` in {0,1}^K (0 = cluster deleted) with the
prediction of the model obtained under that perturbation. The datamodel is
fitted on deletion indicators ``d = 1 - p`` plus an intercept::

    y_p  ~  d_p @ W + b

so ``b`` is the predicted no-deletion outcome and row ``W[k]`` the predicted
shift from deleting cluster ``k`` alone.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
import csv
import logging

import numpy as np

from . import diffcore as dc
from . import nets, trainer
from ._seeding import stable_hash, substream
from .errors import ConfigError, RankDeficientError

log = logging.getLogger(__name__)

OBJECTIVES = ("dist1", "dist2", "dist3", "kl", "val_sum_ce")
CE_FLOOR = 1e-12
TIE_RTOL = 1e-9


@dataclass(frozen=True)
class FinetuneConfig:
    """How a perturbed model is produced from the synset.

    The objective is ``sum_k w_k * L(theta, S_k)`` over the clusters being
    removed. ``weighting="size"`` uses ``w_k = |D_k| / batch_size``, the share
    of each SGD epoch that cluster ``k`` occupied during target training;
    ``"unit"`` uses ``w_k = 1``.
    """

    epochs: int = 30
    lr: float = 0.01
    weighting: str = "size"
    batch_size: int = 64

    def __post_init__(self):
        if self.weighting not in ("size", "unit"):
            raise ConfigError(f"unknown weighting {self.weighting!r}")
        if self.epochs < 0 or self.lr < 0:
            raise ConfigError("fine-tune epochs and lr must be non-negative")

    def to_dict(self):
        return asdict(self)

    def hash(self):
        return stable_hash(self.to_dict())

    def weights(self, synset, kappas):
        if self.weighting == "unit":
            return np.ones(len(kappas))
        return synset.sizes[list(kappas)] / float(self.batch_size)


class CallCounter:
    """Counts fine-tune invocations."""

    def __init__(self):
        self.calls = 0

    def __repr__(self):
        return f"CallCounter(calls={self.calls})"


# -- masks -------------------------------------------------------------------

def zeros_of(mask):
    return int(len(mask) - np.count_nonzero(mask))


def design_matrix(masks):
    """Rows ``[1 - p | 1]``."""
    masks = np.asarray(masks, dtype=np.float64).reshape(len(masks), -1)
    return np.hstack([1.0 - masks, np.ones((len(masks), 1))])


def single_deletions(K):
    return [1 - np.eye(K, dtype=np.int64)[k] for k in range(K)]


def sample_masks(K, count, seed, max_zeros=3, max_retries=100):
    """The K single-deletion masks followed by ``count - K`` random masks.

    Random masks delete 1..``max_zeros`` clusters (never all of them). The
    returned set, together with the free no-deletion record, always gives a
    design of full column rank ``K + 1``.
    """
    if K < 2:
        raise ConfigError("need at least two clusters")
    if count < K:
        raise ConfigError(f"count={count} < K={K}: every single deletion is required")
    base = single_deletions(K)
    rng = substream(seed, "masks")
    hi = min(max_zeros, K - 1)
    for _ in range(max_retries):
        extra = []
        for _ in range(count - K):
            z = int(rng.integers(1, hi + 1))
            m = np.ones(K, dtype=np.int64)
            m[rng.choice(K, size=z, replace=False)] = 0
            extra.append(m)
        masks = base + extra
        X = design_matrix(masks + [np.ones(K, dtype=np.int64)])
        if np.linalg.matrix_rank(X) == K + 1:
            return masks
    raise RankDeficientError(f"could not draw a full-rank mask set after {max_retries} tries")


def beta_weight(mask):
    """1 for zero or one deletion, ``1 / zeros`` otherwise."""
    z = zeros_of(mask)
    return 1.0 if z <= 1 else 1.0 / z


# -- perturbed models --------------------------------------------------------

def perturbed_model(spec, theta, synset, mask, ft, counter=None):
    """Approximate retraining without the clusters where ``mask == 0``.

    Fine-tunes ``theta`` on the synthetic samples of the deleted clusters.
    The same operation is used whichever matching mode produced the synset.
    """
    mask = np.asarray(mask)
    if mask.shape != (synset.K,):
        raise ConfigError(f"mask length {mask.shape} does not match synset K={synset.K}")
    deleted = np.flatnonzero(mask == 0)
    if len(deleted) == 0:
        return theta
    if counter is not None:
        counter.calls += 1
    return trainer.finetune(spec, theta, [synset.pixels[k] for k in deleted],
                            [synset.labels[k] for k in deleted], ft.epochs, ft.lr,
                            weights=ft.weights(synset, deleted))


def _perturbed_job(args):
    return perturbed_model(*args)


def perturbed_models(spec, theta, synset, masks, ft, workers=1, counter=None):
    """:func:`perturbed_model` for each mask, optionally in a process pool."""
    if counter is not None:
        counter.calls += sum(1 for m in masks if zeros_of(m) > 0)
    jobs = [(spec, theta, synset, m, ft) for m in masks]
    if workers <= 1 or len(jobs) <= 1:
        return [_perturbed_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_perturbed_job, jobs))


# -- fitting -----------------------------------------------------------------

@dataclass(eq=False)
class AttributionModel:
    W: np.ndarray           # (K, m)
    b: np.ndarray           # (m,)
    fit_residual: float
    objective: str = "l2"
    link: str = "identity"
    meta: dict = field(default_factory=dict)

    @property
    def K(self):
        return self.W.shape[0]

    def predict(self, deletions):
        """Predicted outcome for deletion indicator rows."""
        z = np.atleast_2d(np.asarray(deletions, dtype=np.float64)) @ self.W + self.b
        if self.link == "softmax":
            z = z - z.max(axis=1, keepdims=True)
            z = np.exp(z)
            z = z / z.sum(axis=1, keepdims=True)
        return z

    def single_deletion_outcomes(self):
        return self.predict(np.eye(self.K))

    def baseline(self):
        return self.predict(np.zeros((1, self.K)))[0]


def _records_arrays(records):
    masks = np.array([np.asarray(m) for m, _ in records], dtype=np.float64)
    Y = np.array([np.asarray(y, dtype=np.float64).reshape(-1) for _, y in records])
    return masks, Y


def fit_attribution(records, weights=None, fit_dist="l2", iters=3000, lr=0.5):
    """Weighted fit of ``y_p ~ (1 - p) @ W + b`` over ``records``.

    ``weights`` defaults to :func:`beta_weight` per mask. ``l2`` is solved
    exactly by weighted least squares, ``l1`` by iteratively reweighted
    least squares, and ``kl`` (softmax link) by a fixed budget of
    gradient-descent iterations.
    """
    masks, Y = _records_arrays(records)
    K = masks.shape[1]
    if len(records) < K + 1:
        raise RankDeficientError(f"{len(records)} records cannot determine {K + 1} coefficients")
    beta = np.array([beta_weight(m) for m in masks] if weights is None else weights, dtype=float)
    if beta.shape != (len(records),) or (beta <= 0).any():
        raise ConfigError("weights must be positive, one per record")
    X = design_matrix(masks)
    if np.linalg.matrix_rank(X) < K + 1:
        raise RankDeficientError(f"mask design has rank {np.linalg.matrix_rank(X)} < {K + 1}")
    sw = np.sqrt(beta)[:, None]
    coef, *_ = np.linalg.lstsq(X * sw, Y * sw, rcond=None)
    if fit_dist == "l2":
        r = X @ coef - Y
        return AttributionModel(coef[:K], coef[K], float((beta[:, None] * r * r).sum()), "l2")
    if fit_dist == "l1":
        return _fit_l1(X, Y, beta, coef, iters, K)
    if fit_dist != "kl":
        raise ConfigError(f"unknown fit distance {fit_dist!r}")
    return _fit_gd(X, Y, beta, coef, fit_dist, iters, lr, K)


def _fit_l1(X, Y, beta, init, iters, K, eps=1e-9, max_irls=100):
    """Weighted least absolute deviations by iteratively reweighted least squares."""
    coef = init.copy()
    for _ in range(min(iters, max_irls)):
        r = np.abs(X @ coef - Y)
        prev = coef.copy()
        for j in range(Y.shape[1]):
            sw = np.sqrt(beta / np.maximum(r[:, j], eps))[:, None]
            coef[:, j] = np.linalg.lstsq(X * sw, Y[:, j] * sw[:, 0], rcond=None)[0]
        if np.abs(coef - prev).max() < 1e-12:
            break
    val = float((beta[:, None] * np.abs(X @ coef - Y)).sum())
    return AttributionModel(coef[:K], coef[K], val, "l1")


def _fit_gd(X, Y, beta, init, kind, iters, lr, K):
    if kind == "kl":
        init = np.zeros_like(init)
        init[K] = np.log(np.clip(Y.mean(0), CE_FLOOR, None))
    coef = init.copy()
    Xt, Yt, bt = dc.Tensor(X), dc.Tensor(Y), dc.Tensor(beta[:, None])
    total = beta.sum()

    def objective(c):
        z = Xt @ c
        logq = dc.log_softmax(z)
        per = Yt * (dc.Tensor(np.log(np.clip(Y, CE_FLOOR, None))) - logq)
        return (per * bt).sum() * (1.0 / total)

    for _ in range(iters):
        c = dc.Tensor(coef, requires_grad=True)
        with dc.enable_grad():
            val = objective(c)
        (g,) = dc.grad(val, [c])
        coef -= lr * g.data
    with dc.no_grad():
        val = objective(dc.Tensor(coef)).item() * total
    return AttributionModel(coef[:K], coef[K], float(val), kind, "softmax")


# -- scoring -----------------------------------------------------------------

def outcome_distance(pred, objective, reference=None, label=None):
    """Distance of one or more predicted outcome rows under an evaluation objective."""
    pred = np.atleast_2d(pred)
    if objective in ("dist1", "dist3", "kl"):
        if reference is None:
            raise ConfigError(f"{objective} needs a reference prediction")
        ref = np.asarray(reference, dtype=float).reshape(1, -1)
        if objective == "kl":
            p = np.clip(ref, CE_FLOOR, None)
            q = np.clip(pred, CE_FLOOR, None)
            return (p * (np.log(p) - np.log(q))).sum(1)
        d = ((pred - ref) ** 2).sum(1)
        return d if objective == "dist1" else 1.0 / (1.0 + d)
    if objective == "dist2":
        if label is None:
            raise ConfigError("dist2 needs the ground-truth label")
        return -np.log(np.clip(pred[:, int(label)], CE_FLOOR, None))
    if objective == "val_sum_ce":
        if label is None:
            raise ConfigError("val_sum_ce needs validation labels")
        labels = np.asarray(label, dtype=np.int64).reshape(-1)
        probs = pred.reshape(pred.shape[0], len(labels), -1)
        picked = probs[:, np.arange(len(labels)), labels]
        return -np.log(np.clip(picked, CE_FLOOR, None)).sum(1)
    raise ConfigError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")


def influence_scores(model, objective, reference=None, label=None):
    """Score each cluster by the objective applied to its predicted single-deletion outcome."""
    return outcome_distance(model.single_deletion_outcomes(), objective, reference, label)


def argmax_lowest(scores):
    """Index of the maximum; ties resolve to the lowest index.

    Scores within ``TIE_RTOL`` (relative) of the maximum count as tied, so
    least-squares round-off cannot break a genuine tie.
    """
    s = np.asarray(scores, dtype=np.float64)
    top = s.max()
    return int(np.flatnonzero(s >= top - TIE_RTOL * max(1.0, abs(top)))[0])


# -- location ----------------------------------------------------------------

def prediction_records(masks, models, spec, x):
    """(mask, prediction) pairs for one input ``x`` (a single sample)."""
    return [(m, nets.predict(spec, p, x)[0]) for m, p in zip(masks, models)]


def _locate(spec, theta, synset, sub_ids, x, objective, ft, label, counter, workers):
    K = synset.K
    masks_local = single_deletions(len(sub_ids))
    masks = []
    for ml in masks_local:
        m = np.ones(K, dtype=np.int64)
        m[np.asarray(sub_ids)[ml == 0]] = 0
        masks.append(m)
    models = perturbed_models(spec, theta, synset, masks, ft, workers, counter)
    base = nets.predict(spec, theta, x)[0]
    recs = [(ml, nets.predict(spec, p, x)[0]) for ml, p in zip(masks_local, models)]
    recs.append((np.ones(len(sub_ids), dtype=np.int64), base))
    am = fit_attribution(recs)
    scores = influence_scores(am, objective, base, label)
    return argmax_lowest(scores), scores, am


@dataclass
class Located:
    cls: int
    cluster: int            # index within the class
    kappa: int              # global cluster id
    finetune_calls: int
    class_scores: np.ndarray = None
    cluster_scores: np.ndarray = None


def locate_flat(spec, theta, cluster_synset, C, x, objective, ft, label=None, workers=1):
    """Argmax over all K clusters from K single-deletion fine-tunes."""
    counter = CallCounter()
    k, scores, _ = _locate(spec, theta, cluster_synset, list(range(cluster_synset.K)), x,
                           objective, ft, label, counter, workers)
    return Located(k // C, k % C, k, counter.calls, None, scores)


def locate_hierarchical(spec, theta, class_synset, cluster_synset, C, x, objective, ft,
                        label=None, workers=1):
    """Class first (L fine-tunes), then a cluster within that class (C fine-tunes)."""
    counter = CallCounter()
    L = class_synset.K
    if cluster_synset.K != L * C:
        raise ConfigError(f"cluster synset has {cluster_synset.K} entries, expected {L}x{C}")
    l, cls_scores, _ = _locate(spec, theta, class_synset, list(range(L)), x, objective, ft,
                               label, counter, workers)
    ids = list(range(l * C, (l + 1) * C))
    c, clu_scores, _ = _locate(spec, theta, cluster_synset, ids, x, objective, ft, label,
                               counter, workers)
    return Located(l, c, l * C + c, counter.calls, cls_scores, clu_scores)


# -- evaluation --------------------------------------------------------------

def dist_values(target_preds, unlearned_preds, labels, kind):
    """Per-sample Dist1 / Dist2 / Dist3 between the unlearned and target predictions."""
    yt = np.atleast_2d(target_preds)
    yu = np.atleast_2d(unlearned_preds)
    if kind == "dist1":
        return ((yu - yt) ** 2).sum(1)
    if kind == "dist3":
        return 1.0 / (1.0 + ((yu - yt) ** 2).sum(1))
    if kind == "dist2":
        labels = np.asarray(labels, dtype=np.int64)
        return -np.log(np.clip(yu[np.arange(len(labels)), labels], CE_FLOOR, None))
    raise ConfigError(f"unknown distance {kind!r}")


def avg_dist(target_preds, unlearned_preds, labels, kind):
    """Mean over test samples of the chosen distance."""
    return float(dist_values(target_preds, unlearned_preds, labels, kind).mean())


def random_selection(K, n, seed):
    return substream(seed, "random_select").integers(0, K, size=n)


# -- export ------------------------------------------------------------------

def export_scores_csv(path, scores_by_objective, cluster_classes, header_lines=()):
    """``cluster_id,class,score_dist1,score_dist2,score_dist3``."""
    cols = ["dist1", "dist2", "dist3"]
    with open(path, "w", newline="") as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        w = csv.writer(f)
        w.writerow(["cluster_id", "class"] + [f"score_{c}" for c in cols])
        K = len(cluster_classes)
        for k in range(K):
            w.writerow([k, int(cluster_classes[k])] +
                       [repr(float(scores_by_objective[c][k])) for c in cols])


def export_weights_csv(path, model, header_lines=()):
    """K rows of W followed by a ``bias`` row."""
    with open(path, "w", newline="") as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        w = csv.writer(f)
        w.writerow(["row"] + [f"y{j}" for j in range(model.W.shape[1])])
        for k in range(model.K):
            w.writerow([k] + [repr(float(v)) for v in model.W[k]])
        w.writerow(["bias"] + [repr(float(v)) for v in model.b])
