import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ddm import attributor as at, distiller, nets
from ddm.errors import ConfigError, RankDeficientError


def normal_equation_fit(masks, Y, beta):
    """Independent oracle: solve (X^T B X) c = X^T B Y with an explicit intercept column."""
    masks = np.asarray(masks, dtype=float)
    X = np.column_stack([1.0 - masks, np.ones(len(masks))])
    B = np.diag(beta)
    return np.linalg.solve(X.T @ B @ X, X.T @ B @ np.asarray(Y, dtype=float))


@given(st.integers(2, 8), st.integers(0, 30), st.integers(0, 10_000))
def test_sampled_masks_are_full_rank_and_start_with_singles(K, extra, seed):
    masks = at.sample_masks(K, K + extra, seed)
    assert len(masks) == K + extra
    for k in range(K):
        assert at.zeros_of(masks[k]) == 1 and masks[k][k] == 0
    assert all(1 <= at.zeros_of(m) <= min(3, K - 1) for m in masks)
    X = at.design_matrix(masks + [np.ones(K)])
    assert np.linalg.matrix_rank(X) == K + 1


def test_sample_masks_rejects_bad_sizes():
    with pytest.raises(ConfigError):
        at.sample_masks(1, 5, 0)
    with pytest.raises(ConfigError):
        at.sample_masks(4, 3, 0)


def test_beta_weight():
    assert at.beta_weight([1, 1, 1]) == 1.0
    assert at.beta_weight([0, 1, 1]) == 1.0
    assert at.beta_weight([0, 0, 0, 1]) == pytest.approx(1 / 3)


@given(st.integers(2, 6), st.integers(1, 4), st.integers(0, 1000))
def test_planted_linear_model_is_recovered(K, m, seed):
    r = np.random.default_rng(seed)
    W, b = r.standard_normal((K, m)), r.standard_normal(m)
    masks = at.sample_masks(K, K + 10, seed) + [np.ones(K, dtype=int)]
    recs = [(p, (1 - p) @ W + b) for p in masks]
    model = at.fit_attribution(recs)
    assert np.allclose(model.W, W, atol=1e-8) and np.allclose(model.b, b, atol=1e-8)
    assert model.fit_residual < 1e-16


@given(st.integers(2, 6), st.integers(0, 1000))
def test_weighted_fit_matches_normal_equations(K, seed):
    r = np.random.default_rng(seed)
    masks = at.sample_masks(K, K + 8, seed) + [np.ones(K, dtype=int)]
    Y = r.standard_normal((len(masks), 3))
    model = at.fit_attribution(list(zip(masks, Y)))
    beta = [at.beta_weight(p) for p in masks]
    coef = normal_equation_fit(masks, Y, beta)
    assert np.allclose(model.W, coef[:K], atol=1e-9) and np.allclose(model.b, coef[K], atol=1e-9)


def test_duplicate_record_equals_doubled_weight():
    r = np.random.default_rng(0)
    masks = at.sample_masks(4, 9, 1) + [np.ones(4, dtype=int)]
    Y = r.standard_normal((len(masks), 2))
    recs = list(zip(masks, Y))
    beta = np.ones(len(recs))
    dup = at.fit_attribution(recs + [recs[5]], weights=np.append(beta, 1.0))
    beta[5] = 2.0
    doubled = at.fit_attribution(recs, weights=beta)
    assert np.allclose(dup.W, doubled.W, atol=1e-10)


def test_uniform_weight_scaling_does_not_change_fit():
    r = np.random.default_rng(2)
    masks = at.sample_masks(3, 8, 2) + [np.ones(3, dtype=int)]
    recs = list(zip(masks, r.standard_normal((len(masks), 2))))
    a = at.fit_attribution(recs, weights=np.full(len(recs), 1.0))
    b = at.fit_attribution(recs, weights=np.full(len(recs), 7.5))
    assert np.allclose(a.W, b.W, atol=1e-12)


def test_rank_deficiency_is_reported():
    recs = [(np.array([0, 1, 1]), [1.0]), (np.array([0, 1, 1]), [2.0]),
            (np.array([1, 1, 1]), [0.0]), (np.array([1, 1, 1]), [0.0])]
    with pytest.raises(RankDeficientError):
        at.fit_attribution(recs)
    with pytest.raises(RankDeficientError):
        at.fit_attribution(recs[:2])


def test_l1_and_kl_fits_recover_consistent_data():
    K = 3
    masks = at.sample_masks(K, 12, 0) + [np.ones(K, dtype=int)]
    W = np.array([[0.5, -0.5], [-1.0, 1.0], [0.2, 0.0]])
    b = np.array([0.3, -0.3])
    lin = [(p, (1 - p) @ W + b) for p in masks]
    l1 = at.fit_attribution(lin, fit_dist="l1")
    assert np.allclose(l1.W, W, atol=1e-8)
    probs = [(p, np.exp(y) / np.exp(y).sum()) for p, y in lin]
    kl = at.fit_attribution(probs, fit_dist="kl", iters=3000, lr=1.0)
    assert kl.link == "softmax" and kl.fit_residual < 1e-4
    pred = kl.predict([1 - np.asarray(masks[0])])[0]
    assert np.allclose(pred, probs[0][1], atol=1e-2)


def test_outcome_distances_on_known_values():
    pred = np.array([[0.5, 0.5], [0.9, 0.1]])
    ref = np.array([0.9, 0.1])
    assert np.allclose(at.outcome_distance(pred, "dist1", ref), [0.32, 0.0])
    assert np.allclose(at.outcome_distance(pred, "dist3", ref), [1 / 1.32, 1.0])
    assert np.allclose(at.outcome_distance(pred, "dist2", label=0), [np.log(2), -np.log(0.9)])
    kl = at.outcome_distance(pred, "kl", ref)
    assert kl[1] == pytest.approx(0.0) and kl[0] > 0
    with pytest.raises(ConfigError):
        at.outcome_distance(pred, "dist1")
    with pytest.raises(ConfigError):
        at.outcome_distance(pred, "nope", ref)


def test_val_sum_ce_sums_over_samples():
    pred = np.array([[0.5, 0.5, 0.25, 0.75]])  # two validation samples, two classes
    assert at.outcome_distance(pred, "val_sum_ce", label=[0, 1])[0] == pytest.approx(
        np.log(2) - np.log(0.75))


def test_argmax_ties_resolve_low():
    assert at.argmax_lowest([1.0, 3.0, 3.0]) == 1
    assert at.argmax_lowest([0.0, 0.0]) == 0


def test_dist_values():
    t = np.array([[1.0, 0.0]])
    u = np.array([[0.0, 1.0]])
    assert at.avg_dist(t, u, [1], "dist1") == 2.0
    assert at.avg_dist(t, u, [1], "dist3") == pytest.approx(1 / 3)
    assert at.avg_dist(t, np.array([[0.5, 0.5]]), [0], "dist2") == pytest.approx(np.log(2))


@pytest.fixture(scope="module")
def synsets(blobs_setup):
    data, spec, h, _, traj = blobs_setup
    cl = distiller.init_synset(data, h, 1, 0)
    cs = distiller.init_synset(data, h, 1, 0, level="class")
    return cl, cs


def test_perturbed_model_all_ones_is_identity(blobs_setup, synsets):
    _, spec, h, _, traj = blobs_setup
    ft = at.FinetuneConfig(epochs=3, lr=0.1)
    counter = at.CallCounter()
    out = at.perturbed_model(spec, traj.final, synsets[0], np.ones(h.K, dtype=int), ft, counter)
    assert out is traj.final and counter.calls == 0
    with pytest.raises(ConfigError):
        at.perturbed_model(spec, traj.final, synsets[0], np.ones(h.K + 1), ft)


def test_size_weighting(synsets):
    cl, _ = synsets
    ft = at.FinetuneConfig(batch_size=10)
    assert np.allclose(ft.weights(cl, [0, 2]), cl.sizes[[0, 2]] / 10)
    assert np.allclose(at.FinetuneConfig(weighting="unit").weights(cl, [0, 2]), 1.0)


def test_hierarchical_search_uses_l_plus_c_finetunes(blobs_setup, synsets):
    data, spec, h, _, traj = blobs_setup
    ft = at.FinetuneConfig(epochs=3, lr=0.1)
    x = data.images[:1]
    loc = at.locate_hierarchical(spec, traj.final, synsets[1], synsets[0], 2, x, "dist1", ft)
    assert loc.finetune_calls == h.L + 2
    assert loc.kappa == loc.cls * 2 + loc.cluster
    flat = at.locate_flat(spec, traj.final, synsets[0], 2, x, "dist1", ft)
    assert flat.finetune_calls == h.K


def test_zero_effect_finetune_ties_to_first_cluster(blobs_setup, synsets):
    data, spec, _, _, traj = blobs_setup
    ft = at.FinetuneConfig(epochs=0, lr=0.1)
    loc = at.locate_hierarchical(spec, traj.final, synsets[1], synsets[0], 2, data.images[:1],
                                 "dist1", ft)
    assert (loc.cls, loc.cluster) == (0, 0)


def test_exports(tmp_path):
    model = at.AttributionModel(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([5.0, 6.0]), 0.0)
    at.export_weights_csv(tmp_path / "w.csv", model, ["seed: 0"])
    rows = list(csv.reader(l for l in open(tmp_path / "w.csv") if not l.startswith("#")))
    assert rows[0] == ["row", "y0", "y1"] and rows[-1] == ["bias", "5.0", "6.0"]
    scores = {c: np.array([0.1, 0.2]) for c in ("dist1", "dist2", "dist3")}
    at.export_scores_csv(tmp_path / "s.csv", scores, [0, 1])
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["cluster_id", "class", "score_dist1", "score_dist2", "score_dist3"]
    assert rows[2][:2] == ["1", "1"]


def test_l1_fit_ignores_a_single_outlier():
    K = 3
    masks = at.sample_masks(K, 20, 4) + [np.ones(K, dtype=int)]
    W, b = np.array([[1.0], [2.0], [3.0]]), np.array([0.5])
    recs = [(p, (1 - p) @ W + b) for p in masks]
    recs[10] = (recs[10][0], recs[10][1] + 50.0)
    assert np.allclose(at.fit_attribution(recs, fit_dist="l1").W, W, atol=1e-6)
    assert not np.allclose(at.fit_attribution(recs).W, W, atol=1e-2)
