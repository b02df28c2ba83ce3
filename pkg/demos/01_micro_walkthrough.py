"""Walk through the offline and online phases on a four-cluster blob problem.

Run with ``python demos/01_micro_walkthrough.py``. Takes a few seconds.
"""

import numpy as np

from ddm import attributor as at
from ddm import datahub, distiller, nets, trainer

# Two classes, each a mixture of two sub-blobs, so k-means with C=2 finds K=4 clusters.
# One draw split in half keeps train and test under the same [0, 1] scaling.
full = datahub.make_blobs(2, 80, 8, 4.0, seed=0, subclusters=2, sub_separation=3.0)
data, test = full.subset(np.arange(0, 160, 2)), full.subset(np.arange(1, 160, 2))
h = datahub.cluster(data, datahub.embed(data), C=2, seed=0)
print("cluster sizes:", [len(p) for p in h.cluster_partition])

spec = nets.ModelSpec((8,), 2, widths=(16,))
cfg = trainer.TrainConfig(lr=0.1, epochs=20, batch_size=80)
traj = trainer.train(spec, data, cfg)
print(f"target model test accuracy: {nets.accuracy(spec, traj.final, test.images, test.labels):.3f}")

# Offline: one synthetic sample per cluster, matched against the trajectory in reverse.
history = []
syn = distiller.distill(spec, traj, data, h, distiller.DistillConfig(lr_img=10.0, steps=100,
                                                                     step_len=2),
                        history=history)
print(f"matching loss: {history[0]:.3f} -> {history[-1]:.3f}")

# Online: fine-tune on a deleted cluster's synset instead of retraining.
ft = at.FinetuneConfig(epochs=20, lr=0.1, batch_size=80)
print("\ncluster  |approx - exact|  |theta_tau - exact|")
for k in range(h.K):
    mask = np.ones(h.K, dtype=int)
    mask[k] = 0
    approx = at.perturbed_model(spec, traj.final, syn, mask, ft)
    exact = trainer.retrain_without(spec, data, h, [k], cfg)
    print(f"{k:>7}  {approx.distance(exact):>16.3f}  {traj.final.distance(exact):>19.3f}")

# Attribution for one test sample: K single-deletion fine-tunes plus the untouched model.
x = test.images[:1]
masks = at.single_deletions(h.K)
models = at.perturbed_models(spec, traj.final, syn, masks, ft)
records = at.prediction_records(masks, models, spec, x)
records.append((np.ones(h.K, dtype=int), nets.predict(spec, traj.final, x)[0]))
model = at.fit_attribution(records)
scores = at.influence_scores(model, "dist1", model.baseline())
print("\nDist1 influence scores:", np.round(scores, 4), "-> cluster", at.argmax_lowest(scores))
