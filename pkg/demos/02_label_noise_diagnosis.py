"""Rank clusters by predicted validation loss and see where mislabeled data lands.

Twenty percent of the training labels are flipped. Mislabeled points sit in
another class's region, so k-means inside their (wrong) class tends to give
them their own small clusters. Run with ``python demos/02_label_noise_diagnosis.py``.
"""

import numpy as np

from ddm import attributor as at
from ddm import datahub, diagnostics, distiller, nets, trainer

full = datahub.make_blobs(4, 75, 8, 4.0, seed=0)
clean, val = full.subset(np.arange(0, 300, 3).tolist() + np.arange(1, 300, 3).tolist()), \
    full.subset(np.arange(2, 300, 3))
data, flipped, _ = diagnostics.corrupt_labels(clean, 0.2, seed=0)

h = datahub.cluster(data, datahub.embed(data), C=5, seed=0)
spec = nets.ModelSpec((8,), 4, widths=(16,))
traj = trainer.train(spec, data, trainer.TrainConfig(lr=0.1, epochs=60, batch_size=50))
syn = distiller.distill(spec, traj, data, h, distiller.DistillConfig(lr_img=10.0, steps=100,
                                                                     step_len=4))

ft = at.FinetuneConfig(epochs=20, lr=0.1, batch_size=50)
masks = at.sample_masks(h.K, 2 * h.K, seed=0)
records = diagnostics.validation_records(spec, traj.final, syn, masks, ft, val.images)
ranked = diagnostics.rank_quality(records, val.labels)

print("rank  cluster  size  mislabeled  score")
for r, k in enumerate(ranked.order):
    idx = h.cluster_partition[k]
    print(f"{r:>4}  {k:>7}  {len(idx):>4}  {flipped[idx].mean():>10.2f}  {ranked.scores[k]:>7.2f}")
