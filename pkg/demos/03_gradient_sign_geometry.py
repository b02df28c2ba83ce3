"""Why single-sample synsets with fixed hard labels struggle to *undo* training.

Reverse matching asks a synthetic sample's loss gradient to point opposite
to the real cluster's gradient. For cross-entropy with a fixed label y, the
output-layer gradient of any input is ``(softmax - e_y) h^T``, where the
hidden activations ``h`` are non-negative after ReLU. Its row for class y is
``(p_y - 1) h <= 0`` and every other row is ``p_j h >= 0``. Real samples of
the same class share that sign pattern, so the inner product of the synthetic
and real output-layer gradients is never negative: the exact opposite
direction is out of reach. This script measures the per-layer cosine between
``-g_synthetic`` and ``g_real`` after distillation.

Run with ``python demos/03_gradient_sign_geometry.py``.
"""

import numpy as np

from ddm import datahub, diffcore as dc, distiller, nets, trainer

data = datahub.make_blobs(2, 40, 8, 4.0, seed=0, subclusters=2, sub_separation=3.0)
h = datahub.cluster(data, datahub.embed(data), C=2, seed=0)
spec = nets.ModelSpec((8,), 2, widths=(16,))
traj = trainer.train(spec, data, trainer.TrainConfig(lr=0.1, epochs=20, batch_size=80))
cfg = distiller.DistillConfig(lr_img=10.0, steps=200, step_len=2)
syn = distiller.distill(spec, traj, data, h, cfg)
model = nets.Model(spec)

t = 0
for k, idx in enumerate(h.cluster_partition):
    g_r = dc.grad_params(model, traj.at(t), data.images[idx], data.labels[idx])
    g_s = dc.grad_params(model, traj.at(t + cfg.step_len), syn.pixels[k], syn.labels[k])
    cos = []
    for name, a, b in zip(g_r.names, g_r.arrays(), g_s.arrays()):
        c = -np.dot(a.ravel(), b.ravel()) / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-30)
        cos.append(f"{name}={c:+.2f}")
    print(f"cluster {k}: cos(g_real, -g_synthetic) per layer: " + ", ".join(cos))
