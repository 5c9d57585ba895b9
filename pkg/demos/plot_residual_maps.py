"""
From feature residuals to an anomaly map
========================================

Encoded and reconstructed features that disagree in one spot produce a
residual peak, which survives resizing and smoothing into the anomaly map.
"""

import numpy as np
import torch

from hfrae.residual import aggregate_anomaly_map, anomaly_score, hierarchical_loss, residual_maps

torch.manual_seed(0)
shapes = [(8, 32, 32), (16, 16, 16), (32, 8, 8)]
enc = [torch.randn(1, *s) for s in shapes]

# a decoder that reconstructs perfectly except in one corner of every level
dec = [e.clone() for e in enc]
for d in dec:
    h = d.shape[-1] // 4
    d[..., :h, :h] = torch.randn_like(d[..., :h, :h])

loss, levels = hierarchical_loss(enc, dec)
print("per-level loss", [round(l.item(), 4) for l in levels], "total", round(loss.item(), 4))

phis = residual_maps(enc, dec)
amap = aggregate_anomaly_map(phis, (128, 128), sigma=4.0)[0]
print("map shape", amap.shape, "score", anomaly_score(amap))
print("peak at", tuple(int(i) for i in np.unravel_index(amap.argmax(), amap.shape)))

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

fig, ax = plt.subplots(1, 4, figsize=(12, 3))
for k, phi in enumerate(phis):
    ax[k].imshow(phi[0].sum(0).numpy())
    ax[k].set_title(f"level {k + 1}")
ax[3].imshow(amap, cmap="jet")
ax[3].set_title("anomaly map")
fig.savefig("residual_maps.png", dpi=80)
