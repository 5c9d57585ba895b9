"""
Detection and localization metrics
==================================

Image AUROC, pixel AUROC and AUPRO on hand-made score maps.
"""

import numpy as np

from hfrae.metrics import aupro, connected_components, image_auroc, pixel_auroc

# image-level scores: two anomalous, two normal
print("image AUROC", image_auroc([0.3, 0.9, 0.1, 0.4], ["anomalous", "anomalous", "normal", "normal"]))

# two ground-truth regions of very different size in one image
mask = np.zeros((32, 32), dtype=bool)
mask[4:20, 4:20] = True   # large
mask[26:28, 26:28] = True  # tiny
labels, n = connected_components(mask)
print("regions", n)

# a map that finds the large region and misses the tiny one
rng = np.random.default_rng(0)
amap = rng.random((32, 32)) * 0.5
amap[4:20, 4:20] += 1.0

# pixel AUROC is dominated by the large region; AUPRO weighs both regions equally
print("pixel AUROC", round(pixel_auroc([amap], [mask]), 3))
curve = aupro([amap], [mask], fpr_cap=0.3)
print("AUPRO", round(curve.aupro, 3))

amap[26:28, 26:28] += 1.0
print("after finding the tiny region: pixel AUROC", round(pixel_auroc([amap], [mask]), 3),
      "AUPRO", round(aupro([amap], [mask]).aupro, 3))
