"""
Pruning a class activation map with perimeter maps
===================================================

One synthetic image: a blurred CAM with two distractor blobs is
thresholded, then every region of the perimeter map that contains a
background pixel is cleared.
"""

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from camrefine.perimeterfit import RefineParams, build_perimeter_map, refine_multiclass, threshold_multiclass
from camrefine.superpixels import SimplifyParams
from camrefine.synth import SynthSpec, generate_sample

sample = generate_sample(SynthSpec(rng_seed=42), 3)
cam = sample.scores.planes.max(0)

###############################################################################
# Perimeter maps from the two superpixel variants

pm_slic = build_perimeter_map(sample.image, SimplifyParams(method="slic"))
pm_quick = build_perimeter_map(sample.image, SimplifyParams(method="quickshift"))

###############################################################################
# Raw threshold against the refined labels, same threshold for both

params = RefineParams()
raw = threshold_multiclass(sample.scores, params.threshold_slic).labels
refined = refine_multiclass(sample.scores, pm_slic, pm_quick, params).labels

fp_raw = ((raw > 0) & (sample.gt.labels == 0)).sum()
fp_ref = ((refined > 0) & (sample.gt.labels == 0)).sum()
print(f"false positive pixels: raw {fp_raw}, refined {fp_ref}")

panels = [("image", sample.image.data), ("CAM", cam), ("raw > t", raw > 0),
          ("perimeter (slic)", pm_slic.edges), ("perimeter (quickshift)", pm_quick.edges),
          ("refined", refined > 0)]
fig, axes = plt.subplots(2, 3, figsize=(9, 6))
for ax, (title, im) in zip(axes.ravel(), panels):
    ax.imshow(im, cmap=None if np.ndim(im) == 3 else "gray")
    ax.set_title(title)
    ax.axis("off")
fig.tight_layout()
fig.savefig("perimeterfit.png", dpi=80)
