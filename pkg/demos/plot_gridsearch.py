"""
Threshold grid search
=====================

Scores sit near 0.2 on background and 0.8 on objects. The objective
surface over (t_slic, t_quick) shows a flat optimum: anywhere between the
modes works, and low thresholds are rescued by the perimeter maps as long
as each background region still holds a pixel at or below t.
"""

import tempfile

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from camrefine.eval import PerimeterCache, grid_search, parse_range
from camrefine.imagecore import load_manifest
from camrefine.synth import SynthSpec, write_corpus

workdir = tempfile.mkdtemp()
manifest = load_manifest(write_corpus(SynthSpec(image_count=4, image_size=64, cam_model="bimodal",
                                                rng_seed=11), workdir))
ts = parse_range("0.1:0.9:0.1")
result = grid_search(manifest, PerimeterCache(), ts, ts)
print("best:", result.best)

surface = np.array([g["objective_value"] for g in result.grid]).reshape(len(ts), len(ts))
fig, ax = plt.subplots(figsize=(4.5, 4))
im = ax.imshow(surface, origin="lower", extent=(0.05, 0.95, 0.05, 0.95), vmin=0, vmax=1)
ax.set_xlabel("t_quick")
ax.set_ylabel("t_slic")
fig.colorbar(im, label="mIoU")
fig.tight_layout()
fig.savefig("gridsearch.png", dpi=80)
