"""
Over-activation before and after refinement
===========================================

Per-image m_FP (false positives per true positive, averaged over the
foreground classes) on a small synthetic corpus, plus the pooled
class-wise IoU table.
"""

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from camrefine.eval import ConfusionMatrix, accumulate, overactivation, report
from camrefine.perimeterfit import RefineParams, build_perimeter_map, refine_multiclass, threshold_multiclass
from camrefine.superpixels import SimplifyParams
from camrefine.synth import SynthSpec, generate

params = RefineParams()
names = ["bkg"] + [f"c{i}" for i in range(1, 21)]
pooled_raw = pooled_ref = ConfusionMatrix.zeros(21)
points = []

for s in generate(SynthSpec(image_count=20, rng_seed=42)):
    pm_s = build_perimeter_map(s.image, SimplifyParams(method="slic"))
    pm_q = build_perimeter_map(s.image, SimplifyParams(method="quickshift"))
    cm_raw = accumulate(ConfusionMatrix.zeros(21), s.gt, threshold_multiclass(s.scores, params.threshold_slic))
    cm_ref = accumulate(ConfusionMatrix.zeros(21), s.gt, refine_multiclass(s.scores, pm_s, pm_q, params))
    points.append((overactivation(cm_raw).m_fp, overactivation(cm_ref).m_fp))
    pooled_raw, pooled_ref = pooled_raw + cm_raw, pooled_ref + cm_ref

for title, cm in (("raw", pooled_raw), ("refined", pooled_ref)):
    rep, table = report(cm, names)
    print(title)
    print(table)

xs, ys = zip(*points)
fig, ax = plt.subplots(figsize=(4, 4))
ax.scatter(xs, ys)
top = max(xs) * 1.05
ax.plot([0, top], [0, top], "k--", lw=1)
ax.set_xlabel("m_FP raw")
ax.set_ylabel("m_FP refined")
fig.tight_layout()
fig.savefig("metrics.png", dpi=80)
