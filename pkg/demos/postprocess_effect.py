"""Show what oversegment smoothing does to a deliberately ragged mask.

    python3 demos/postprocess_effect.py
"""

import numpy as np

from liftseg import pipeline as pl
from liftseg.config import tiny_config
from liftseg.evaluation import evaluate
from liftseg.masks import MaskSet
from liftseg.postprocess import felzenszwalb_segments, smooth_masks

cfg = tiny_config(synth__eval_scenes=1)
sample = pl.full_sample(pl.generate_scenes(cfg, "eval")[0], cfg)
gt = sample.targets
pp = cfg.postprocess
seg = felzenszwalb_segments(sample.cloud, k_nn=pp.k_nn, fz_k=pp.fz_k, min_segment=pp.min_segment)
print(f"{len(sample.cloud)} points, {len(gt)} objects, {seg.count} oversegments")

# flip one point in ten of every GT mask
r = np.random.default_rng(0)
noisy = gt.members ^ (r.uniform(size=gt.members.shape) < 0.1)
preds = MaskSet(noisy, gt.ids, np.linspace(1, 0.5, len(gt)))
smoothed = smooth_masks(preds, seg)
for name, m in (("noisy", preds), ("smoothed", smoothed)):
    rep = evaluate(m, gt)
    print(f"{name:<9} AP {rep.ap:.3f}  AP50 {rep.ap50:.3f}  AP25 {rep.ap25:.3f}")
