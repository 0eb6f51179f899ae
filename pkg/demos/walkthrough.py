"""Walk through the two-stage pipeline on one small synthetic room.

    python3 demos/walkthrough.py

Takes a couple of minutes on one core. Each step prints what it produced.
"""

import time

from liftseg import pipeline as pl
from liftseg.config import tiny_config
from liftseg.evaluation import evaluate
from liftseg.training import TrainSample

cfg = tiny_config(synth__train_scenes=2, synth__eval_scenes=2, stage1__steps=200, stage2__steps=60)

# scenes come with rendered RGB-D frames and noisy per-frame 2D masks
train_scenes = pl.generate_scenes(cfg, "train")
eval_scenes = pl.generate_scenes(cfg, "eval")
print(f"{len(train_scenes)} training rooms, {len(train_scenes[0].frames)} frames each")

# lift every frame's masks onto its own partial cloud
partials = [p for sc in train_scenes for p in pl.lift_scene(sc, cfg)]
print(f"{len(partials)} partial clouds, e.g. {len(partials[0].cloud)} points and {len(partials[0].targets)} masks")

t = time.perf_counter()
r1 = pl.pretrain(partials, cfg)
print(f"stage 1: {r1.state.step} steps in {time.perf_counter() - t:.0f} s, last loss {r1.history[-1]['total']:.3f}")

# pseudo-labels on the full clouds, then fine-tune on them
fulls = [pl.full_sample(sc, cfg) for sc in train_scenes]
s2 = [TrainSample(s.cloud, pl.pseudo_label(s.cloud, r1.params, cfg), s.name) for s in fulls]
print("pseudo-labels per room:", [len(s.targets) for s in s2])
r2 = pl.finetune(r1.params, s2, cfg)

evals = [pl.full_sample(sc, cfg) for sc in eval_scenes]
gts = [s.targets for s in evals]
for name, params in (("stage 1", r1.params), ("stage 1+2", r2.params)):
    rep = evaluate([pl.infer(s.cloud, params, cfg) for s in evals], gts)
    print(f"{name:<10} AP {rep.ap:.3f}  AP50 {rep.ap50:.3f}  AP25 {rep.ap25:.3f}")

sam = evaluate([pl.sam3d_baseline(sc, s.cloud, cfg) for sc, s in zip(eval_scenes, evals)], gts)
print(f"{'SAM3D-style':<10} AP {sam.ap:.3f}  AP50 {sam.ap50:.3f}  AP25 {sam.ap25:.3f}")
