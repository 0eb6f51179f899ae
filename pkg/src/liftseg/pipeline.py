"""In-memory pipeline stages.  The CLI wraps these with file I/O.

Scene split: Stage 1 trains on the lifted frames of the training scenes.
Stage 2 trains on pseudo-labeled full clouds of the same scenes plus any
"unlabeled" scenes, whose ground truth is never read.  Every reported number
comes from the separate evaluation scenes.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import PipelineConfig
from .dataio import SceneRecord
from .evaluation import EvalReport, evaluate
from .geometry import PointCloud
from .lifting import downsample_with_labels, lift_frame
from .masks import MaskSet
from .network import ModelConfig, NetworkParams, predict
from .postprocess import felzenszwalb_segments, postprocess
from .pseudo_labels import make_pseudo_labels, prediction_to_masks
from .sam3d import PartialSegmentation, merge_sequence, transfer_to_cloud
from .synth import PerturbSpec, SynthSpec, scene_specs, synth_generate
from .training import TrainConfig, TrainResult, TrainSample, train

EVAL_SEED_OFFSET = 100   # evaluation scenes use seeds base + 100 + i
UNLABELED_SEED_OFFSET = 10_000
SPLITS = ("train", "eval", "unlabeled")

ROWS = ("Stage-1", "Stage-1+2", "SAM3D-style")


def _map(fn, items, workers: int = 1):
    items = list(items)
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def synth_spec(cfg: PipelineConfig) -> SynthSpec:
    s = cfg.synth
    perturb = PerturbSpec(enabled=s.perturb, erosion_px=s.erosion_px, split_prob=s.split_prob,
                          merge_prob=s.merge_prob, score_noise=s.score_noise)
    return SynthSpec(seed=s.seed, object_count=tuple(s.object_count), room_extent=tuple(s.room_extent),
                     points_per_object=tuple(s.points_per_object), frames_per_scene=s.frames_per_scene,
                     masks_per_frame_target=s.masks_per_frame_target, image_size=tuple(s.image_size),
                     focal_length=s.focal_length, structure_spacing=s.structure_spacing,
                     object_size=tuple(s.object_size), perturb=perturb)


def generate_scenes(cfg: PipelineConfig, split: str = "train") -> list[SceneRecord]:
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    spec = synth_spec(cfg)
    if split == "train":
        count, offset = cfg.synth.train_scenes, 0
    elif split == "eval":
        count, offset = cfg.synth.eval_scenes, EVAL_SEED_OFFSET
    else:
        # only the full cloud is used, so render a single frame
        count, offset = cfg.synth.unlabeled_scenes, UNLABELED_SEED_OFFSET
        spec = SynthSpec(**{**spec.to_dict(), "frames_per_scene": 1})
    return _map(synth_generate, scene_specs(spec, count, offset), cfg.workers)


def _rescale(cloud: PointCloud, cfg: PipelineConfig) -> PointCloud:
    s = cfg.geometry.coordinate_scale
    return cloud if s == 1.0 else cloud.scaled(s)


def lift_scene(scene: SceneRecord, cfg: PipelineConfig) -> list[TrainSample]:
    """One partial cloud with lifted masks per frame; frames with no surviving mask are dropped."""
    out = []
    for fb in scene.frames:
        cloud, masks = lift_frame(fb, voxel_size=None, min_points=1)
        cloud = _rescale(cloud, cfg)
        cloud, masks, _ = downsample_with_labels(cloud, masks, cfg.geometry.voxel_size, cfg.lift.min_points)
        if len(masks):
            out.append(TrainSample(cloud, masks, f"{scene.name}/{fb.frame_id}"))
    return out


def full_sample(scene: SceneRecord, cfg: PipelineConfig) -> TrainSample:
    """Voxel-downsampled full cloud with its ground truth (empty when the scene has none)."""
    cloud = _rescale(scene.cloud, cfg)
    gt = scene.gt_masks if scene.gt_masks is not None else MaskSet.empty(len(scene.cloud))
    down, masks, _ = downsample_with_labels(cloud, gt, cfg.geometry.voxel_size, 1)
    return TrainSample(down, masks, scene.name)


# ---------------------------------------------------------------------------
# model stages
# ---------------------------------------------------------------------------


def model_config(cfg: PipelineConfig) -> ModelConfig:
    m = cfg.model
    return ModelConfig(feature_dim=m.feature_dim, levels=m.levels, decoder_layers=m.decoder_layers, heads=m.heads,
                       fourier_bands=cfg.geometry.fourier_bands, base_voxel=cfg.geometry.voxel_size,
                       ffn_mult=m.ffn_mult, heatmap_scale_init=m.heatmap_scale_init,
                       masked_attention=m.masked_attention)


def train_config(cfg: PipelineConfig, stage: int) -> TrainConfig:
    s = cfg.stage1 if stage == 1 else cfg.stage2
    return TrainConfig(stage=stage, steps=s.steps, batch_size=s.batch_size, queries=cfg.queries.train,
                       peak_lr=s.peak_lr, weight_decay=s.weight_decay, warmup_fraction=s.warmup_fraction,
                       warmup_start=s.warmup_start, final_div=s.final_div, schedule=s.schedule, seed=cfg.seed,
                       grad_clip=s.grad_clip, random_query_start=s.random_query_start,
                       checkpoint_every=s.checkpoint_every, aux_loss=s.aux_loss, trainable=tuple(s.trainable),
                       loss_weights={"obj": cfg.loss.obj, "dice": cfg.loss.dice, "ce": cfg.loss.ce})


def pretrain(partials, cfg: PipelineConfig, out_dir=None, log_fn=None) -> TrainResult:
    return train(1, partials, train_config(cfg, 1), model_config(cfg), out_dir=out_dir,
                 provenance=cfg.provenance(), log_fn=log_fn)


def infer(cloud: PointCloud, params: NetworkParams, cfg: PipelineConfig, queries: int | None = None) -> MaskSet:
    """Predicted masks on ``cloud`` scored by the combined confidence c."""
    Q = min(queries or cfg.queries.infer, len(cloud))
    pred = predict(cloud, params, Q, seed=cfg.geometry.fps_seed)
    return prediction_to_masks(pred, nms_iou=cfg.eval.nms_iou)


def pseudo_label(cloud: PointCloud, params: NetworkParams, cfg: PipelineConfig) -> MaskSet:
    p = cfg.pseudo
    Q = min(cfg.queries.infer, len(cloud))
    pred = predict(cloud, params, Q, seed=cfg.geometry.fps_seed)
    return make_pseudo_labels(pred, cloud.positions, tau_c=p.tau_c, eps=p.dbscan_eps, min_pts=p.dbscan_min_pts,
                              min_points=p.min_points, resolve_overlaps=p.resolve_overlaps)


def finetune(params: NetworkParams, samples, cfg: PipelineConfig, out_dir=None, log_fn=None) -> TrainResult:
    return train(2, samples, train_config(cfg, 2), params=params.copy(), out_dir=out_dir,
                 provenance=cfg.provenance(), log_fn=log_fn)


def postprocess_masks(masks: MaskSet, cloud: PointCloud, cfg: PipelineConfig, seg=None) -> MaskSet:
    pp = cfg.postprocess
    if seg is None:
        seg = felzenszwalb_segments(cloud, k_nn=pp.k_nn, fz_k=pp.fz_k, min_segment=pp.min_segment)
    return postprocess(masks, cloud, seg=seg, eps=pp.dbscan_eps, min_pts=pp.dbscan_min_pts, min_points=pp.min_points)


def sam3d_baseline(scene: SceneRecord, target: PointCloud, cfg: PipelineConfig) -> MaskSet:
    """Merge the scene's lifted frames bottom-up and carry the result onto ``target``."""
    parts = []
    for fb in scene.frames:
        cloud, masks = lift_frame(fb, voxel_size=None, min_points=1)
        cloud = _rescale(cloud, cfg)
        cloud, masks, _ = downsample_with_labels(cloud, masks, cfg.geometry.voxel_size, cfg.sam3d.min_points)
        parts.append(PartialSegmentation(cloud, masks.renumbered(), [fb.frame_id]))
    if not parts:
        return MaskSet.empty(len(target), with_scores=True)
    merged = merge_sequence(parts, cfg.sam3d.theta, cfg.sam3d_radius)
    return transfer_to_cloud(merged, target, cfg.sam3d_radius)


# ---------------------------------------------------------------------------
# end to end
# ---------------------------------------------------------------------------


@dataclass
class PipelineResult:
    report: dict
    stage1: TrainResult
    stage2: TrainResult
    pseudo_counts: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)   # seconds per step; kept out of the report


def compare(rows: dict, evals: list, cfg: PipelineConfig) -> dict:
    """``rows`` maps a row name to per-scene predictions aligned with ``evals``.

    Returns ``{row: {"raw": report, "postprocessed": report or None}}``.
    """
    golds = [s.targets for s in evals]
    segs = None
    if cfg.postprocess.enabled:
        pp = cfg.postprocess
        segs = [felzenszwalb_segments(s.cloud, k_nn=pp.k_nn, fz_k=pp.fz_k, min_segment=pp.min_segment) for s in evals]
    out = {}
    for name, preds in rows.items():
        entry = {"raw": evaluate(preds, golds).to_dict(), "postprocessed": None}
        if segs is not None:
            smoothed = [postprocess_masks(p, s.cloud, cfg, seg) for p, s, seg in zip(preds, evals, segs)]
            entry["postprocessed"] = evaluate(smoothed, golds).to_dict()
        out[name] = entry
    return out


def run_pipeline(cfg: PipelineConfig, log_fn=None, train_dir=None) -> PipelineResult:
    """synth -> lift -> pretrain -> pseudo-label -> finetune -> eval, against the SAM3D-style baseline."""
    say = log_fn or (lambda event, **kw: None)
    t = {}
    t0 = time.perf_counter()
    train_scenes = generate_scenes(cfg, "train")
    eval_scenes = generate_scenes(cfg, "eval")
    extra_scenes = generate_scenes(cfg, "unlabeled")
    t["synth"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    partials = [p for sc in train_scenes for p in lift_scene(sc, cfg)]
    fulls_train = _map(lambda sc: full_sample(sc, cfg), train_scenes + extra_scenes, cfg.workers)
    evals = _map(lambda sc: full_sample(sc, cfg), eval_scenes, cfg.workers)
    t["lift"] = time.perf_counter() - t0
    say("lifted", partial_clouds=len(partials), eval_scenes=len(evals))

    t0 = time.perf_counter()
    d1 = None if train_dir is None else f"{train_dir}/stage1"
    r1 = pretrain(partials, cfg, out_dir=d1)
    t["pretrain"] = time.perf_counter() - t0
    say("pretrained", steps=r1.state.step, seconds=round(t["pretrain"], 2))

    t0 = time.perf_counter()
    s2 = []
    for s in fulls_train:
        pl = pseudo_label(s.cloud, r1.params, cfg)
        s2.append(TrainSample(s.cloud, pl, s.name))
    counts = [len(s.targets) for s in s2]
    t["pseudo_label"] = time.perf_counter() - t0
    say("pseudo_labeled", masks_per_scene=counts)

    t0 = time.perf_counter()
    d2 = None if train_dir is None else f"{train_dir}/stage2"
    r2 = finetune(r1.params, s2, cfg, out_dir=d2)
    t["finetune"] = time.perf_counter() - t0
    say("finetuned", steps=r2.state.step, seconds=round(t["finetune"], 2))

    t0 = time.perf_counter()
    rows = {
        "Stage-1": [infer(s.cloud, r1.params, cfg) for s in evals],
        "Stage-1+2": [infer(s.cloud, r2.params, cfg) for s in evals],
        "SAM3D-style": [sam3d_baseline(sc, s.cloud, cfg) for sc, s in zip(eval_scenes, evals)],
    }
    report = {"rows": compare(rows, evals, cfg), "scenes": [s.name for s in evals],
              "provenance": cfg.provenance()}
    t["eval"] = time.perf_counter() - t0
    say("evaluated", seconds={k: round(v, 3) for k, v in t.items()})
    return PipelineResult(report, r1, r2, counts, t)


def _fmt(x):
    return "  -  " if x is None else f"{100 * x:5.1f}"


def format_report(report: dict) -> str:
    """Side-by-side text table: one line per method, raw and post-processed columns."""
    head = f"{'method':<14}{'AP':>7}{'AP50':>7}{'AP25':>7}   |{'+pp AP':>8}{'AP50':>7}{'AP25':>7}"
    lines = [head, "-" * len(head)]
    for name, entry in report["rows"].items():
        raw, pp = entry["raw"], entry.get("postprocessed") or {}
        cells = [_fmt(raw.get(k)) for k in ("AP", "AP50", "AP25")]
        cells_pp = [_fmt(pp.get(k)) for k in ("AP", "AP50", "AP25")]
        lines.append(f"{name:<14}" + "".join(f"{c:>7}" for c in cells) + "   |"
                     + f"{cells_pp[0]:>8}" + "".join(f"{c:>7}" for c in cells_pp[1:]))
    return "\n".join(lines)


def report_rows(report: dict) -> dict:
    """Row name -> ``(raw EvalReport, post-processed EvalReport or None)``."""
    out = {}
    for name, entry in report["rows"].items():
        pp = entry.get("postprocessed")
        out[name] = (EvalReport.from_dict(entry["raw"]), None if pp is None else EvalReport.from_dict(pp))
    return out
