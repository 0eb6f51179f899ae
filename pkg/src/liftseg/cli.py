"""Command-line entry point: ``liftseg <command> [options]``.

Every command reads one JSON config (``--config``; ``tiny`` selects the
bundled desk-scale preset) and works inside a run directory (``--root``,
default ``paths.out_dir``)::

    <root>/scenes/{train,eval,unlabeled}/<scene>/   synth
    <root>/partials/                      lift
    <root>/stage1/final.ckpt              pretrain
    <root>/pseudo/                        pseudo-label
    <root>/stage2/final.ckpt              finetune
    <root>/pred/{stage1,stage2,sam3d}/    infer, merge-sam3d
    <root>/pred/<method>_pp/              postprocess
    <root>/report.json                    eval

Exit codes: 0 success, 1 invalid config or arguments, 2 missing input,
3 runtime failure.  Logs are JSON lines on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, PipelineConfig, load_config, save_config, tiny_config
from .dataio import FormatError, load_labeled_cloud, load_scene, log, save_labeled_cloud, save_scene
from .evaluation import evaluate, query_sweep
from .training import TrainSample, load_training_checkpoint, train
from . import pipeline as pl

EXIT_OK, EXIT_VALIDATION, EXIT_MISSING, EXIT_RUNTIME = 0, 1, 2, 3

METHODS = {"stage1": "Stage-1", "stage2": "Stage-1+2", "sam3d": "SAM3D-style"}


class MissingInput(FileNotFoundError):
    pass


class UsageError(ValueError):
    pass


def _need(path: Path, what: str, producer: str) -> Path:
    if not path.exists():
        raise MissingInput(f"missing {what}: {path} (produce it with `liftseg {producer}`)")
    return path


def _stems(directory: Path, what: str, producer: str) -> list[Path]:
    _need(directory, what, producer)
    stems = sorted(p.with_suffix("").with_suffix("") for p in directory.glob("*.masks.json"))
    if not stems:
        raise MissingInput(f"missing {what}: {directory} holds no *.masks.json files "
                           f"(produce them with `liftseg {producer}`)")
    return stems


def _scene_dirs(directory: Path) -> list[Path]:
    _need(directory, "scene directory", "synth")
    dirs = sorted(p.parent for p in directory.glob("*/scene.json"))
    if not dirs:
        raise MissingInput(f"missing scenes: {directory} holds no */scene.json (produce them with `liftseg synth`)")
    return dirs


class Run:
    """Resolved config plus the run-directory layout."""

    def __init__(self, cfg: PipelineConfig, root=None):
        self.cfg = cfg
        self.root = Path(root if root is not None else cfg.paths.out_dir)
        self.prov = cfg.provenance()

    def scenes(self, split: str) -> Path:
        return self.root / "scenes" / split

    @property
    def partials(self) -> Path:
        return self.root / "partials"

    def stage_dir(self, stage: int) -> Path:
        return self.root / f"stage{stage}"

    @property
    def pseudo(self) -> Path:
        return self.root / "pseudo"

    def pred(self, method: str) -> Path:
        return self.root / "pred" / method

    def checkpoint(self, stage: int) -> Path:
        return _need(self.stage_dir(stage) / "final.ckpt", f"stage-{stage} checkpoint",
                     "pretrain" if stage == 1 else "finetune")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(run: Run, args) -> dict:
    splits = pl.SPLITS if args.split == "all" else (args.split,)
    out = {}
    for split in splits:
        if split == "unlabeled" and run.cfg.synth.unlabeled_scenes == 0:
            continue
        scenes = pl.generate_scenes(run.cfg, split)
        for sc in scenes:
            save_scene(sc, run.scenes(split) / sc.name, run.prov)
        out[split] = [sc.name for sc in scenes]
        log("synth", split=split, scenes=len(scenes), out=str(run.scenes(split)))
    return out


def _load_scenes(directory: Path, with_frames: bool = True):
    return [load_scene(d, with_frames) for d in _scene_dirs(directory)]


def cmd_lift(run: Run, args) -> dict:
    src = Path(args.scenes) if args.scenes else run.scenes("train")
    out = Path(args.out) if args.out else run.partials
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for sc in _load_scenes(src):
        for s in pl.lift_scene(sc, run.cfg):
            save_labeled_cloud(out / s.name.replace("/", "__"), s.cloud, s.targets, run.prov)
            count += 1
    log("lift", partial_clouds=count, out=str(out))
    return {"partial_clouds": count}


def _load_samples(directory: Path, what: str, producer: str) -> list[TrainSample]:
    out = []
    for stem in _stems(directory, what, producer):
        cloud, masks = load_labeled_cloud(stem)
        out.append(TrainSample(cloud, masks, stem.name))
    return out


def _train_stage(run: Run, stage: int, samples, params=None, resume=None) -> dict:
    tc = pl.train_config(run.cfg, stage)
    out = run.stage_dir(stage)
    state = None
    if resume:
        params, state, _ = load_training_checkpoint(_need(Path(resume), "checkpoint to resume", "pretrain"))
        if state is None:
            raise UsageError(f"{resume} holds weights only and cannot be resumed")
    log_every = max(1, tc.steps // 20)

    def on_step(rec):
        if rec["step"] % log_every == 0 or rec["step"] == tc.steps - 1:
            log("train_step", stage=stage, step=rec["step"], lr=rec["lr"], loss=rec["total"],
                grad_norm=rec.get("grad_norm"))

    res = train(stage, samples, tc, pl.model_config(run.cfg) if params is None else None, params=params,
                state=state, out_dir=out, provenance=run.prov, log_fn=on_step)
    log("trained", stage=stage, steps=res.state.step, skipped_updates=res.state.skipped,
        checkpoint=str(out / "final.ckpt"))
    return {"checkpoint": str(out / "final.ckpt"), "steps": res.state.step}


def cmd_pretrain(run: Run, args) -> dict:
    src = Path(args.partials) if args.partials else run.partials
    return _train_stage(run, 1, _load_samples(src, "lifted partial clouds", "lift"), resume=args.resume)


def _checkpoint_params(run: Run, args, default_stage: int):
    path = Path(args.checkpoint) if args.checkpoint else run.checkpoint(default_stage)
    params, _, _ = load_training_checkpoint(_need(path, "checkpoint", "pretrain"))
    return params, path


def cmd_finetune(run: Run, args) -> dict:
    params, _ = _checkpoint_params(run, args, 1)
    src = Path(args.pseudo) if args.pseudo else run.pseudo
    samples = _load_samples(src, "pseudo-labels", "pseudo-label")
    if args.resume:
        return _train_stage(run, 2, samples, resume=args.resume)
    return _train_stage(run, 2, samples, params=params)


def cmd_pseudo_label(run: Run, args) -> dict:
    params, ckpt = _checkpoint_params(run, args, 1)
    if args.scenes:
        scenes = _load_scenes(Path(args.scenes), with_frames=False)
    else:
        # training scenes plus the unlabeled extras when there are any
        scenes = _load_scenes(run.scenes("train"), with_frames=False)
        if run.cfg.synth.unlabeled_scenes:
            scenes += _load_scenes(run.scenes("unlabeled"), with_frames=False)
    out = Path(args.out) if args.out else run.pseudo
    out.mkdir(parents=True, exist_ok=True)
    counts = {}
    for sc in scenes:
        s = pl.full_sample(sc, run.cfg)
        masks = pl.pseudo_label(s.cloud, params, run.cfg)
        save_labeled_cloud(out / sc.name, s.cloud, masks, {**run.prov, "checkpoint": ckpt.name})
        counts[sc.name] = len(masks)
    log("pseudo_label", masks=counts, tau_c=run.cfg.pseudo.tau_c, out=str(out))
    return {"masks": counts}


def cmd_infer(run: Run, args) -> dict:
    params, ckpt = _checkpoint_params(run, args, args.stage)
    src = Path(args.scenes) if args.scenes else run.scenes("eval")
    out = Path(args.out) if args.out else run.pred(f"stage{args.stage}")
    out.mkdir(parents=True, exist_ok=True)
    counts = {}
    for sc in _load_scenes(src, with_frames=False):
        s = pl.full_sample(sc, run.cfg)
        masks = pl.infer(s.cloud, params, run.cfg, args.queries)
        save_labeled_cloud(out / sc.name, s.cloud, masks, {**run.prov, "checkpoint": ckpt.name})
        counts[sc.name] = len(masks)
    log("infer", masks=counts, out=str(out))
    return {"masks": counts}


def cmd_merge_sam3d(run: Run, args) -> dict:
    src = Path(args.scenes) if args.scenes else run.scenes("eval")
    out = Path(args.out) if args.out else run.pred("sam3d")
    out.mkdir(parents=True, exist_ok=True)
    counts = {}
    for sc in _load_scenes(src):
        s = pl.full_sample(sc, run.cfg)
        masks = pl.sam3d_baseline(sc, s.cloud, run.cfg)
        save_labeled_cloud(out / sc.name, s.cloud, masks, run.prov)
        counts[sc.name] = len(masks)
    log("merge_sam3d", masks=counts, theta=run.cfg.sam3d.theta, radius=run.cfg.sam3d_radius, out=str(out))
    return {"masks": counts}


def cmd_postprocess(run: Run, args) -> dict:
    src = Path(args.pred) if args.pred else run.pred(args.method)
    out = Path(args.out) if args.out else src.with_name(src.name + "_pp")
    out.mkdir(parents=True, exist_ok=True)
    counts = {}
    for stem in _stems(src, "predictions", "infer"):
        cloud, masks = load_labeled_cloud(stem)
        smoothed = pl.postprocess_masks(masks, cloud, run.cfg)
        save_labeled_cloud(out / stem.name, cloud, smoothed, run.prov)
        counts[stem.name] = len(smoothed)
    log("postprocess", masks=counts, out=str(out))
    return {"masks": counts}


def _gold(run: Run, scenes_dir: Path) -> dict:
    return {sc.name: pl.full_sample(sc, run.cfg).targets for sc in _load_scenes(scenes_dir, with_frames=False)}


def _evaluate_dir(pred_dir: Path, gold: dict) -> EvalReport:
    preds, gts = [], []
    for stem in _stems(pred_dir, "predictions", "infer"):
        if stem.name not in gold:
            raise MissingInput(f"missing ground truth for {stem.name} (expected a scene of that name)")
        _, masks = load_labeled_cloud(stem)
        if masks.scores is None:
            masks = masks.with_scores([1.0] * len(masks))
        preds.append(masks)
        gts.append(gold[stem.name])
    return evaluate(preds, gts)


def cmd_eval(run: Run, args) -> dict:
    gold = _gold(run, Path(args.scenes) if args.scenes else run.scenes("eval"))
    if args.pred:
        report = _evaluate_dir(Path(args.pred), gold).to_dict()
    else:
        rows = {}
        for key, name in METHODS.items():
            if not run.pred(key).exists():
                continue
            pp = run.pred(key + "_pp")
            rows[name] = {"raw": _evaluate_dir(run.pred(key), gold).to_dict(),
                          "postprocessed": _evaluate_dir(pp, gold).to_dict() if pp.exists() else None}
        if not rows:
            raise MissingInput(f"missing predictions under {run.root / 'pred'} "
                               "(produce them with `liftseg infer` or `liftseg merge-sam3d`)")
        report = {"rows": rows, "scenes": sorted(gold), "provenance": run.prov}
    out = Path(args.out) if args.out else (None if args.pred else run.root / "report.json")
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    log("eval", out=str(out) if out else "stdout")
    return report


def cmd_sweep_queries(run: Run, args) -> dict:
    params, ckpt = _checkpoint_params(run, args, 2)
    counts = [int(q) for q in args.queries.split(",")] if args.queries else list(run.cfg.queries.sweep)
    scenes = [(s.cloud, s.targets) for s in
              (pl.full_sample(sc, run.cfg) for sc in _load_scenes(Path(args.scenes) if args.scenes
                                                                  else run.scenes("eval"), with_frames=False))]

    def predict_fn(cloud, p, Q, seed):
        return pl.infer(cloud, p, run.cfg, Q)

    rows = query_sweep(params, scenes, counts, predict_fn, seed=run.cfg.geometry.fps_seed,
                       warn=lambda msg: log("query_clamp", message=msg))
    table = {"checkpoint": ckpt.name, "rows": rows, "provenance": run.prov}
    out = Path(args.out) if args.out else run.root / "sweep_queries.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    csv = out.with_suffix(".tsv")
    csv.write_text("Q\tAP\tAP50\tAP25\n" + "".join(
        f"{r['Q']}\t{r['AP']}\t{r['AP50']}\t{r['AP25']}\n" for r in rows))
    log("sweep_queries", rows=len(rows), out=str(out), plot_data=str(csv))
    return table


def cmd_pipeline(run: Run, args) -> dict:
    ns = argparse.Namespace
    save_config(run.cfg, run.root / "config.json")
    cmd_synth(run, ns(split="all"))
    cmd_lift(run, ns(scenes=None, out=None))
    cmd_pretrain(run, ns(partials=None, resume=None))
    cmd_pseudo_label(run, ns(checkpoint=None, scenes=None, out=None))
    cmd_finetune(run, ns(checkpoint=None, pseudo=None, resume=None))
    for stage in (1, 2):
        cmd_infer(run, ns(checkpoint=str(run.checkpoint(stage)), stage=stage, scenes=None, out=None, queries=None))
    cmd_merge_sam3d(run, ns(scenes=None, out=None))
    if run.cfg.postprocess.enabled:
        for key in METHODS:
            cmd_postprocess(run, ns(pred=None, method=key, out=None))
    report = cmd_eval(run, ns(scenes=None, pred=None, out=None))
    (run.root / "report.txt").write_text(pl.format_report(report) + "\n")
    return report


COMMANDS = {
    "synth": cmd_synth, "lift": cmd_lift, "merge-sam3d": cmd_merge_sam3d, "pretrain": cmd_pretrain,
    "infer": cmd_infer, "pseudo-label": cmd_pseudo_label, "finetune": cmd_finetune,
    "postprocess": cmd_postprocess, "eval": cmd_eval, "sweep-queries": cmd_sweep_queries,
    "pipeline": cmd_pipeline,
}


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="liftseg", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"liftseg {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", default=None, help="JSON config file, or 'tiny' for the desk-scale preset")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config value, e.g. stage1.steps=50 (VALUE parsed as JSON)")
    common.add_argument("--root", default=None, help="run directory (default: paths.out_dir)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_)

    a = add("synth", "generate synthetic scenes with rendered frames")
    a.add_argument("--split", choices=("train", "eval", "unlabeled", "all"), default="all")
    a = add("lift", "lift 2D frame masks onto partial clouds")
    a.add_argument("--scenes"); a.add_argument("--out")
    a = add("merge-sam3d", "SAM3D-style bottom-up merging baseline")
    a.add_argument("--scenes"); a.add_argument("--out")
    a = add("pretrain", "Stage-1 training on lifted partial clouds")
    a.add_argument("--partials"); a.add_argument("--resume", help="training checkpoint to continue from")
    a = add("infer", "predict scored masks on full clouds")
    a.add_argument("--checkpoint"); a.add_argument("--stage", type=int, choices=(1, 2), default=2)
    a.add_argument("--scenes"); a.add_argument("--out"); a.add_argument("--queries", type=int)
    a = add("pseudo-label", "confidence-filtered pseudo-labels on full clouds")
    a.add_argument("--checkpoint"); a.add_argument("--scenes"); a.add_argument("--out")
    a = add("finetune", "Stage-2 training on pseudo-labels")
    a.add_argument("--checkpoint"); a.add_argument("--pseudo"); a.add_argument("--resume")
    a = add("postprocess", "oversegmentation smoothing and component split")
    a.add_argument("--pred"); a.add_argument("--method", choices=tuple(METHODS), default="stage2")
    a.add_argument("--out")
    a = add("eval", "AP / AP50 / AP25 report")
    a.add_argument("--pred", help="one prediction directory; default: every method under <root>/pred")
    a.add_argument("--scenes"); a.add_argument("--out")
    a = add("sweep-queries", "evaluate a checkpoint at several query counts")
    a.add_argument("--checkpoint"); a.add_argument("--scenes"); a.add_argument("--out")
    a.add_argument("--queries", help="comma-separated counts (default: queries.sweep)")
    add("pipeline", "synth, lift, pretrain, pseudo-label, finetune and eval in one go")
    return p


def _set_path(doc: dict, key: str, value) -> None:
    parts = key.split(".")
    node = doc
    for k in parts[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {key}: {k} is not a section")
    node[parts[-1]] = value


def resolve_config(path, overrides=()) -> PipelineConfig:
    if path is None:
        doc = PipelineConfig().to_dict()
    elif path == "tiny":
        doc = tiny_config().to_dict()
    else:
        if not Path(path).exists():
            raise MissingInput(f"missing config file: {path}")
        doc = load_config(path).to_dict()
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_path(doc, key.strip(), value)
    return PipelineConfig.from_dict(doc)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args.config, args.set)
        run = Run(cfg, args.root)
        log("start", command=args.command, root=str(run.root), **run.prov)
        result = COMMANDS[args.command](run, args)
        if args.command == "pipeline":
            sys.stdout.write(pl.format_report(result) + "\n")
        else:
            sys.stdout.write(json.dumps(result, indent=2, sort_keys=True) + "\n")
        return EXIT_OK
    except (ConfigError, UsageError, FormatError) as e:
        log("error", kind="validation", message=str(e))
        return EXIT_VALIDATION
    except MissingInput as e:
        log("error", kind="missing_input", message=str(e))
        return EXIT_MISSING
    except Exception as e:  # noqa: BLE001 - the exit code carries the class of failure
        log("error", kind="runtime", message=f"{type(e).__name__}: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
