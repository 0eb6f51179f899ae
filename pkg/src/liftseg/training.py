"""Stage-1 / Stage-2 training driver.

Data order, query sampling and initialization are pure functions of the seed
and the step index, so a run resumed from a checkpoint continues bit-identically.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .geometry import PointCloud
from .losses import LossWeights, loss_stage1, loss_stage2
from .masks import MaskSet
from .network import (CloudContext, ModelConfig, NetworkParams, forward, init_params, load_checkpoint,
                      prepare_cloud, save_checkpoint)
from .optim import OptimState, Schedule, optimizer_step


class TrainingError(ValueError):
    pass


@dataclass
class TrainSample:
    cloud: PointCloud
    targets: MaskSet
    name: str = ""
    _ctx: CloudContext | None = field(default=None, repr=False)

    def context(self, config: ModelConfig) -> CloudContext:
        if self._ctx is None:
            self._ctx = prepare_cloud(self.cloud, config)
        return self._ctx


@dataclass
class TrainConfig:
    stage: int = 1
    steps: int = 300
    batch_size: int = 1
    queries: int = 150
    peak_lr: float = 2e-4
    weight_decay: float = 1e-4
    warmup_fraction: float = 0.1
    warmup_start: float = 0.04
    final_div: float = 100.0
    schedule: str = "one_cycle"
    seed: int = 0
    grad_clip: float = 0.0          # global-norm clip, 0 disables
    random_query_start: bool = True  # fresh FPS start point every step
    checkpoint_every: int = 0
    aux_loss: bool = False           # also supervise every intermediate decoder prediction
    trainable: tuple = ()            # parameter-name prefixes to update; empty means all
    loss_weights: dict = field(default_factory=lambda: {"obj": 2.0, "dice": 2.0, "ce": 5.0})

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise TrainingError(f"stage must be 1 or 2, got {self.stage}")
        if self.steps < 1 or self.batch_size < 1 or self.queries < 1:
            raise TrainingError("steps, batch_size and queries must be positive")
        if self.grad_clip < 0 or self.checkpoint_every < 0:
            raise TrainingError("grad_clip and checkpoint_every must be non-negative")
        LossWeights(**self.loss_weights)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(**self.loss_weights)

    def schedule_spec(self) -> Schedule:
        return Schedule(self.peak_lr, self.steps, self.warmup_fraction, self.warmup_start, self.final_div,
                        self.schedule)


@dataclass
class TrainResult:
    params: NetworkParams
    state: OptimState
    history: list


def step_plan(config: TrainConfig, n_samples: int, step: int) -> list:
    """(sample index, fps seed) pairs used at ``step``.

    Samples are drawn epoch by epoch from a seeded permutation; the FPS seed
    is derived from (seed, step, slot).
    """
    out = []
    for slot in range(config.batch_size):
        k = step * config.batch_size + slot
        epoch, pos = divmod(k, n_samples)
        perm = np.random.default_rng([config.seed, 7919, epoch]).permutation(n_samples)
        fps_seed = int(np.random.default_rng([config.seed, step, slot]).integers(2**31)) \
            if config.random_query_start else config.seed
        out.append((int(perm[pos]), fps_seed))
    return out


def sample_loss(params: NetworkParams, sample: TrainSample, config: TrainConfig, fps_seed: int,
                tensors: dict | None = None):
    """Forward + loss for one sample.  Returns ``(loss tensor, terms, tensors)``."""
    P = tensors if tensors is not None else params.tensors(tuple(config.trainable) or None)
    ctx = sample.context(params.config)
    Q = min(config.queries, ctx.n_points)
    out = forward(ctx, P, params.config, Q, seed=fps_seed, with_aux=config.aux_loss)
    fn = loss_stage1 if config.stage == 1 else loss_stage2
    loss, terms = fn(out, sample.targets, config.weights)
    if config.aux_loss and not terms.get("skipped"):
        # each intermediate prediction gets its own matching, as for the final one
        for heat, logits in out["aux"]:
            aux_loss, _ = fn({"heatmaps": heat, "logits": logits}, sample.targets, config.weights)
            loss = loss + aux_loss
    return loss, terms, P


def _clip(grads: dict, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm and np.isfinite(norm) and norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


def train_step(params: NetworkParams, state: OptimState, dataset: list, config: TrainConfig) -> dict:
    """One optimizer step (gradient averaged over the batch); returns the log record."""
    step = state.step
    lr = state.schedule.rate(step)
    grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    totals = {"dice": 0.0, "ce": 0.0, "mask": 0.0, "obj": 0.0, "total": 0.0}
    used = 0
    names = []
    for idx, fps_seed in step_plan(config, len(dataset), step):
        sample = dataset[idx]
        names.append(sample.name or str(idx))
        loss, terms, P = sample_loss(params, sample, config, fps_seed)
        if terms.get("skipped"):
            continue
        ad.backward(loss)
        for k, t in P.items():
            if t.grad is not None:
                grads[k] += t.grad
        for k in totals:
            totals[k] += terms[k]
        used += 1
    rec = {"step": step, "lr": lr, "samples": names, "used": used}
    if used == 0:
        # nothing supervised this step: advance the clock without touching params
        state.step += 1
        rec.update({k: 0.0 for k in totals}, skipped_batch=True, skipped_updates=state.skipped)
        return rec
    for g in grads.values():
        g /= used
    if config.trainable:
        prefixes = tuple(config.trainable)
        grads = {k: g for k, g in grads.items() if k.startswith(prefixes)}
    rec["grad_norm"] = _clip(grads, config.grad_clip)
    before = state.skipped
    optimizer_step(params.arrays, grads, state)
    rec.update({k: v / used for k, v in totals.items()})
    rec["skipped_batch"] = False
    rec["nonfinite_skip"] = state.skipped > before
    rec["skipped_updates"] = state.skipped
    return rec


def checkpoint_meta(config: TrainConfig, state: OptimState, provenance: dict | None = None) -> dict:
    return {"train_config": asdict(config), "optim": state.hyper(), "provenance": provenance or {}}


def save_training_checkpoint(path, params: NetworkParams, state: OptimState, config: TrainConfig,
                             provenance: dict | None = None) -> None:
    save_checkpoint(path, params, state.moment_arrays(), checkpoint_meta(config, state, provenance))


def load_training_checkpoint(path):
    """Returns ``(params, state or None, meta)``; state is None for weight-only files."""
    params, extra, meta = load_checkpoint(path)
    state = OptimState.restore(meta["optim"], extra) if "optim" in meta else None
    return params, state, meta


def train(stage: int, dataset, config: TrainConfig, model_config: ModelConfig | None = None,
          params: NetworkParams | None = None, state: OptimState | None = None,
          out_dir=None, provenance: dict | None = None, log_fn=None, stop_after: int | None = None) -> TrainResult:
    """Run ``config.steps`` optimizer steps (or until ``stop_after`` steps in total).

    ``params`` initialises the weights (Stage 2 passes the Stage-1 result);
    passing ``state`` resumes.  With ``out_dir`` a ``metrics.jsonl`` log and
    checkpoints (``step_XXXXXX.ckpt`` every ``checkpoint_every`` steps plus
    ``final.ckpt``) are written.
    """
    dataset = list(dataset)
    if not dataset:
        raise TrainingError("training dataset is empty")
    if stage != config.stage:
        config = TrainConfig(**{**asdict(config), "stage": stage})
    if params is None:
        params = init_params(model_config or ModelConfig(), seed=config.seed)
    if state is None:
        state = OptimState(config.schedule_spec(), weight_decay=config.weight_decay)
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "metrics.jsonl", "a" if state.step else "w")
    history = []
    end = config.steps if stop_after is None else min(config.steps, stop_after)
    try:
        while state.step < end:
            rec = train_step(params, state, dataset, config)
            history.append(rec)
            if log_file is not None:
                log_file.write(json.dumps(rec, sort_keys=True) + "\n")
                log_file.flush()
            if log_fn is not None:
                log_fn(rec)
            if out is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                save_training_checkpoint(out / f"step_{state.step:06d}.ckpt", params, state, config, provenance)
    finally:
        if log_file is not None:
            log_file.close()
    if out is not None:
        save_training_checkpoint(out / "final.ckpt", params, state, config, provenance)
    return TrainResult(params, state, history)
