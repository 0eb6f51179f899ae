"""Pipeline configuration: one JSON document, schema-checked, unknown keys rejected.

Defaults are the full-scale values.  :func:`tiny_config` gives the desk-scale
settings used by the bundled example and the acceptance suite.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from . import __version__

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    out_dir: str = "run"


@dataclass
class SynthConfig:
    seed: int = 0
    train_scenes: int = 6
    eval_scenes: int = 8
    unlabeled_scenes: int = 0   # extra full clouds used only as Stage-2 pseudo-label sources
    object_count: tuple = (3, 5)
    room_extent: tuple = (4.0, 4.0, 2.0)
    points_per_object: tuple = (1500, 3000)
    frames_per_scene: int = 8
    masks_per_frame_target: int = 50
    image_size: tuple = (64, 48)
    focal_length: float = 44.0
    structure_spacing: float = 0.035
    object_size: tuple = (0.3, 0.8)
    perturb: bool = True
    erosion_px: int = 1
    split_prob: float = 0.25
    merge_prob: float = 0.15
    score_noise: float = 0.05


@dataclass
class GeometryConfig:
    voxel_size: float = 0.02
    fps_seed: int = 0
    fourier_bands: int = 6
    coordinate_scale: float = 1.0   # positions are divided by this factor on load


@dataclass
class ModelSection:
    feature_dim: int = 64
    levels: int = 3
    decoder_layers: int = 3
    heads: int = 4
    ffn_mult: int = 2
    heatmap_scale_init: float = 10.0
    masked_attention: bool = True


@dataclass
class LossConfig:
    obj: float = 2.0
    dice: float = 2.0
    ce: float = 5.0


@dataclass
class StageConfig:
    steps: int = 1000
    batch_size: int = 1
    peak_lr: float = 2e-4
    weight_decay: float = 1e-4
    warmup_fraction: float = 0.1
    warmup_start: float = 0.04
    final_div: float = 100.0
    schedule: str = "one_cycle"
    grad_clip: float = 0.0
    random_query_start: bool = True
    aux_loss: bool = False
    trainable: tuple = ()
    checkpoint_every: int = 0


@dataclass
class LiftConfig:
    min_points: int = 50


@dataclass
class PseudoConfig:
    tau_c: float = 0.75
    dbscan_eps: float = 0.05
    dbscan_min_pts: int = 10
    min_points: int = 10
    resolve_overlaps: bool = True


@dataclass
class PostprocessConfig:
    enabled: bool = True
    k_nn: int = 10
    fz_k: float = 0.02
    min_segment: int = 20
    dbscan_eps: float = 0.05
    dbscan_min_pts: int = 10
    min_points: int = 1


@dataclass
class Sam3dConfig:
    theta: float = 0.3
    radius: float | None = None     # None means 2 * voxel_size
    min_points: int = 1


@dataclass
class QueryConfig:
    train: int = 150
    infer: int = 400
    sweep: tuple = (50, 100, 150, 200, 300, 400)


@dataclass
class EvalConfig:
    nms_iou: float | None = None


@dataclass
class PipelineConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    workers: int = 1
    paths: PathsConfig = field(default_factory=PathsConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossConfig = field(default_factory=LossConfig)
    stage1: StageConfig = field(default_factory=StageConfig)
    stage2: StageConfig = field(default_factory=lambda: StageConfig(peak_lr=1e-4))
    lift: LiftConfig = field(default_factory=LiftConfig)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    sam3d: Sam3dConfig = field(default_factory=Sam3dConfig)
    queries: QueryConfig = field(default_factory=QueryConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        return _build(cls, doc, "config")

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def provenance(self) -> dict:
        return {"config_hash": self.config_hash(), "code_version": __version__}

    @property
    def sam3d_radius(self) -> float:
        return self.sam3d.radius if self.sam3d.radius is not None else 2.0 * self.geometry.voxel_size


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, doc, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object, got {type(doc).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    defaults = cls.__new__(cls)
    for name, f in known.items():
        if name not in doc:
            continue
        val = doc[name]
        default = f.default_factory() if f.default_factory is not field().default_factory else f.default
        if is_dataclass(default):
            val = _build(type(default), val, f"{where}.{name}")
        elif isinstance(default, tuple) and isinstance(val, list):
            val = tuple(val)
        elif isinstance(default, bool) and not isinstance(val, bool):
            raise ConfigError(f"{where}.{name}: expected true/false, got {val!r}")
        elif isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{where}.{name}: expected a number, got {val!r}")
            if isinstance(default, int) and not isinstance(default, bool) and isinstance(val, float) \
                    and not val.is_integer():
                raise ConfigError(f"{where}.{name}: expected an integer, got {val!r}")
            val = type(default)(val)
        kwargs[name] = val
    del defaults
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


def validate(c: PipelineConfig) -> None:
    _require(c.schema_version == SCHEMA_VERSION, f"unsupported schema_version {c.schema_version}")
    _require(c.workers >= 1, "workers must be >= 1")
    g = c.geometry
    _require(g.voxel_size > 0 and math.isfinite(g.voxel_size), f"geometry.voxel_size must be positive, got {g.voxel_size}")
    _require(g.fourier_bands >= 1, "geometry.fourier_bands must be >= 1")
    _require(g.coordinate_scale > 0, "geometry.coordinate_scale must be positive")
    m = c.model
    _require(m.feature_dim >= 1 and m.feature_dim % m.heads == 0, "model.feature_dim must be a positive multiple of heads")
    _require(m.levels >= 1 and m.decoder_layers >= 0, "model.levels >= 1 and decoder_layers >= 0 required")
    _require(min(c.loss.obj, c.loss.dice, c.loss.ce) >= 0, "loss weights must be non-negative")
    for name in ("stage1", "stage2"):
        s = getattr(c, name)
        _require(s.steps >= 1 and s.batch_size >= 1, f"{name}.steps and batch_size must be >= 1")
        _require(s.peak_lr > 0 and s.weight_decay >= 0, f"{name}: peak_lr > 0 and weight_decay >= 0 required")
        _require(0 <= s.warmup_fraction < 1, f"{name}.warmup_fraction must lie in [0, 1)")
        _require(s.schedule in ("one_cycle", "constant"), f"{name}.schedule must be one_cycle or constant")
    _require(c.lift.min_points >= 1, "lift.min_points must be >= 1")
    p = c.pseudo
    _require(0 <= p.tau_c <= 1, f"pseudo.tau_c must lie in [0, 1], got {p.tau_c}")
    _require(p.dbscan_eps > 0 and p.dbscan_min_pts >= 1, "pseudo DBSCAN eps > 0 and min_pts >= 1 required")
    pp = c.postprocess
    _require(pp.k_nn >= 1 and pp.fz_k > 0 and pp.min_segment >= 0, "postprocess: k_nn >= 1, fz_k > 0 required")
    _require(pp.dbscan_eps > 0 and pp.dbscan_min_pts >= 1, "postprocess DBSCAN eps > 0 and min_pts >= 1 required")
    _require(0 < c.sam3d.theta <= 1, "sam3d.theta must lie in (0, 1]")
    _require(c.sam3d.radius is None or c.sam3d.radius > 0, "sam3d.radius must be positive")
    q = c.queries
    _require(q.train >= 1 and q.infer >= 1 and all(v >= 1 for v in q.sweep), "query counts must be >= 1")
    _require(c.eval.nms_iou is None or 0 <= c.eval.nms_iou <= 1, "eval.nms_iou must lie in [0, 1]")
    s = c.synth
    _require(s.train_scenes >= 1 and s.eval_scenes >= 1, "synth scene counts must be >= 1")
    _require(s.unlabeled_scenes >= 0, "synth.unlabeled_scenes must be >= 0")


def load_config(path) -> PipelineConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return PipelineConfig.from_dict(doc)


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def tiny_config(**overrides) -> PipelineConfig:
    """Desk-scale settings: small rooms, coarse voxels, a narrow network."""
    doc = {
        "synth": {"room_extent": [3.2, 3.2, 1.6], "object_size": [0.25, 0.6], "object_count": [3, 4],
                  "train_scenes": 6, "eval_scenes": 8, "unlabeled_scenes": 60, "perturb": False},
        "geometry": {"voxel_size": 0.08},
        "model": {"feature_dim": 32, "levels": 3, "decoder_layers": 2, "heads": 4},
        "stage1": {"steps": 800, "batch_size": 2, "peak_lr": 3e-3, "weight_decay": 0.0, "grad_clip": 1.0,
                   "aux_loss": True},
        "stage2": {"steps": 400, "batch_size": 1, "peak_lr": 1e-3, "weight_decay": 0.0, "grad_clip": 1.0,
                   "aux_loss": True, "trainable": ["bb", "point_proj", "mask."]},
        "lift": {"min_points": 10},
        "pseudo": {"tau_c": 0.5, "dbscan_eps": 0.16, "dbscan_min_pts": 3, "min_points": 25},
        "postprocess": {"k_nn": 10, "fz_k": 0.02, "min_segment": 8, "dbscan_eps": 0.16, "dbscan_min_pts": 3,
                        "min_points": 5},
        "queries": {"train": 40, "infer": 40, "sweep": [10, 20, 40, 80]},
    }
    for key, val in overrides.items():
        section, _, name = key.partition("__")
        if name:
            doc.setdefault(section, {})[name] = val
        else:
            doc[section] = val
    return PipelineConfig.from_dict(doc)
