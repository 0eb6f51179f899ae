"""Synthetic indoor scenes: a room shell with primitive objects, rendered RGB-D
frames and imperfect 2D mask sets with per-mask scores.

Everything is a pure function of :class:`SynthSpec`.
"""

from __future__ import annotations

import colorsys
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataio import FrameBundle, SceneRecord, quantize_color, quantize_depth
from .geometry import CameraIntrinsics, DepthFrame, PointCloud, look_at_pose, project_points
from .masks import MaskSet, MaskSet2D

STRUCTURAL_KINDS = ("floor", "wall_x0", "wall_x1", "wall_y0", "wall_y1")


class GenerationError(RuntimeError):
    pass


@dataclass
class PerturbSpec:
    enabled: bool = False
    erosion_px: int = 1
    split_prob: float = 0.25
    keep_whole_prob: float = 0.5
    merge_prob: float = 0.15
    score_noise: float = 0.05
    min_mask_pixels: int = 4


@dataclass
class SynthSpec:
    seed: int = 0
    object_count: tuple = (3, 5)
    room_extent: tuple = (4.0, 4.0, 2.0)
    points_per_object: tuple = (1500, 3000)
    frames_per_scene: int = 8
    masks_per_frame_target: int = 50
    image_size: tuple = (64, 48)
    focal_length: float = 44.0
    structure_spacing: float = 0.035
    object_size: tuple = (0.3, 0.8)
    camera_height: float = 1.3
    camera_radius_fraction: float = 0.33
    color_noise: float = 0.02
    placement_retries: int = 500
    perturb: PerturbSpec = field(default_factory=PerturbSpec)

    def __post_init__(self):
        if isinstance(self.perturb, dict):
            self.perturb = PerturbSpec(**self.perturb)
        for name in ("object_count", "points_per_object", "object_size"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"SynthSpec.{name} must be a non-empty positive range, got {(lo, hi)}")
        if min(self.room_extent) <= 0 or self.frames_per_scene < 1 or self.masks_per_frame_target < 1:
            raise ValueError("room extents, frames_per_scene and masks_per_frame_target must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# geometry sampling
# ---------------------------------------------------------------------------


def _jittered_grid(rng, u_len, v_len, spacing):
    nu, nv = max(1, int(round(u_len / spacing))), max(1, int(round(v_len / spacing)))
    gu, gv = np.meshgrid((np.arange(nu) + 0.5) * u_len / nu, (np.arange(nv) + 0.5) * v_len / nv, indexing="ij")
    ju = rng.uniform(-0.4, 0.4, gu.shape) * u_len / nu
    jv = rng.uniform(-0.4, 0.4, gv.shape) * v_len / nv
    return (gu + ju).ravel(), (gv + jv).ravel()


def _room_shell(rng, extent, spacing):
    X, Y, Z = extent
    parts = []
    u, v = _jittered_grid(rng, X, Y, spacing)
    parts.append((np.stack([u, v, np.zeros_like(u)], 1), np.array([0.0, 0.0, 1.0])))
    u, v = _jittered_grid(rng, Y, Z, spacing)
    parts.append((np.stack([np.zeros_like(u), u, v], 1), np.array([1.0, 0.0, 0.0])))
    parts.append((np.stack([np.full_like(u, X), u, v], 1), np.array([-1.0, 0.0, 0.0])))
    u, v = _jittered_grid(rng, X, Z, spacing)
    parts.append((np.stack([u, np.zeros_like(u), v], 1), np.array([0.0, 1.0, 0.0])))
    parts.append((np.stack([u, np.full_like(u, Y), v], 1), np.array([0.0, -1.0, 0.0])))
    return [(p, np.tile(n, (len(p), 1))) for p, n in parts]


def _sample_box(rng, n, dims, yaw):
    dx, dy, dz = dims
    faces = [  # (area, sampler) for the five faces that are not on the floor
        (dx * dy, lambda m: (np.stack([rng.uniform(-dx / 2, dx / 2, m), rng.uniform(-dy / 2, dy / 2, m), np.full(m, dz)], 1), (0, 0, 1))),
        (dy * dz, lambda m: (np.stack([np.full(m, dx / 2), rng.uniform(-dy / 2, dy / 2, m), rng.uniform(0, dz, m)], 1), (1, 0, 0))),
        (dy * dz, lambda m: (np.stack([np.full(m, -dx / 2), rng.uniform(-dy / 2, dy / 2, m), rng.uniform(0, dz, m)], 1), (-1, 0, 0))),
        (dx * dz, lambda m: (np.stack([rng.uniform(-dx / 2, dx / 2, m), np.full(m, dy / 2), rng.uniform(0, dz, m)], 1), (0, 1, 0))),
        (dx * dz, lambda m: (np.stack([rng.uniform(-dx / 2, dx / 2, m), np.full(m, -dy / 2), rng.uniform(0, dz, m)], 1), (0, -1, 0))),
    ]
    areas = np.array([a for a, _ in faces])
    counts = rng.multinomial(n, areas / areas.sum())
    pts, nrm = [], []
    for (_, sampler), m in zip(faces, counts):
        p, nv = sampler(int(m))
        pts.append(p)
        nrm.append(np.tile(np.asarray(nv, dtype=float), (len(p), 1)))
    c, s = np.cos(yaw), np.sin(yaw)
    Rz = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    return np.concatenate(pts) @ Rz.T, np.concatenate(nrm) @ Rz.T, float(areas.sum())


def _sample_sphere(rng, n, radius):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * radius + [0, 0, radius], d, 4 * np.pi * radius**2


def _sample_cylinder(rng, n, radius, height):
    side, top = 2 * np.pi * radius * height, np.pi * radius**2
    n_top = rng.binomial(n, top / (side + top))
    th = rng.uniform(0, 2 * np.pi, n - n_top)
    side_p = np.stack([radius * np.cos(th), radius * np.sin(th), rng.uniform(0, height, len(th))], 1)
    side_n = np.stack([np.cos(th), np.sin(th), np.zeros_like(th)], 1)
    r = radius * np.sqrt(rng.uniform(0, 1, n_top))
    th2 = rng.uniform(0, 2 * np.pi, n_top)
    top_p = np.stack([r * np.cos(th2), r * np.sin(th2), np.full(n_top, height)], 1)
    top_n = np.tile([0.0, 0.0, 1.0], (n_top, 1))
    return np.concatenate([side_p, top_p]), np.concatenate([side_n, top_n]), side + top


def _palette(rng, k):
    hues = (rng.uniform() + np.arange(k) / k) % 1.0
    rng.shuffle(hues)
    sat = rng.uniform(0.55, 0.9, k)
    val = rng.uniform(0.55, 0.95, k)
    return np.array([colorsys.hsv_to_rgb(h, s, v) for h, s, v in zip(hues, sat, val)])


def _place_objects(spec, rng):
    X, Y, _ = spec.room_extent
    n_obj = int(rng.integers(spec.object_count[0], spec.object_count[1] + 1))
    placed = []
    for _ in range(n_obj):
        kind = rng.choice(["box", "sphere", "cylinder"])
        size = rng.uniform(*spec.object_size)
        if kind == "box":
            dims = (size, rng.uniform(0.5, 1.0) * size, rng.uniform(0.5, 1.2) * size)
            geom = {"dims": dims, "yaw": float(rng.uniform(0, np.pi))}
            foot = 0.5 * np.hypot(dims[0], dims[1])
        elif kind == "sphere":
            geom = {"radius": size / 2}
            foot = size / 2
        else:
            geom = {"radius": 0.35 * size, "height": rng.uniform(0.7, 1.5) * size}
            foot = 0.35 * size
        for _attempt in range(spec.placement_retries):
            xy = rng.uniform([foot + 0.1, foot + 0.1], [X - foot - 0.1, Y - foot - 0.1])
            if all(np.linalg.norm(xy - q["xy"]) > foot + q["foot"] + 0.1 for q in placed):
                break
        else:
            raise GenerationError(
                f"could not place object {len(placed)} ({kind}, footprint {foot:.2f} m) after "
                f"{spec.placement_retries} attempts; reduce object_count or object_size"
            )
        placed.append({"kind": str(kind), "xy": xy, "foot": foot, **geom})
    return placed


def build_scene_cloud(spec: SynthSpec, rng):
    """Dense surface samples with per-sample element label, spacing and normal."""
    shell = _room_shell(rng, spec.room_extent, spec.structure_spacing)
    objects = _place_objects(spec, rng)
    palette = _palette(rng, len(STRUCTURAL_KINDS) + len(objects))
    pos, nrm, lab, spc = [], [], [], []
    for i, (p, n) in enumerate(shell):
        pos.append(p)
        nrm.append(n)
        lab.append(np.full(len(p), i))
        spc.append(np.full(len(p), spec.structure_spacing))
    for j, obj in enumerate(objects):
        n = int(rng.integers(spec.points_per_object[0], spec.points_per_object[1] + 1))
        if obj["kind"] == "box":
            p, nv, area = _sample_box(rng, n, obj["dims"], obj["yaw"])
        elif obj["kind"] == "sphere":
            p, nv, area = _sample_sphere(rng, n, obj["radius"])
        else:
            p, nv, area = _sample_cylinder(rng, n, obj["radius"], obj["height"])
        p = p + [obj["xy"][0], obj["xy"][1], 0.0]
        pos.append(p)
        nrm.append(nv)
        lab.append(np.full(len(p), len(STRUCTURAL_KINDS) + j))
        spc.append(np.full(len(p), np.sqrt(area / n)))
    labels = np.concatenate(lab)
    colors = palette[labels] + rng.normal(0, spec.color_noise, (len(labels), 3))
    cloud = PointCloud(np.concatenate(pos), np.clip(colors, 0, 1), np.concatenate(nrm))
    kinds = list(STRUCTURAL_KINDS) + [o["kind"] for o in objects]
    return cloud, labels, np.concatenate(spc), kinds, objects


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def splat_radius(spacing, z, focal):
    """Half-width (pixels) of the square footprint covering a sample's surface patch."""
    footprint = focal * spacing / np.maximum(z, 1e-9)
    return np.clip(np.ceil(footprint / 2 - 0.5), 0, 3).astype(np.int64)


def render_frame(cloud: PointCloud, labels, spacing, K: CameraIntrinsics, pose, width, height, near=0.05):
    """Z-buffered splatting of surface samples.

    Returns raw camera depth (0 = empty), color and label rasters, plus the
    index of the sample that won each pixel (-1 = empty).
    """
    uv, z = project_points(K, pose, cloud.positions)
    front = z > near
    idx = np.flatnonzero(front)
    u0 = np.round(uv[idx, 0]).astype(np.int64)
    v0 = np.round(uv[idx, 1]).astype(np.int64)
    rad = splat_radius(spacing[idx], z[idx], K.fx)
    cand_pix, cand_src = [], []
    rmax = int(rad.max()) if len(rad) else 0
    for dv in range(-rmax, rmax + 1):
        for du in range(-rmax, rmax + 1):
            ok = rad >= max(abs(du), abs(dv))
            uu, vv = u0[ok] + du, v0[ok] + dv
            inside = (uu >= 0) & (uu < width) & (vv >= 0) & (vv < height)
            cand_pix.append(vv[inside] * width + uu[inside])
            cand_src.append(idx[ok][inside])
    pix = np.concatenate(cand_pix) if cand_pix else np.zeros(0, dtype=np.int64)
    src = np.concatenate(cand_src) if cand_src else np.zeros(0, dtype=np.int64)
    order = np.lexsort((src, z[src], pix))
    pix, src = pix[order], src[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    winner = np.full(width * height, -1, dtype=np.int64)
    winner[pix[first]] = src[first]
    hit = winner >= 0
    depth = np.zeros(width * height)
    depth[hit] = z[winner[hit]]
    color = np.zeros((width * height, 3))
    color[hit] = cloud.colors[winner[hit]]
    lab = np.full(width * height, -1, dtype=np.int64)
    lab[hit] = np.asarray(labels)[winner[hit]]
    shape = (height, width)
    return depth.reshape(shape), color.reshape(shape + (3,)), lab.reshape(shape), winner.reshape(shape)


def camera_poses(spec: SynthSpec):
    X, Y, _ = spec.room_extent
    center = np.array([X / 2, Y / 2])
    r_cam = spec.camera_radius_fraction * min(X, Y)
    poses = []
    for k in range(spec.frames_per_scene):
        th = 2 * np.pi * k / spec.frames_per_scene
        eye = [center[0] + r_cam * np.cos(th), center[1] + r_cam * np.sin(th), spec.camera_height]
        poses.append(look_at_pose(eye, [center[0], center[1], 0.35]))
    return poses


# ---------------------------------------------------------------------------
# 2D masks
# ---------------------------------------------------------------------------


def _erode(mask, label_map, steps):
    m = mask.copy()
    for _ in range(steps):
        pad = np.pad(m, 1, constant_values=False)
        m = m & pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    return m


def _adjacent(a, b):
    grown = a.copy()
    grown[1:] |= a[:-1]
    grown[:-1] |= a[1:]
    grown[:, 1:] |= a[:, :-1]
    grown[:, :-1] |= a[:, 1:]
    return bool((grown & b).any())


def make_masks2d(label_map: np.ndarray, spec: SynthSpec, rng) -> MaskSet2D:
    """2D mask set for a rendered label raster; imperfect when ``spec.perturb.enabled``."""
    h, w = label_map.shape
    pt = spec.perturb
    visible = [int(i) for i in np.unique(label_map) if i >= 0]
    masks, scores = [], []
    if not pt.enabled:
        for i in visible:
            masks.append(label_map == i)
            scores.append(1.0)
    else:
        base = []
        for i in visible:
            m = label_map == i
            if pt.erosion_px > 0:
                eroded = _erode(m, label_map, pt.erosion_px)
                if eroded.sum() >= pt.min_mask_pixels:
                    m = eroded
            if m.sum() < pt.min_mask_pixels:
                continue
            base.append(m)
        for m in base:
            s_whole = rng.uniform(0.85, 1.0)
            if rng.uniform() < pt.split_prob and m.sum() >= 2 * pt.min_mask_pixels:
                vv, uu = np.nonzero(m)
                ang = rng.uniform(0, np.pi)
                proj = (uu - uu.mean()) * np.cos(ang) + (vv - vv.mean()) * np.sin(ang)
                side = np.zeros_like(m)
                side[vv[proj > 0], uu[proj > 0]] = True
                parts = [m & side, m & ~side]
                if min(p.sum() for p in parts) >= pt.min_mask_pixels:
                    for p in parts:
                        masks.append(p)
                        scores.append(rng.uniform(0.7, 1.0))
                    if rng.uniform() < pt.keep_whole_prob:
                        masks.append(m)
                        scores.append(s_whole)
                    continue
            masks.append(m)
            scores.append(s_whole)
        for a in range(len(base)):
            for b in range(a + 1, len(base)):
                if rng.uniform() < pt.merge_prob and _adjacent(base[a], base[b]):
                    masks.append(base[a] | base[b])
                    scores.append(rng.uniform(0.6, 0.95))
        scores = list(np.clip(np.array(scores) + rng.normal(0, pt.score_noise, len(scores)), 0, 1))
        if len(masks) > spec.masks_per_frame_target:
            keep = np.sort(np.argsort(-np.array(scores), kind="stable")[: spec.masks_per_frame_target])
            masks = [masks[k] for k in keep]
            scores = [scores[k] for k in keep]
    rasters = np.stack(masks) if masks else np.zeros((0, h, w), dtype=bool)
    return MaskSet2D(w, h, rasters, np.arange(len(masks)), np.asarray(scores, dtype=np.float64))


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------


def synth_generate(spec: SynthSpec, name: str | None = None) -> SceneRecord:
    rng = np.random.default_rng(spec.seed)
    cloud, labels, spacing, kinds, objects = build_scene_cloud(spec, rng)
    n_struct = len(STRUCTURAL_KINDS)
    gt = MaskSet.from_labels(labels, structural=set(range(n_struct)))
    W, H = spec.image_size
    K = CameraIntrinsics(spec.focal_length, spec.focal_length, (W - 1) / 2, (H - 1) / 2)
    frames = []
    for k, pose in enumerate(camera_poses(spec)):
        depth, color, lab, _ = render_frame(cloud, labels, spacing, K, pose, W, H)
        frame = DepthFrame(quantize_depth(depth), quantize_color(color))
        ms = make_masks2d(lab, spec, rng)
        frames.append(FrameBundle(frame, K, pose, ms, f"frame_{k:03d}"))
    return SceneRecord(name or f"scene_{spec.seed:04d}", cloud, gt, frames, kinds)


def scene_specs(base: SynthSpec, count: int, offset: int = 0) -> list[SynthSpec]:
    """``count`` specs differing only in seed (``base.seed + offset + i``)."""
    out = []
    for i in range(count):
        d = base.to_dict()
        d["seed"] = base.seed + offset + i
        out.append(SynthSpec(**d))
    return out
