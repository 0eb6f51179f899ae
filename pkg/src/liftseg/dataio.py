"""File formats: frames (PGM/PPM + text matrices + JSON masks), PLY clouds, mask sidecars.

Byte-level layouts are documented in ``docs/formats.md``.
"""

from __future__ import annotations

import json
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, DepthFrame, GeometryError, PointCloud, RigidPose
from .masks import MaskSet, MaskSet2D, rle_decode, rle_encode

FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed or inconsistent artifact on disk."""


@dataclass
class FrameBundle:
    depth_frame: DepthFrame
    intrinsics: CameraIntrinsics
    pose: RigidPose
    masks: MaskSet2D
    frame_id: str

    def __post_init__(self):
        if (self.masks.height, self.masks.width) != self.depth_frame.depth.shape:
            raise FormatError(
                f"frame {self.frame_id}: mask raster {self.masks.height}x{self.masks.width} does not "
                f"match depth {self.depth_frame.height}x{self.depth_frame.width}"
            )

    def equals(self, other: "FrameBundle") -> bool:
        return (
            self.frame_id == other.frame_id
            and np.array_equal(self.depth_frame.depth, other.depth_frame.depth)
            and np.array_equal(self.depth_frame.color, other.depth_frame.color)
            and self.intrinsics == other.intrinsics
            and self.pose == other.pose
            and self.masks.equals(other.masks)
        )


@dataclass
class SceneRecord:
    name: str
    cloud: PointCloud
    gt_masks: MaskSet | None = None
    frames: list = field(default_factory=list)
    kinds: list | None = None


# ---------------------------------------------------------------------------
# netpbm
# ---------------------------------------------------------------------------

_PNM_HEADER = re.compile(rb"\A(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def _read_pnm(path, magic: bytes):
    data = Path(path).read_bytes()
    m = _PNM_HEADER.match(data)
    if not m or m.group(1) != magic:
        raise FormatError(f"{path}: malformed header, expected {magic.decode()} netpbm")
    width, height, maxval = (int(m.group(i)) for i in (2, 3, 4))
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * channels * dtype.itemsize
    body = data[m.end():]
    if len(body) < expected:
        raise FormatError(f"{path}: truncated, {len(body)} of {expected} payload bytes")
    arr = np.frombuffer(body[:expected], dtype=dtype)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape), maxval


def save_depth_pgm(path, depth_m: np.ndarray) -> None:
    """16-bit big-endian P5, millimeters, 0 = invalid."""
    mm = np.round(np.asarray(depth_m) * 1000.0)
    if np.any(mm > 65535):
        raise FormatError("depth exceeds the 65.535 m range of the 16-bit format")
    h, w = mm.shape
    Path(path).write_bytes(b"P5\n%d %d\n65535\n" % (w, h) + mm.astype(">u2").tobytes())


def load_depth_pgm(path) -> np.ndarray:
    arr, maxval = _read_pnm(path, b"P5")
    if maxval != 65535:
        raise FormatError(f"{path}: depth maxval must be 65535, got {maxval}")
    return arr.astype(np.float64) / 1000.0


def save_color_ppm(path, color: np.ndarray) -> None:
    rgb = np.round(np.clip(np.asarray(color), 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes())


def load_color_ppm(path) -> np.ndarray:
    arr, maxval = _read_pnm(path, b"P6")
    if maxval != 255:
        raise FormatError(f"{path}: color maxval must be 255, got {maxval}")
    return arr.astype(np.float64) / 255.0


def quantize_depth(depth_m: np.ndarray) -> np.ndarray:
    """Depth values exactly representable by the on-disk format."""
    return np.round(np.asarray(depth_m) * 1000.0) / 1000.0


def quantize_color(color: np.ndarray) -> np.ndarray:
    return np.round(np.clip(color, 0.0, 1.0) * 255.0) / 255.0


# ---------------------------------------------------------------------------
# text matrices
# ---------------------------------------------------------------------------


def save_matrix(path, M: np.ndarray, comment: str | None = None) -> None:
    lines = [f"# {comment}"] if comment else []
    lines += [" ".join(repr(float(x)) for x in row) for row in np.atleast_2d(M)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_matrix(path, shape: tuple[int, int]) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            rows.append([float(x) for x in line.split()])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: not a number ({exc})") from None
    M = np.array(rows, dtype=np.float64) if rows else np.zeros((0, 0))
    if M.shape != shape:
        raise FormatError(f"{path}: expected a {shape[0]}x{shape[1]} matrix, got {M.shape}")
    return M


def load_intrinsics(path) -> CameraIntrinsics:
    try:
        return CameraIntrinsics.from_matrix(load_matrix(path, (3, 3)))
    except GeometryError as exc:
        raise FormatError(f"{path}: {exc}") from None


def load_pose(path, tol: float = 1e-6) -> RigidPose:
    M = load_matrix(path, (3, 4))
    pose = RigidPose(M[:, :3], M[:, 3])
    try:
        pose.validate(tol)
    except GeometryError as exc:
        raise FormatError(f"{path}: orthonormality error: {exc}") from None
    return pose


# ---------------------------------------------------------------------------
# 2D mask sets
# ---------------------------------------------------------------------------


def masks2d_to_json(ms: MaskSet2D) -> dict:
    return {
        "format": "liftseg.masks2d",
        "version": FORMAT_VERSION,
        "width": ms.width,
        "height": ms.height,
        "masks": [
            {"mask_id": int(i), "score": float(s), "rle": rle_encode(r)}
            for i, s, r in zip(ms.ids, ms.scores, ms.rasters)
        ],
    }


def masks2d_from_json(doc: dict, where: str = "<masks>") -> MaskSet2D:
    try:
        w, h = int(doc["width"]), int(doc["height"])
        entries = doc["masks"]
        rasters = [rle_decode(e["rle"], w * h).reshape(h, w) for e in entries]
        ids = [int(e["mask_id"]) for e in entries]
        scores = [float(e["score"]) for e in entries]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{where}: malformed mask document ({exc})") from None
    arr = np.stack(rasters) if rasters else np.zeros((0, h, w), dtype=bool)
    return MaskSet2D(w, h, arr, ids, scores)


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None


# ---------------------------------------------------------------------------
# frame bundles
# ---------------------------------------------------------------------------


def frame_paths(directory, frame_id: str) -> dict:
    d = Path(directory)
    return {
        "depth": d / f"{frame_id}.depth.pgm",
        "color": d / f"{frame_id}.color.ppm",
        "intrinsics": d / f"{frame_id}.K.txt",
        "pose": d / f"{frame_id}.pose.txt",
        "masks": d / f"{frame_id}.masks.json",
    }


def save_frame_bundle(bundle: FrameBundle, directory) -> dict:
    paths = frame_paths(directory, bundle.frame_id)
    Path(directory).mkdir(parents=True, exist_ok=True)
    save_depth_pgm(paths["depth"], bundle.depth_frame.depth)
    save_color_ppm(paths["color"], bundle.depth_frame.color)
    save_matrix(paths["intrinsics"], bundle.intrinsics.matrix, "intrinsics K (row-major 3x3)")
    save_matrix(paths["pose"], bundle.pose.matrix, "world-to-camera [R|t] (row-major 3x4)")
    write_json(paths["masks"], masks2d_to_json(bundle.masks))
    return paths


def load_frame_bundle(directory, frame_id: str) -> FrameBundle:
    paths = frame_paths(directory, frame_id)
    for key, p in paths.items():
        if not p.exists():
            raise FileNotFoundError(f"frame {frame_id}: missing {key} file {p}")
    depth = load_depth_pgm(paths["depth"])
    color = load_color_ppm(paths["color"])
    if color.shape[:2] != depth.shape:
        raise FormatError(f"frame {frame_id}: color {color.shape[:2]} vs depth {depth.shape} dimension mismatch")
    masks = masks2d_from_json(read_json(paths["masks"]), str(paths["masks"]))
    if (masks.height, masks.width) != depth.shape:
        raise FormatError(
            f"frame {frame_id}: dimension mismatch, masks {masks.height}x{masks.width} vs depth "
            f"{depth.shape[0]}x{depth.shape[1]}"
        )
    return FrameBundle(
        DepthFrame(depth, color),
        load_intrinsics(paths["intrinsics"]),
        load_pose(paths["pose"]),
        masks,
        frame_id,
    )


def list_frame_ids(directory) -> list[str]:
    return sorted(p.name[: -len(".pose.txt")] for p in Path(directory).glob("*.pose.txt"))


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_KNOWN_PROPS = {"x", "y", "z", "nx", "ny", "nz", "red", "green", "blue", "mask_id"}


def save_cloud(path, cloud: PointCloud, labels: np.ndarray | None = None, binary: bool = True,
               comments=()) -> None:
    """Write a PLY vertex element: x y z (double), optional nx ny nz (double),
    red green blue (uchar), optional mask_id (int, -1 = unlabeled)."""
    n = len(cloud)
    fields = [("x", "f8"), ("y", "f8"), ("z", "f8")]
    if cloud.normals is not None:
        fields += [("nx", "f8"), ("ny", "f8"), ("nz", "f8")]
    fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    if labels is not None:
        fields.append(("mask_id", "i4"))
    rev = {"f8": "double", "u1": "uchar", "i4": "int"}
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0"]
    header += [f"comment {c}" for c in comments]
    header.append(f"element vertex {n}")
    header += [f"property {rev[t]} {name}" for name, t in fields]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")

    rgb = np.round(np.clip(cloud.colors, 0, 1) * 255).astype(np.uint8)
    cols = {"x": cloud.positions[:, 0], "y": cloud.positions[:, 1], "z": cloud.positions[:, 2],
            "red": rgb[:, 0], "green": rgb[:, 1], "blue": rgb[:, 2]}
    if cloud.normals is not None:
        cols.update(nx=cloud.normals[:, 0], ny=cloud.normals[:, 1], nz=cloud.normals[:, 2])
    if labels is not None:
        labels = np.asarray(labels)
        if len(labels) != n:
            raise FormatError(f"{len(labels)} labels for {n} points")
        cols["mask_id"] = labels
    if binary:
        rec = np.empty(n, dtype=[(name, "<" + t) for name, t in fields])
        for name, _ in fields:
            rec[name] = cols[name]
        Path(path).write_bytes(head + rec.tobytes())
    else:
        lines = []
        for i in range(n):
            vals = []
            for name, t in fields:
                v = cols[name][i]
                vals.append(repr(float(v)) if t == "f8" else str(int(v)))
            lines.append(" ".join(vals))
        Path(path).write_bytes(head + ("\n".join(lines) + ("\n" if lines else "")).encode("ascii"))


def load_cloud(path):
    """Read a PLY written by :func:`save_cloud` (or any compatible vertex-only PLY).

    Returns ``(cloud, labels_or_None, comments)``.
    """
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file (missing magic or end_header)")
    nl = data.find(b"\n", end)
    body = data[nl + 1:] if nl >= 0 else b""
    fmt, count, props, comments, element = None, None, [], [], None
    for raw in data[:end].decode("ascii", errors="replace").splitlines()[1:]:
        tok = raw.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "comment":
            comments.append(raw.partition("comment")[2].strip())
        elif tok[0] == "element":
            element = tok[1]
            if element != "vertex":
                raise FormatError(f"{path}: unknown element '{element}'")
            count = int(tok[2])
        elif tok[0] == "property":
            if tok[1] == "list":
                raise FormatError(f"{path}: unknown property list '{tok[-1]}'")
            if tok[1] not in _PLY_TYPES:
                raise FormatError(f"{path}: unknown property type '{tok[1]}'")
            if tok[2] not in _KNOWN_PROPS:
                raise FormatError(f"{path}: unknown property '{tok[2]}'")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
        elif tok[0] == "obj_info":
            continue
        else:
            raise FormatError(f"{path}: unknown header keyword '{tok[0]}'")
    if fmt not in ("binary_little_endian", "ascii") or count is None:
        raise FormatError(f"{path}: unsupported format '{fmt}' or missing vertex element")
    names = [p[0] for p in props]
    for req in ("x", "y", "z"):
        if req not in names:
            raise FormatError(f"{path}: missing required property '{req}'")
    if fmt == "binary_little_endian":
        dt = np.dtype([(n, "<" + t) for n, t in props])
        if len(body) < dt.itemsize * count:
            raise FormatError(f"{path}: truncated, {len(body)} of {dt.itemsize * count} payload bytes")
        rec = np.frombuffer(body[: dt.itemsize * count], dtype=dt)
        col = {n: rec[n] for n in names}
    else:
        rows = body.decode("ascii").split("\n")
        rows = [r for r in rows if r.strip()]
        if len(rows) < count:
            raise FormatError(f"{path}: truncated, {len(rows)} of {count} vertex lines")
        table = np.array([r.split() for r in rows[:count]], dtype=object).reshape(count, len(props))
        col = {}
        for j, (n, t) in enumerate(props):
            col[n] = table[:, j].astype(np.float64 if t.startswith("f") else np.int64)
    pos = np.stack([col["x"], col["y"], col["z"]], axis=1).astype(np.float64)
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        scale = 255.0 if dict(props)["red"] == "u1" else 1.0
        colors = np.stack([col["red"], col["green"], col["blue"]], axis=1).astype(np.float64) / scale
    normals = None
    if all(c in names for c in ("nx", "ny", "nz")):
        normals = np.stack([col["nx"], col["ny"], col["nz"]], axis=1).astype(np.float64)
    labels = col["mask_id"].astype(np.int64) if "mask_id" in names else None
    return PointCloud(pos, colors, normals), labels, comments


# ---------------------------------------------------------------------------
# mask sidecars
# ---------------------------------------------------------------------------


def masks_to_json(ms: MaskSet, extra: dict | None = None) -> dict:
    doc = {
        "format": "liftseg.masks3d",
        "version": FORMAT_VERSION,
        "n_points": ms.n_points,
        "masks": [
            {
                "mask_id": int(ms.ids[m]),
                "score": None if ms.scores is None else float(ms.scores[m]),
                "structural": bool(ms.structural[m]),
                "rle": rle_encode(ms.members[m]),
            }
            for m in range(len(ms))
        ],
    }
    if extra:
        doc.update(extra)
    return doc


def masks_from_json(doc: dict, where: str = "<masks>") -> MaskSet:
    try:
        n = int(doc["n_points"])
        entries = doc["masks"]
        members = [rle_decode(e["rle"], n) for e in entries]
        ids = [int(e["mask_id"]) for e in entries]
        raw_scores = [e.get("score") for e in entries]
        structural = [bool(e.get("structural", False)) for e in entries]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{where}: malformed mask metadata ({exc})") from None
    if any(s is None for s in raw_scores) and not all(s is None for s in raw_scores):
        raise FormatError(f"{where}: scores must be present on all masks or none")
    scores = None if (not raw_scores or raw_scores[0] is None) else np.array(raw_scores, dtype=np.float64)
    arr = np.stack(members) if members else np.zeros((0, n), dtype=bool)
    if not entries:
        scores = None if doc.get("scored") is False else np.zeros(0)
    return MaskSet(arr, ids, scores, structural)


def save_labeled_cloud(stem, cloud: PointCloud, masks: MaskSet, provenance: dict | None = None,
                       binary: bool = True) -> tuple[Path, Path]:
    """Write ``<stem>.ply`` with a ``mask_id`` column plus ``<stem>.masks.json``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    ply, side = stem.with_suffix(".ply"), stem.with_suffix(".masks.json")
    comments = [f"{k} {v}" for k, v in sorted((provenance or {}).items())]
    save_cloud(ply, cloud, masks.to_labels(), binary=binary, comments=comments)
    extra = {"provenance": provenance} if provenance else {}
    extra["scored"] = masks.scores is not None
    write_json(side, masks_to_json(masks, extra))
    return ply, side


def load_labeled_cloud(stem) -> tuple[PointCloud, MaskSet]:
    stem = Path(stem)
    ply, side = stem.with_suffix(".ply"), stem.with_suffix(".masks.json")
    cloud, labels, _ = load_cloud(ply)
    if side.exists():
        masks = masks_from_json(read_json(side), str(side))
        if masks.n_points != len(cloud):
            raise FormatError(f"{side}: {masks.n_points} points in metadata, {len(cloud)} in {ply}")
    elif labels is not None:
        masks = MaskSet.from_labels(labels)
    else:
        masks = MaskSet.empty(len(cloud))
    return cloud, masks


def save_scene(scene: SceneRecord, directory, provenance: dict | None = None) -> Path:
    """``<dir>/full.ply`` + ``full.masks.json``, ``frames/``, ``scene.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    gt = scene.gt_masks if scene.gt_masks is not None else MaskSet.empty(len(scene.cloud))
    save_labeled_cloud(d / "full", scene.cloud, gt, provenance)
    for fr in scene.frames:
        save_frame_bundle(fr, d / "frames")
    meta = {"name": scene.name, "frames": [f.frame_id for f in scene.frames], "kinds": scene.kinds}
    if provenance:
        meta["provenance"] = provenance
    write_json(d / "scene.json", meta)
    return d


def load_scene(directory, with_frames: bool = True) -> SceneRecord:
    d = Path(directory)
    if not (d / "scene.json").exists():
        raise FileNotFoundError(f"{d}: missing scene.json")
    meta = read_json(d / "scene.json")
    cloud, gt = load_labeled_cloud(d / "full")
    frames = [load_frame_bundle(d / "frames", f) for f in meta["frames"]] if with_frames else []
    return SceneRecord(meta["name"], cloud, gt, frames, meta.get("kinds"))


def log(event: str, **fields) -> None:
    """One JSON object per line on standard error."""
    fields["event"] = event
    sys.stderr.write(json.dumps(fields, sort_keys=True, default=str) + "\n")
