"""Camera math, point-cloud containers and neighborhood utilities.

Conventions
-----------
* A :class:`RigidPose` maps world coordinates to camera coordinates,
  ``X_cam = R @ X_world + t``.  Unprojection therefore applies
  ``P = R.T @ (d * K^-1 @ [u, v, 1]) - R.T @ t``.
* Pixel ``(u, v)`` means column ``u``, row ``v``; pixel centers sit on integers.
* Depth ``0`` marks an invalid pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class GeometryError(ValueError):
    """Raised for invalid geometric input (bad depth, point behind camera...)."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_matrix(cls, K) -> "CameraIntrinsics":
        K = np.asarray(K, dtype=np.float64)
        if K.shape != (3, 3):
            raise GeometryError(f"intrinsic matrix must be 3x3, got {K.shape}")
        if abs(K[0, 1]) > 0 or abs(K[1, 0]) > 0 or np.any(K[2] != [0.0, 0.0, 1.0]):
            raise GeometryError("intrinsic matrix must have zero skew and last row (0, 0, 1)")
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]))


@dataclass(frozen=True)
class RigidPose:
    """World-to-camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def validate(self, tol: float = 1e-9) -> None:
        R = self.rotation
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err > tol:
            raise GeometryError(f"rotation is not orthonormal (max |R^T R - I| = {err:.3g})")
        det = np.linalg.det(R)
        if abs(det - 1.0) > tol:
            raise GeometryError(f"rotation determinant must be +1, got {det:.6f}")

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    @property
    def matrix(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]])

    @property
    def camera_center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def __eq__(self, other):
        if not isinstance(other, RigidPose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    __hash__ = None


@dataclass
class DepthFrame:
    """Depth (meters, 0 = invalid) and RGB color in [0, 1], both row-major HxW."""

    depth: np.ndarray
    color: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        if self.depth.ndim != 2:
            raise GeometryError(f"depth must be HxW, got shape {self.depth.shape}")
        if self.color.shape != self.depth.shape + (3,):
            raise GeometryError(
                f"color shape {self.color.shape} does not match depth shape {self.depth.shape}"
            )
        if np.any(self.depth < 0) or not np.all(np.isfinite(self.depth)):
            raise GeometryError("depth must be finite and non-negative")

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray | None = None
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        if self.colors is None:
            self.colors = np.zeros((n, 3))
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.colors) != n:
            raise GeometryError(f"colors have {len(self.colors)} rows, positions have {n}")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != n:
                raise GeometryError(f"normals have {len(self.normals)} rows, positions have {n}")

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, index) -> "PointCloud":
        normals = None if self.normals is None else self.normals[index]
        return PointCloud(self.positions[index], self.colors[index], normals)

    def scaled(self, factor: float) -> "PointCloud":
        """Return a copy whose positions are divided by ``factor``."""
        return PointCloud(self.positions / factor, self.colors.copy(),
                          None if self.normals is None else self.normals.copy())

    @staticmethod
    def concatenate(clouds) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return PointCloud(np.zeros((0, 3)))
        normals = None
        if all(c.normals is not None for c in clouds):
            normals = np.concatenate([c.normals for c in clouds])
        return PointCloud(
            np.concatenate([c.positions for c in clouds]),
            np.concatenate([c.colors for c in clouds]),
            normals,
        )

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.positions.min(axis=0), self.positions.max(axis=0)


@dataclass
class VoxelGrid:
    """Occupied cells of a regular grid; ``cells[key]`` lists member indices."""

    voxel_size: float
    coords: np.ndarray
    point_to_voxel: np.ndarray
    cells: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------


def unproject_pixel(K: CameraIntrinsics, pose: RigidPose, p, d: float) -> np.ndarray:
    """Lift pixel ``p = (u, v)`` with depth ``d`` (meters) to a world point."""
    if not d > 0:
        raise GeometryError(f"invalid depth {d!r}: must be > 0")
    u, v = float(p[0]), float(p[1])
    ray = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
    R, t = pose.rotation, pose.translation
    return R.T @ (d * ray) - R.T @ t


def unproject_pixels(K: CameraIntrinsics, pose: RigidPose, uv: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Vectorized :func:`unproject_pixel` for ``uv`` of shape (n, 2)."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    if np.any(~(d > 0)):
        raise GeometryError("invalid depth: all depths must be > 0")
    cam = np.stack([(uv[:, 0] - K.cx) / K.fx * d, (uv[:, 1] - K.cy) / K.fy * d, d], axis=1)
    R, t = pose.rotation, pose.translation
    return cam @ R - R.T @ t


def project_point(K: CameraIntrinsics, pose: RigidPose, P) -> tuple[np.ndarray, float]:
    """Project a world point; returns pixel coordinates (u, v) and camera depth."""
    X = pose.rotation @ np.asarray(P, dtype=np.float64) + pose.translation
    z = X[2]
    if not z > 0:
        raise GeometryError(f"point is behind the camera (z = {z:.6g})")
    u = K.fx * X[0] / z + K.cx
    v = K.fy * X[1] / z + K.cy
    return np.array([u, v]), float(z)


def project_points(K: CameraIntrinsics, pose: RigidPose, P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection without the behind-camera check.

    Returns (uv, z); rows with ``z <= 0`` carry meaningless ``uv`` and must be
    filtered by the caller.
    """
    X = np.asarray(P, dtype=np.float64) @ pose.rotation.T + pose.translation
    z = X[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([K.fx * X[:, 0] / z + K.cx, K.fy * X[:, 1] / z + K.cy], axis=1)
    return uv, z


def unproject_frame(frame: DepthFrame, K: CameraIntrinsics, pose: RigidPose):
    """Unproject every valid-depth pixel.

    Returns ``(cloud, pixel_index)`` where ``pixel_index[i]`` is the flat
    row-major pixel index that produced point ``i``.
    """
    valid = frame.depth > 0
    pixel_index = np.flatnonzero(valid.ravel())
    if len(pixel_index) == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3))), pixel_index
    v, u = np.divmod(pixel_index, frame.width)
    d = frame.depth.ravel()[pixel_index]
    pos = unproject_pixels(K, pose, np.stack([u, v], axis=1), d)
    colors = frame.color.reshape(-1, 3)[pixel_index]
    return PointCloud(pos, colors), pixel_index


# ---------------------------------------------------------------------------
# voxels and sampling
# ---------------------------------------------------------------------------


def voxelize(positions: np.ndarray, voxel_size: float) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(coords, inverse)``: unique integer cells and per-point cell index."""
    if not voxel_size > 0:
        raise GeometryError(f"voxel_size must be > 0, got {voxel_size}")
    keys = np.floor(np.asarray(positions) / voxel_size).astype(np.int64)
    if len(keys) == 0:
        return keys.reshape(0, 3), np.zeros(0, dtype=np.int64)
    coords, inverse = np.unique(keys, axis=0, return_inverse=True)
    return coords, inverse.reshape(-1)


def voxel_grid(cloud: PointCloud, voxel_size: float) -> VoxelGrid:
    coords, inverse = voxelize(cloud.positions, voxel_size)
    order = np.argsort(inverse, kind="stable")
    splits = np.cumsum(np.bincount(inverse, minlength=len(coords)))[:-1]
    cells = {tuple(c): members for c, members in zip(coords.tolist(), np.split(order, splits))}
    return VoxelGrid(voxel_size, coords, inverse, cells)


def segment_mean(values: np.ndarray, ids: np.ndarray, n: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    out = np.zeros((n,) + values.shape[1:])
    np.add.at(out, ids, values)
    counts = np.bincount(ids, minlength=n).astype(np.float64)
    return out / np.maximum(counts, 1.0).reshape((-1,) + (1,) * (values.ndim - 1))


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> tuple[PointCloud, np.ndarray]:
    """One point per occupied voxel at the member centroid (position and color).

    Normals, when present, are averaged and renormalized; a cell whose normals
    cancel keeps the normal of its first member.
    """
    coords, inverse = voxelize(cloud.positions, voxel_size)
    n = len(coords)
    pos = segment_mean(cloud.positions, inverse, n)
    col = segment_mean(cloud.colors, inverse, n)
    normals = None
    if cloud.normals is not None:
        summed = np.zeros((n, 3))
        np.add.at(summed, inverse, cloud.normals)
        norm = np.linalg.norm(summed, axis=1)
        first = np.full(n, -1)
        first[inverse[::-1]] = np.arange(len(inverse))[::-1]
        fallback = cloud.normals[first] if n else np.zeros((0, 3))
        ok = norm > 1e-12
        normals = np.where(ok[:, None], summed / np.where(ok, norm, 1.0)[:, None], fallback)
    return PointCloud(pos, col, normals), inverse


def fps_sample(cloud_or_positions, k: int, seed: int | None = 0, start_index: int | None = None) -> np.ndarray:
    """Greedy farthest-point sampling.

    The first index is drawn uniformly with ``seed`` unless ``start_index`` is
    given.  Ties in the max-min distance go to the lowest index.
    """
    pos = getattr(cloud_or_positions, "positions", cloud_or_positions)
    pos = np.asarray(pos, dtype=np.float64)
    n = len(pos)
    if not 1 <= k <= n:
        raise ValueError(f"fps_sample needs 1 <= k <= N, got k={k}, N={n}")
    if start_index is None:
        start_index = int(np.random.default_rng(seed).integers(n))
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start_index
    min_d = np.sum((pos - pos[start_index]) ** 2, axis=1)
    min_d[start_index] = -1.0
    for j in range(1, k):
        nxt = int(np.argmax(min_d))
        chosen[j] = nxt
        min_d = np.minimum(min_d, np.sum((pos - pos[nxt]) ** 2, axis=1))
        min_d[chosen[: j + 1]] = -1.0
    return chosen


def fourier_encode(P, bands: int = 6, scene_bounds=None, diagnostics: dict | None = None) -> np.ndarray:
    """Sinusoidal encoding of positions normalized into the unit cube.

    ``P`` may be a single point (3,) or an array (n, 3).  The output layout is
    ``[sin(2^b pi x_i) for b, i] + [cos(2^b pi x_i) for b, i]`` with the axis
    index varying fastest, giving ``6 * bands`` features.  Points outside
    ``scene_bounds`` are clamped and counted in ``diagnostics['fourier_clamped']``.
    """
    if bands < 1:
        raise ValueError("bands must be >= 1")
    P = np.asarray(P, dtype=np.float64)
    single = P.ndim == 1
    P = P.reshape(-1, 3)
    if scene_bounds is None:
        lo, hi = P.min(axis=0), P.max(axis=0)
    else:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in scene_bounds)
    extent = hi - lo
    if scene_bounds is not None and np.any(extent <= 0):
        raise ValueError(f"degenerate scene bounds: {lo} .. {hi}")
    extent = np.where(extent > 0, extent, 1.0)
    x = (P - lo) / extent
    outside = np.any((x < 0) | (x > 1), axis=1)
    if diagnostics is not None and outside.any():
        diagnostics["fourier_clamped"] = diagnostics.get("fourier_clamped", 0) + int(outside.sum())
    x = np.clip(x, 0.0, 1.0)
    freqs = (2.0 ** np.arange(bands)) * np.pi
    arg = (x[:, None, :] * freqs[None, :, None]).reshape(len(x), -1)
    out = np.concatenate([np.sin(arg), np.cos(arg)], axis=1)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# neighborhoods
# ---------------------------------------------------------------------------


def knn_indices(positions: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k nearest neighbors of every point, excluding the point itself."""
    pos = np.asarray(positions, dtype=np.float64)
    n = len(pos)
    if not 0 < k < n:
        raise ValueError(f"knn needs 0 < k < N, got k={k}, N={n}")
    dist, idx = cKDTree(pos).query(pos, k=k + 1)
    own = np.arange(n)[:, None]
    is_self = idx == own
    # drop the self entry when present; otherwise the farthest (duplicates)
    drop = np.where(is_self.any(axis=1), is_self.argmax(axis=1), k)
    keep = np.ones_like(idx, dtype=bool)
    keep[np.arange(n), drop] = False
    return idx[keep].reshape(n, k), dist[keep].reshape(n, k)


def knn_graph(cloud_or_positions, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric k-NN graph as ``(edges (E, 2) with i < j, lengths (E,))``.

    Edges are sorted lexicographically.
    """
    pos = np.asarray(getattr(cloud_or_positions, "positions", cloud_or_positions), dtype=np.float64)
    idx, _ = knn_indices(pos, k)
    src = np.repeat(np.arange(len(pos)), k)
    dst = idx.ravel()
    pairs = np.stack([np.minimum(src, dst), np.maximum(src, dst)], axis=1)
    edges = np.unique(pairs, axis=0)
    lengths = np.linalg.norm(pos[edges[:, 0]] - pos[edges[:, 1]], axis=1)
    return edges, lengths


def estimate_normals(cloud_or_positions, k: int = 10, diagnostics: dict | None = None) -> np.ndarray:
    """PCA normals over each point and its ``k`` nearest neighbors.

    Sign rule: z >= 0, then y >= 0, then x >= 0 for the first non-zero
    component.  Rank-deficient neighborhoods (rank < 2) get (0, 0, 1) and are
    counted in ``diagnostics['degenerate_normals']``.
    """
    if k < 3:
        raise ValueError("estimate_normals needs k >= 3")
    pos = np.asarray(getattr(cloud_or_positions, "positions", cloud_or_positions), dtype=np.float64)
    idx, _ = knn_indices(pos, k)
    nbhd = np.concatenate([pos[:, None, :], pos[idx]], axis=1)
    centered = nbhd - nbhd.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / nbhd.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()
    scale = np.maximum(evals[:, 2], 1e-300)
    degenerate = evals[:, 1] <= 1e-10 * scale
    normals[degenerate] = [0.0, 0.0, 1.0]
    if diagnostics is not None:
        diagnostics["degenerate_normals"] = diagnostics.get("degenerate_normals", 0) + int(degenerate.sum())
    return orient_normals(normals)


def orient_normals(normals: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    normals = np.array(normals, dtype=np.float64)
    sign = np.ones(len(normals))
    decided = np.zeros(len(normals), dtype=bool)
    for axis in (2, 1, 0):
        comp = normals[:, axis]
        here = ~decided & (np.abs(comp) > tol)
        sign[here] = np.where(comp[here] < 0, -1.0, 1.0)
        decided |= here
    normals *= sign[:, None]
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> RigidPose:
    """World-to-camera pose for a camera at ``eye`` looking at ``target``.

    Camera axes: x right, y down, z forward.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        raise GeometryError("view direction is parallel to the up vector")
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return RigidPose(R, -R @ eye)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q
