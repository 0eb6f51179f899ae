"""Query-based mask decoder on a voxel-pyramid point encoder.

The encoder voxelizes the cloud at ``base_voxel * 2**level`` for every level,
runs a small MLP per voxel on translation-invariant statistics, mixes each
voxel with the mean of its occupied 26-neighborhood, and broadcasts voxel
features back to member points.  A transformer decoder refines one query per
farthest-point sample, attending to each level (coarse to fine) with masked
cross-attention, then query self-attention and a feed-forward block.  Each
query decodes to a mask feature and two objectness logits (object first);
heatmaps are scaled cosine similarities with the per-point features.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .geometry import PointCloud, fourier_encode, fps_sample, voxelize

CHECKPOINT_MAGIC = b"LSEGCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    feature_dim: int = 64
    levels: int = 3
    decoder_layers: int = 3
    heads: int = 4
    fourier_bands: int = 6
    base_voxel: float = 0.02
    ffn_mult: int = 2
    heatmap_scale_init: float = 10.0
    masked_attention: bool = True

    def __post_init__(self):
        if self.feature_dim % self.heads:
            raise ValueError("feature_dim must be divisible by heads")
        if self.levels < 1 or self.decoder_layers < 0 or self.base_voxel <= 0:
            raise ValueError("levels >= 1, decoder_layers >= 0 and base_voxel > 0 required")


@dataclass
class NetworkParams:
    config: ModelConfig
    arrays: dict = field(default_factory=dict)

    def tensors(self, trainable: tuple | None = None) -> dict:
        """Fresh leaf tensors that share this object's arrays.

        All of them require gradients unless ``trainable`` names prefixes; then
        only the matching ones do and the rest act as constants.
        """
        return {k: ad.Tensor(v, requires_grad=trainable is None or k.startswith(trainable), name=k)
                for k, v in self.arrays.items()}

    def copy(self) -> "NetworkParams":
        return NetworkParams(ModelConfig(**asdict(self.config)), {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()})

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))


@dataclass
class Prediction:
    heatmaps: np.ndarray
    logits: np.ndarray
    query_positions: np.ndarray
    query_indices: np.ndarray

    @property
    def masks(self) -> np.ndarray:
        return binarize(self.heatmaps)


RAW_VOXEL_FEATURES = 9


def init_params(config: ModelConfig, seed: int = 0) -> NetworkParams:
    rng = np.random.default_rng(seed)
    D = config.feature_dim
    F = 6 * config.fourier_bands
    arrays = {}

    def dense(name, fan_in, fan_out, scale=1.0):
        arrays[name + ".w"] = rng.normal(0, scale / np.sqrt(fan_in), (fan_in, fan_out))
        arrays[name + ".b"] = np.zeros(fan_out)

    def norm(name, dim):
        arrays[name + ".g"] = np.ones(dim)
        arrays[name + ".b"] = np.zeros(dim)

    for lvl in range(config.levels):
        fan = RAW_VOXEL_FEATURES + (D if lvl else 0)
        dense(f"bb{lvl}.in", fan, D)
        dense(f"bb{lvl}.out", D, D)
        dense(f"bb{lvl}.msg", D, D)
    dense("point_proj", D, D)
    dense("pos_enc", F, D)
    dense("query_embed", F, D)
    for layer in range(config.decoder_layers):
        for lvl in range(config.levels):
            p = f"dec{layer}.{lvl}"
            for kind in ("cross", "self"):
                norm(f"{p}.{kind}.ln", D)
                for proj in ("q", "k", "v"):
                    dense(f"{p}.{kind}.{proj}", D, D)
                dense(f"{p}.{kind}.o", D, D, scale=0.5)
            norm(f"{p}.ffn.ln", D)
            dense(f"{p}.ffn.1", D, config.ffn_mult * D)
            dense(f"{p}.ffn.2", config.ffn_mult * D, D, scale=0.5)
    norm("head.ln", D)
    dense("mask.1", D, D)
    dense("mask.2", D, D)
    dense("obj", D, 2)
    arrays["heatmap_scale"] = np.array(config.heatmap_scale_init)
    return NetworkParams(config, arrays)


# ---------------------------------------------------------------------------
# per-cloud constants
# ---------------------------------------------------------------------------


@dataclass
class LevelContext:
    voxel_size: float
    point_to_voxel: np.ndarray
    n_voxels: int
    raw: np.ndarray
    neighbor_mean: sp.csr_matrix


@dataclass
class CloudContext:
    positions: np.ndarray
    colors: np.ndarray
    levels: list
    point_fourier: np.ndarray
    bounds: tuple

    @property
    def n_points(self) -> int:
        return len(self.positions)


def _neighbor_mean_matrix(coords: np.ndarray) -> sp.csr_matrix:
    """Row-normalized adjacency over occupied cells of the 3x3x3 neighborhood (self included)."""
    n = len(coords)
    lookup = {tuple(c): i for i, c in enumerate(coords.tolist())}
    rows, cols = [], []
    offsets = [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)]
    for i, (x, y, z) in enumerate(coords.tolist()):
        for dx, dy, dz in offsets:
            j = lookup.get((x + dx, y + dy, z + dz))
            if j is not None:
                rows.append(i)
                cols.append(j)
    A = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    deg = np.asarray(A.sum(axis=1)).ravel()
    return sp.diags(1.0 / deg) @ A


def prepare_cloud(cloud: PointCloud, config: ModelConfig, dtype=np.float64) -> CloudContext:
    """Voxel hierarchies, neighbor operators and positional encodings of one cloud."""
    pos = np.asarray(cloud.positions, dtype=np.float64)
    if len(pos) == 0:
        raise ValueError("cannot run the network on an empty cloud")
    levels = []
    for lvl in range(config.levels):
        s = config.base_voxel * 2**lvl
        coords, inv = voxelize(pos, s)
        n_vox = len(coords)
        counts = np.bincount(inv, minlength=n_vox).astype(np.float64)[:, None]
        centroid = np.zeros((n_vox, 3))
        np.add.at(centroid, inv, pos)
        centroid /= counts
        col = np.zeros((n_vox, 3))
        np.add.at(col, inv, cloud.colors)
        col /= counts
        off = (pos - centroid[inv]) / s
        second = np.zeros((n_vox, 3))
        np.add.at(second, inv, off**2)
        spread = np.sqrt(second / counts)
        cell_offset = (centroid - (coords + 0.5) * s) / s
        raw = np.concatenate([cell_offset, col - 0.5, spread], axis=1)
        levels.append(LevelContext(s, inv, n_vox, raw.astype(dtype), _neighbor_mean_matrix(coords).astype(dtype)))
    lo, hi = pos.min(axis=0), pos.max(axis=0)
    extent = np.maximum(hi - lo, 1e-9 * np.maximum(1.0, np.abs(hi)))
    bounds = (lo, lo + extent)
    pf = fourier_encode(pos, config.fourier_bands, bounds).astype(dtype)
    return CloudContext(pos, cloud.colors, levels, pf, bounds)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def _dense(P, name, x):
    return ad.linear(x, P[name + ".w"], P[name + ".b"])


def _ln(P, name, x):
    return ad.layer_norm(x, P[name + ".g"], P[name + ".b"])


def backbone_forward(ctx: CloudContext, P: dict, config: ModelConfig):
    """Per-point features for every level (finest first) and the mask feature map."""
    feats = []
    prev = None
    for lvl, L in enumerate(ctx.levels):
        x = ad.Tensor(L.raw)
        if lvl:
            x = ad.concat([x, ad.segment_mean(prev, L.point_to_voxel, L.n_voxels)], axis=1)
        h = ad.relu(_dense(P, f"bb{lvl}.in", x))
        v = _dense(P, f"bb{lvl}.out", h)
        v = v + ad.relu(_dense(P, f"bb{lvl}.msg", ad.const_matmul(L.neighbor_mean, v)))
        prev = ad.take_rows(v, L.point_to_voxel)
        feats.append(prev)
    fused = feats[0]
    for f in feats[1:]:
        fused = fused + f
    point_feats = _dense(P, "point_proj", fused)
    return feats, point_feats


def init_queries(ctx: CloudContext, P: dict, Q: int, seed: int = 0, start_index: int | None = None):
    """FPS query positions, their embeddings and positional encodings."""
    if Q > ctx.n_points:
        raise ValueError(f"query count {Q} exceeds point count {ctx.n_points}")
    idx = fps_sample(ctx.positions, Q, seed=seed, start_index=start_index)
    pf = ad.Tensor(ctx.point_fourier[idx])
    return _dense(P, "query_embed", pf), _dense(P, "pos_enc", pf), idx


def _split_heads(x, heads):
    n, d = x.shape
    return ad.transpose(ad.reshape(x, (n, heads, d // heads)), (1, 0, 2))


def _merge_heads(x):
    h, n, dh = x.shape
    return ad.reshape(ad.transpose(x, (1, 0, 2)), (n, h * dh))


def _attention(q, k, v, heads, mask=None):
    dh = q.shape[1] // heads
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = ad.matmul(qh, ad.transpose(kh, (0, 2, 1))) * (1.0 / np.sqrt(dh))
    if mask is not None:
        scores = ad.masked_fill(scores, ~mask[None], -1e30)
    return _merge_heads(ad.matmul(ad.softmax(scores, axis=-1), vh))


def mask_head(P, X, point_feats):
    """(heatmaps, objectness logits) for query states ``X``."""
    Xn = _ln(P, "head.ln", X)
    f = _dense(P, "mask.2", ad.relu(_dense(P, "mask.1", Xn)))
    logits = _dense(P, "obj", Xn)
    cos = ad.matmul(ad.l2_normalize(f), ad.transpose(ad.l2_normalize(point_feats)))
    return P["heatmap_scale"] * cos, logits


def attention_mask(heatmap: np.ndarray) -> np.ndarray:
    """Masked-attention pattern; rows with an empty mask fall back to full attention."""
    mask = heatmap > 0
    empty = ~mask.any(axis=1)
    mask[empty] = True
    return mask


def decoder_forward(queries, query_pos, level_feats, key_pos, P: dict, config: ModelConfig, point_feats=None,
                    aux: list | None = None):
    """Refine query states against multi-level per-point features.

    ``level_feats`` is finest-first; levels are visited coarse to fine.  When
    ``point_feats`` is given and masked attention is enabled, each
    cross-attention is restricted to the query's current predicted mask.
    Passing a list as ``aux`` collects the intermediate ``(heatmaps, logits)``
    that produced those masks, as differentiable tensors.
    """
    X = queries
    H = config.heads
    for layer in range(config.decoder_layers):
        for lvl in reversed(range(len(level_feats))):
            p = f"dec{layer}.{lvl}"
            F = level_feats[lvl]
            mask = None
            if point_feats is not None and (config.masked_attention or aux is not None):
                heat, logits = mask_head(P, X, point_feats)
                if aux is not None:
                    aux.append((heat, logits))
                if config.masked_attention:
                    mask = attention_mask(heat.data)
            Xn = _ln(P, f"{p}.cross.ln", X)
            q = _dense(P, f"{p}.cross.q", Xn + query_pos)
            k = _dense(P, f"{p}.cross.k", F + key_pos)
            v = _dense(P, f"{p}.cross.v", F)
            X = X + _dense(P, f"{p}.cross.o", _attention(q, k, v, H, mask))

            Xn = _ln(P, f"{p}.self.ln", X)
            qk_in = Xn + query_pos
            q = _dense(P, f"{p}.self.q", qk_in)
            k = _dense(P, f"{p}.self.k", qk_in)
            v = _dense(P, f"{p}.self.v", Xn)
            X = X + _dense(P, f"{p}.self.o", _attention(q, k, v, H))

            Xn = _ln(P, f"{p}.ffn.ln", X)
            X = X + _dense(P, f"{p}.ffn.2", ad.relu(_dense(P, f"{p}.ffn.1", Xn)))
    return X


def forward(ctx: CloudContext, P: dict, config: ModelConfig, Q: int, seed: int = 0,
            start_index: int | None = None, with_aux: bool = False) -> dict:
    """Full differentiable pass; returns tensors ``heatmaps`` (Q, N) and ``logits`` (Q, 2).

    With ``with_aux`` the output also lists the intermediate predictions made
    before every cross-attention block under ``aux``.
    """
    level_feats, point_feats = backbone_forward(ctx, P, config)
    X0, qpos, idx = init_queries(ctx, P, Q, seed, start_index)
    key_pos = _dense(P, "pos_enc", ad.Tensor(ctx.point_fourier))
    aux = [] if with_aux else None
    X = decoder_forward(X0, qpos, level_feats, key_pos, P, config, point_feats, aux)
    heat, logits = mask_head(P, X, point_feats)
    out = {"heatmaps": heat, "logits": logits, "query_indices": idx}
    if with_aux:
        out["aux"] = aux
    return out


def predict(cloud: PointCloud, params: NetworkParams, Q: int, seed: int = 0,
            start_index: int | None = None, single_precision: bool = False,
            ctx: CloudContext | None = None) -> Prediction:
    dtype = np.float32 if single_precision else np.float64
    p = params.astype(dtype) if single_precision else params
    if ctx is None:
        ctx = prepare_cloud(cloud, params.config, dtype)
    P = {k: ad.Tensor(v) for k, v in p.arrays.items()}
    out = forward(ctx, P, params.config, Q, seed, start_index)
    idx = out["query_indices"]
    return Prediction(out["heatmaps"].data.astype(np.float64), out["logits"].data.astype(np.float64),
                      ctx.positions[idx].copy(), idx)


def binarize(heatmap) -> np.ndarray:
    """sigmoid(h) > 0.5, evaluated as the equivalent strict sign test h > 0."""
    return np.asarray(heatmap) > 0


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: NetworkParams, extra_arrays: dict | None = None, meta: dict | None = None) -> None:
    """Binary container: magic, u32 version, u64 header length, JSON header, raw little-endian arrays."""
    arrays = {"param/" + k: v for k, v in sorted(params.arrays.items())}
    for k, v in sorted((extra_arrays or {}).items()):
        arrays["extra/" + k] = np.asarray(v)
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr, order="C")   # ascontiguousarray would promote 0-d to 1-d
        dt = arr.dtype.newbyteorder("<")
        raw = arr.astype(dt).tobytes()
        entries.append({"name": name, "dtype": dt.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(params.config),
        "arrays": entries,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)))
    buf.write(hbytes)
    for b in blobs:
        buf.write(b)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Returns ``(params, extra_arrays, meta)``."""
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[20:20 + hlen])
    base = 20 + hlen
    params, extra = {}, {}
    for e in header["arrays"]:
        start = base + e["offset"]
        raw = data[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ValueError(f"{path}: truncated array {e['name']}")
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(tuple(e["shape"])).astype(np.dtype(e["dtype"]).newbyteorder("="))
        group, name = e["name"].split("/", 1)
        (params if group == "param" else extra)[name] = arr.copy()
    cfg = ModelConfig(**header["model_config"])
    return NetworkParams(cfg, params), extra, header.get("meta", {})
