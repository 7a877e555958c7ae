"""Hash-grid color field: encoding, tiny MLP, training, and texture baking.

The field maps points in the normalized-mesh cube to RGB.  Each of L levels
stores a feature table addressed either densely (when the corner lattice
fits) or through the xor-of-primes spatial hash; features are trilinearly
interpolated and a two-hidden-layer ReLU MLP with sigmoid output turns the
concatenated features into color.

Training is plain Adam on an L2 loss with hand-written reverse-mode
gradients (dense layers, trilinear weights, scatter-add into the tables).
Everything runs in float64: the tables are tiny and the finite-difference
gradient checks need the headroom.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import InvalidMesh, NumericalError, ShapeError
from .geometry import TriMesh, rasterize_uv

HASH_PRIMES = np.array([1, 2654435761, 805459861], dtype=np.uint32)
HGF_MAGIC = b"HGF1"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15


@dataclass
class DistillSample:
    xyz: np.ndarray   # 3D surface point inside the unit cube
    rgb: np.ndarray   # target color in [0, 1]^3
    view_id: int = 0


@dataclass
class HashGridConfig:
    levels: int = 8
    n_min: int = 16
    n_max: int = 512
    log2_table_size: int = 14
    feature_dim: int = 2
    hidden: int = 32


class HashGridField:
    """Multi-resolution hashed feature grid plus a small MLP head."""

    def __init__(self, config: Optional[HashGridConfig] = None,
                 rng: Optional[np.random.Generator] = None):
        self.config = config or HashGridConfig()
        cfg = self.config
        if rng is None:
            rng = np.random.default_rng(0)
        res = np.geomspace(cfg.n_min, cfg.n_max, cfg.levels)
        res = np.round(res).astype(np.int64)
        for k in range(1, len(res)):  # strictly increasing after rounding
            res[k] = max(res[k], res[k - 1] + 1)
        self.resolutions = res
        self.table_size = 1 << cfg.log2_table_size
        f = cfg.feature_dim
        self.tables = rng.uniform(-1e-4, 1e-4,
                                  (cfg.levels, self.table_size, f))
        d_in = cfg.levels * f
        h = cfg.hidden

        def kaiming(fan_in, shape):
            bound = math.sqrt(6.0 / fan_in)
            return rng.uniform(-bound, bound, shape)

        self.w1 = kaiming(d_in, (d_in, h))
        self.b1 = np.zeros(h)
        self.w2 = kaiming(h, (h, h))
        self.b2 = np.zeros(h)
        self.w3 = kaiming(h, (h, 3)) * 0.1
        self.b3 = np.zeros(3)
        self.stats = {"clamped": 0}

    # -- parameter plumbing ------------------------------------------------

    def parameters(self) -> Dict[str, np.ndarray]:
        return {"tables": self.tables, "w1": self.w1, "b1": self.b1,
                "w2": self.w2, "b2": self.b2, "w3": self.w3, "b3": self.b3}

    # -- encoding ----------------------------------------------------------

    def _level_lookup(self, level: int, x01: np.ndarray):
        """Corner table indices (B, 8) and trilinear weights (B, 8)."""
        res = int(self.resolutions[level])
        scaled = x01 * res
        cell = np.minimum(np.floor(scaled), res - 1).astype(np.int64)
        frac = scaled - cell
        offs = np.array([[i, j, k] for i in (0, 1) for j in (0, 1)
                         for k in (0, 1)], dtype=np.int64)
        corners = cell[:, None, :] + offs[None, :, :]  # (B, 8, 3)
        w = np.ones((len(x01), 8))
        for axis in range(3):
            t = frac[:, axis:axis + 1]
            w = w * np.where(offs[None, :, axis] == 1, t, 1.0 - t)
        side = res + 1
        if side ** 3 <= self.table_size:
            idx = ((corners[..., 0] * side) + corners[..., 1]) * side + corners[..., 2]
        else:
            cu = corners.astype(np.uint32)
            idx = (cu[..., 0] * HASH_PRIMES[0]
                   ^ cu[..., 1] * HASH_PRIMES[1]
                   ^ cu[..., 2] * HASH_PRIMES[2])
            idx = (idx & np.uint32(self.table_size - 1)).astype(np.int64)
        return idx, w

    def encode(self, xyz: np.ndarray, cache: Optional[dict] = None) -> np.ndarray:
        """Concatenated per-level trilinear features, shape (B, L*F)."""
        xyz = np.atleast_2d(np.asarray(xyz, dtype=np.float64))
        clipped = np.clip(xyz, -0.5, 0.5)
        n_clamped = int((clipped != xyz).any(axis=1).sum())
        if n_clamped:
            self.stats["clamped"] += n_clamped
        x01 = clipped + 0.5
        feats = []
        for lvl in range(self.config.levels):
            idx, w = self._level_lookup(lvl, x01)
            gathered = self.tables[lvl][idx]          # (B, 8, F)
            feats.append((gathered * w[..., None]).sum(axis=1))
            if cache is not None:
                cache.setdefault("lookups", []).append((idx, w))
        return np.concatenate(feats, axis=1)

    # -- forward / backward ------------------------------------------------

    def forward(self, xyz: np.ndarray, cache: Optional[dict] = None) -> np.ndarray:
        feat = self.encode(xyz, cache)
        a1 = feat @ self.w1 + self.b1
        h1 = np.maximum(a1, 0.0)
        a2 = h1 @ self.w2 + self.b2
        h2 = np.maximum(a2, 0.0)
        out = h2 @ self.w3 + self.b3
        rgb = 1.0 / (1.0 + np.exp(-out))
        if cache is not None:
            cache.update(feat=feat, a1=a1, h1=h1, a2=a2, h2=h2, rgb=rgb)
        return rgb

    def loss_and_grads(self, xyz: np.ndarray, target: np.ndarray):
        """Mean-squared-error loss and gradients for every parameter group."""
        cache: dict = {}
        rgb = self.forward(xyz, cache)
        target = np.atleast_2d(np.asarray(target, dtype=np.float64))
        diff = rgb - target
        n = diff.size
        loss = float((diff * diff).sum() / n)

        d_rgb = 2.0 * diff / n
        d_out = d_rgb * rgb * (1.0 - rgb)
        h2, h1, feat = cache["h2"], cache["h1"], cache["feat"]
        g = {
            "w3": h2.T @ d_out,
            "b3": d_out.sum(axis=0),
        }
        d_h2 = d_out @ self.w3.T
        d_a2 = d_h2 * (cache["a2"] > 0)
        g["w2"] = h1.T @ d_a2
        g["b2"] = d_a2.sum(axis=0)
        d_h1 = d_a2 @ self.w2.T
        d_a1 = d_h1 * (cache["a1"] > 0)
        g["w1"] = feat.T @ d_a1
        g["b1"] = d_a1.sum(axis=0)
        d_feat = d_a1 @ self.w1.T

        f = self.config.feature_dim
        g_tables = np.zeros_like(self.tables)
        for lvl, (idx, w) in enumerate(cache["lookups"]):
            d_lvl = d_feat[:, lvl * f:(lvl + 1) * f]       # (B, F)
            contrib = w[..., None] * d_lvl[:, None, :]     # (B, 8, F)
            np.add.at(g_tables[lvl], idx.reshape(-1),
                      contrib.reshape(-1, f))
        g["tables"] = g_tables
        return loss, g


def hash_encode(field: HashGridField, xyz: np.ndarray) -> np.ndarray:
    return field.encode(xyz)


def field_forward(field: HashGridField, xyz: np.ndarray) -> np.ndarray:
    return field.forward(xyz)


# ---------------------------------------------------------------------------
# training


class Adam:
    def __init__(self, params: Dict[str, np.ndarray], lr: float):
        self.lr = lr
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
        self.t += 1
        bc1 = 1.0 - ADAM_BETA1 ** self.t
        bc2 = 1.0 - ADAM_BETA2 ** self.t
        for k, p in params.items():
            gk = grads[k]
            self.m[k] = ADAM_BETA1 * self.m[k] + (1.0 - ADAM_BETA1) * gk
            self.v[k] = ADAM_BETA2 * self.v[k] + (1.0 - ADAM_BETA2) * gk * gk
            p -= self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + ADAM_EPS)


def _stack_samples(samples):
    if (isinstance(samples, tuple) and len(samples) == 2
            and not isinstance(samples[0], DistillSample)):
        xyz, rgb = samples
        return (np.asarray(xyz, dtype=np.float64),
                np.asarray(rgb, dtype=np.float64))
    xyz = np.stack([np.asarray(s.xyz, dtype=np.float64) for s in samples])
    rgb = np.stack([np.asarray(s.rgb, dtype=np.float64) for s in samples])
    return xyz, rgb


def distill(samples, field: HashGridField, iters: int = 100, lr: float = 0.01,
            batch: int = 4096, rng: Optional[np.random.Generator] = None,
            loss_log: Optional[list] = None) -> HashGridField:
    """Fit the field to (xyz, rgb) pairs with Adam; returns the same field.

    Batches are drawn with replacement; when the sample set fits in one
    batch the whole set is used every iteration, which keeps small fits
    deterministic given the rng.
    """
    xyz, rgb = _stack_samples(samples)
    if len(xyz) == 0:
        raise ShapeError("no distillation samples")
    if rng is None:
        rng = np.random.default_rng(0)
    params = field.parameters()
    opt = Adam(params, lr)
    n = len(xyz)
    for _ in range(int(iters)):
        if n > batch:
            pick = rng.integers(0, n, size=batch)
            bx, br = xyz[pick], rgb[pick]
        else:
            bx, br = xyz, rgb
        loss, grads = field.loss_and_grads(bx, br)
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite loss {loss}")
        if loss_log is not None:
            loss_log.append(loss)
        opt.step(params, grads)
    return field


def samples_from_views(views: Sequence[np.ndarray], rasters) -> List[DistillSample]:
    """Foreground pixels of decoded views -> surface-point color samples."""
    out: List[DistillSample] = []
    for vid, (img, raster) in enumerate(zip(views, rasters)):
        fg = raster.foreground
        xyz = raster.xyz[fg]
        rgb = np.clip(np.asarray(img)[fg][:, :3], 0.0, 1.0)
        for k in range(len(xyz)):
            out.append(DistillSample(xyz[k], rgb[k], vid))
    return out


def sample_arrays_from_views(views: Sequence[np.ndarray], rasters):
    """Same as samples_from_views but returns stacked arrays (fast path)."""
    xs, cs = [], []
    for img, raster in zip(views, rasters):
        fg = raster.foreground
        xs.append(raster.xyz[fg].astype(np.float64))
        cs.append(np.clip(np.asarray(img, dtype=np.float64)[fg][:, :3], 0.0, 1.0))
    return np.concatenate(xs), np.concatenate(cs)


# ---------------------------------------------------------------------------
# baking


_NEIGHBOR_ORDER = [(-1, 0), (1, 0), (0, -1), (0, 1),
                   (-1, -1), (-1, 1), (1, -1), (1, 1)]


def _shift(arr: np.ndarray, dr: int, dc: int, fill):
    out = np.full_like(arr, fill)
    src_r = slice(max(0, -dr), arr.shape[0] - max(0, dr))
    dst_r = slice(max(0, dr), arr.shape[0] - max(0, -dr))
    src_c = slice(max(0, -dc), arr.shape[1] - max(0, dc))
    dst_c = slice(max(0, dc), arr.shape[1] - max(0, -dc))
    out[dst_r, dst_c] = arr[src_r, src_c]
    return out


def dilate_fill(texture: np.ndarray, covered: np.ndarray) -> np.ndarray:
    """Flood uncovered texels from covered ones, 8-connected, until full.

    Each pass copies from the first covered neighbor in a fixed order, so
    the result is deterministic.
    """
    tex = texture.copy()
    cov = covered.copy()
    while not cov.all():
        need = ~cov
        new_tex = tex.copy()
        filled = np.zeros_like(cov)
        for dr, dc in _NEIGHBOR_ORDER:
            n_cov = _shift(cov, dr, dc, False)
            n_tex = _shift(tex, dr, dc, 0.0)
            take = need & n_cov & ~filled
            new_tex[take] = n_tex[take]
            filled |= take
        if not filled.any():
            break  # nothing covered at all; leave the texture as-is
        tex = new_tex
        cov = cov | filled
    return tex


def bake_texture(field: HashGridField, mesh: TriMesh, tex_h: int,
                 tex_w: int) -> np.ndarray:
    """Query the field at every covered texel center; dilate into gutters.

    A texel center inside a UV chart inverts to barycentrics of exactly one
    face (lower face id wins ties), giving the surface point to query.
    """
    if mesh.face_uvs is None:
        raise InvalidMesh("bake needs a UV'd mesh")
    face_map, bary = rasterize_uv(mesh, tex_h, tex_w)
    covered = face_map >= 0
    texture = np.zeros((tex_h, tex_w, 3), dtype=np.float64)
    rows, cols = np.nonzero(covered)
    if len(rows):
        faces = face_map[rows, cols].astype(np.int64)
        tri = mesh.vertices[mesh.faces[faces].astype(np.int64)]  # (N, 3, 3)
        weights = bary[rows, cols]                               # (N, 3)
        xyz = (tri * weights[:, :, None]).sum(axis=1)
        chunk = 65536
        for s in range(0, len(xyz), chunk):
            texture[rows[s:s + chunk], cols[s:s + chunk]] = \
                field.forward(xyz[s:s + chunk])
    texture = dilate_fill(texture, covered)
    return texture.astype(np.float32)


# ---------------------------------------------------------------------------
# checkpoints


def save_field(path, field: HashGridField):
    cfg = field.config
    meta = {
        "levels": cfg.levels, "n_min": cfg.n_min, "n_max": cfg.n_max,
        "log2_table_size": cfg.log2_table_size,
        "feature_dim": cfg.feature_dim, "hidden": cfg.hidden,
        "order": ["tables", "w1", "b1", "w2", "b2", "w3", "b3"],
    }
    head = json.dumps(meta).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(HGF_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for key in meta["order"]:
            fh.write(np.ascontiguousarray(
                field.parameters()[key], dtype="<f4").tobytes())


def load_field(path) -> HashGridField:
    with open(path, "rb") as fh:
        if fh.read(4) != HGF_MAGIC:
            raise ShapeError(f"{path}: not an HGF1 checkpoint")
        (hlen,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(hlen).decode("utf-8"))
        cfg = HashGridConfig(
            levels=meta["levels"], n_min=meta["n_min"], n_max=meta["n_max"],
            log2_table_size=meta["log2_table_size"],
            feature_dim=meta["feature_dim"], hidden=meta["hidden"])
        out = HashGridField(cfg)
        for key in meta["order"]:
            ref = out.parameters()[key]
            raw = fh.read(ref.size * 4)
            arr = np.frombuffer(raw, dtype="<f4").reshape(ref.shape)
            ref[...] = arr.astype(np.float64)
    return out
