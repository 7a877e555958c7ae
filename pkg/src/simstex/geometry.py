"""Meshes, UV atlases, cameras, and texture-resolution policies.

Conventions (fixed here, used everywhere):
  - right-handed world, +y up, the object's "front" faces +x
  - azimuth is measured in the xz-plane from +x, elevation from the horizon
  - a normalized mesh is centered at the origin with longest bbox side 1
  - UV v=0 maps to texture row 0
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import AtlasOverflow, InvalidMesh, InvalidRefinement

CAMERA_DISTANCE = 1.5
FOV_MARGIN = 1.05
JITTER_DEG = 10.0


@dataclass
class TriMesh:
    """Triangle mesh with optional per-corner UVs grouped into charts.

    vertices  (V, 3) float64
    faces     (F, 3) int32 vertex indices
    face_uvs  (F, 3, 2) float64 in [0, 1]^2, or None when not yet atlased
    chart_ids (F,) int32 chart label per face, or None
    """

    vertices: np.ndarray
    faces: np.ndarray
    face_uvs: Optional[np.ndarray] = None
    chart_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int32)
        if self.face_uvs is not None:
            self.face_uvs = np.ascontiguousarray(self.face_uvs, dtype=np.float64)
        if self.chart_ids is not None:
            self.chart_ids = np.ascontiguousarray(self.chart_ids, dtype=np.int32)

    @property
    def num_faces(self) -> int:
        return int(self.faces.shape[0])

    @property
    def has_uvs(self) -> bool:
        return self.face_uvs is not None

    def validate(self):
        if self.vertices.size == 0 or self.faces.size == 0:
            raise InvalidMesh("mesh has no vertices or no faces")
        if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
            raise InvalidMesh("face index out of range")
        if self.face_uvs is not None:
            if self.face_uvs.shape != (self.num_faces, 3, 2):
                raise InvalidMesh("face_uvs shape mismatch")
            if self.face_uvs.min() < -1e-9 or self.face_uvs.max() > 1 + 1e-9:
                raise InvalidMesh("UVs outside [0,1]^2")

    def bbox(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.vertices, axis=1).max())

    def surface_area(self) -> float:
        p = self.vertices[self.faces]
        cross = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        return float(0.5 * np.linalg.norm(cross, axis=1).sum())

    def uv_area_fraction(self) -> float:
        if self.face_uvs is None:
            return 0.0
        q = self.face_uvs
        e1 = q[:, 1] - q[:, 0]
        e2 = q[:, 2] - q[:, 0]
        return float(0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]).sum())


@dataclass(frozen=True)
class Camera:
    """Perspective camera; tuples keep it hashable for caching."""

    eye: tuple
    target: tuple
    up: tuple
    fov_y: float
    image_h: int = 64
    image_w: int = 64

    def __post_init__(self):
        if not 0.0 < self.fov_y < math.pi:
            raise ValueError("fov_y must lie in (0, pi)")
        e, t = np.asarray(self.eye), np.asarray(self.target)
        view = t - e
        if np.linalg.norm(view) < 1e-12:
            raise ValueError("eye equals target")
        u = np.asarray(self.up)
        cross = np.cross(view / np.linalg.norm(view), u / np.linalg.norm(u))
        if np.linalg.norm(cross) < 1e-9:
            raise ValueError("up parallel to view direction")

    def to_dict(self) -> dict:
        return {
            "eye": list(self.eye),
            "target": list(self.target),
            "up": list(self.up),
            "fov_y": self.fov_y,
            "image_h": self.image_h,
            "image_w": self.image_w,
        }

    @staticmethod
    def from_dict(d: dict) -> "Camera":
        return Camera(
            tuple(d["eye"]), tuple(d["target"]), tuple(d["up"]),
            float(d["fov_y"]), int(d.get("image_h", 64)), int(d.get("image_w", 64)),
        )


_PRESET_COUNTS = {"default9": 9, "jittered18": 18, "human24": 24}


@dataclass
class CameraPreset:
    """Named camera layouts: a surround ring plus top view, its jittered
    double-sampling, and a three-ring cylinder for tall objects."""

    kind: str
    distance: float = CAMERA_DISTANCE
    azimuths_deg: Sequence[float] = field(default_factory=list)
    elevations_deg: Sequence[float] = field(default_factory=list)
    y_offsets: Sequence[float] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in _PRESET_COUNTS:
            raise ValueError(f"unknown preset kind {self.kind!r}")
        if not self.azimuths_deg:
            ring = [45.0 * k for k in range(8)]
            if self.kind in ("default9", "jittered18"):
                self.azimuths_deg = ring + [0.0]
                self.elevations_deg = [30.0] * 8 + [90.0]
                self.y_offsets = []
            else:
                self.azimuths_deg = ring
                self.elevations_deg = [0.0] * 8
                self.y_offsets = [0.3, 0.0, -0.3]
        self._check_count()

    def _check_count(self):
        n = len(self.azimuths_deg)
        if self.kind in ("default9", "jittered18") and n != 9:
            raise ValueError("ring presets need 9 base slots")
        if self.kind == "human24" and n * len(self.y_offsets) != 24:
            raise ValueError("human24 needs 8 azimuths x 3 rings")

    @property
    def camera_count(self) -> int:
        return _PRESET_COUNTS[self.kind]

    def to_json(self) -> str:
        return json.dumps({
            "kind": self.kind,
            "distance": self.distance,
            "azimuths_deg": list(self.azimuths_deg),
            "elevations_deg": list(self.elevations_deg),
            "y_offsets": list(self.y_offsets),
        })

    @staticmethod
    def from_json(text: str) -> "CameraPreset":
        d = json.loads(text)
        return CameraPreset(
            kind=d["kind"],
            distance=float(d.get("distance", CAMERA_DISTANCE)),
            azimuths_deg=d.get("azimuths_deg", []),
            elevations_deg=d.get("elevations_deg", []),
            y_offsets=d.get("y_offsets", []),
        )


# ---------------------------------------------------------------------------
# mesh normalization and atlas


def normalize_mesh(mesh: TriMesh) -> TriMesh:
    """Center the bbox at the origin and scale the longest side to 1.

    A mesh already normalized (to 1e-12) is returned unchanged, which makes
    the operation bitwise idempotent.
    """
    if mesh.vertices.size == 0 or mesh.faces.size == 0:
        raise InvalidMesh("cannot normalize an empty mesh")
    lo, hi = mesh.bbox()
    center = (lo + hi) / 2.0
    extent = float((hi - lo).max())
    if extent <= 0.0:
        raise InvalidMesh("mesh is a single point")
    if np.abs(center).max() < 1e-12 and abs(extent - 1.0) < 1e-12:
        return mesh
    verts = (mesh.vertices - center) * (1.0 / extent)
    return replace(mesh, vertices=verts)


def _face_plane_coords(p0, p1, p2):
    """Isometric 2D coordinates of one 3D triangle (p0 at the origin)."""
    e1 = p1 - p0
    n1 = np.linalg.norm(e1)
    if n1 < 1e-15:
        return np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    e1 = e1 / n1
    d2 = p2 - p0
    normal = np.cross(e1, d2)
    nn = np.linalg.norm(normal)
    if nn < 1e-15:
        # degenerate face: give it a sliver so the atlas stays injective
        return np.array([[0.0, 0.0], [n1, 0.0], [0.0, 1e-6]])
    e2 = np.cross(normal / nn, e1)
    return np.array([
        [0.0, 0.0],
        [n1, 0.0],
        [float(d2 @ e1), float(d2 @ e2)],
    ])


def naive_atlas(mesh: TriMesh, texels_per_unit: float) -> TriMesh:
    """Give every face its own chart on a square grid in UV space.

    Wasteful but injective by construction: cells are separated by at least
    one texel of gutter at the requested density.  `texels_per_unit` is the
    texture side length (texels across the full [0,1] UV range).
    """
    nf = mesh.num_faces
    if nf == 0:
        raise InvalidMesh("no faces to atlas")
    grid = int(math.ceil(math.sqrt(nf)))
    cell = 1.0 / grid
    texel = 1.0 / float(texels_per_unit)
    # one texel of gutter needs half a texel of inset on each side of a cell
    # boundary; require a couple of interior texels so every face keeps
    # at least one texel center
    if cell < 4.0 * texel:
        raise AtlasOverflow(
            f"{nf} faces need a grid of {grid}x{grid} cells but each cell "
            f"spans under 4 texels at density {texels_per_unit}"
        )
    inset = 0.5 * texel
    avail = cell - 2.0 * inset
    p = mesh.vertices[mesh.faces.astype(np.int64)]
    uvs = np.zeros((nf, 3, 2), dtype=np.float64)
    for f in range(nf):
        q = _face_plane_coords(p[f, 0], p[f, 1], p[f, 2])
        q = q - q.min(axis=0)
        span = max(float(q.max()), 1e-12)
        q = q * (avail / span)
        cx, cy = f % grid, f // grid
        origin = np.array([cx * cell + inset, cy * cell + inset])
        # center the triangle inside its cell
        pad = (avail - q.max(axis=0)) / 2.0
        uvs[f] = origin + pad + q
    return replace(mesh, face_uvs=uvs, chart_ids=np.arange(nf, dtype=np.int32))


def uv_claims(mesh: TriMesh, grid: int = 1024):
    """All (texel_index, face_id) claims when rasterizing face ids in UV space.

    A texel is claimed by a face when its center lies inside the face's UV
    triangle (inclusive edges, so shared-edge texels appear twice).
    """
    if mesh.face_uvs is None:
        raise InvalidMesh("mesh has no UVs")
    uv = mesh.face_uvs * grid  # texel units
    lo = np.clip(np.floor(uv.min(axis=1)).astype(np.int64), 0, grid - 1)
    hi = np.clip(np.ceil(uv.max(axis=1)).astype(np.int64), 0, grid)
    hi = np.maximum(hi, lo + 1)
    w = hi[:, 0] - lo[:, 0]
    h = hi[:, 1] - lo[:, 1]
    counts = (w * h).astype(np.int64)
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    fidx = np.repeat(np.arange(mesh.num_faces, dtype=np.int64), counts)
    start = np.concatenate(([0], np.cumsum(counts)[:-1]))
    local = np.arange(total, dtype=np.int64) - np.repeat(start, counts)
    px = np.repeat(lo[:, 0], counts) + local % np.repeat(w, counts)
    py = np.repeat(lo[:, 1], counts) + local // np.repeat(w, counts)
    cx = px + 0.5
    cy = py + 0.5
    a = uv[fidx, 0]
    b = uv[fidx, 1]
    c = uv[fidx, 2]
    d = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])
    ok = np.abs(d) > 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        l1 = ((cx - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (cy - a[:, 1])) / d
        l2 = ((b[:, 0] - a[:, 0]) * (cy - a[:, 1]) - (cx - a[:, 0]) * (b[:, 1] - a[:, 1])) / d
    l0 = 1.0 - l1 - l2
    inside = ok & (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
    texel = py[inside] * grid + px[inside]
    return texel, fidx[inside]


def rasterize_uv(mesh: TriMesh, tex_h: int, tex_w: int):
    """Texel-center -> (face, barycentric) map of the UV layout.

    Ties on shared edges resolve to the lower face id.  Returns
    (face_map (H,W) int32 with -1 for uncovered, bary (H,W,3) float64).
    """
    if mesh.face_uvs is None:
        raise InvalidMesh("mesh has no UVs")
    if tex_h != tex_w:
        raise InvalidMesh("rasterize_uv requires square textures")
    grid = tex_w
    texel, fid = uv_claims(mesh, grid=grid)
    face_map = np.full(tex_h * tex_w, -1, dtype=np.int32)
    order = np.lexsort((fid, texel))
    texel_o, fid_o = texel[order], fid[order]
    first = np.ones(len(texel_o), dtype=bool)
    first[1:] = texel_o[1:] != texel_o[:-1]
    face_map[texel_o[first]] = fid_o[first].astype(np.int32)
    face_map = face_map.reshape(tex_h, tex_w)
    bary = np.zeros((tex_h, tex_w, 3), dtype=np.float64)
    rows, cols = np.nonzero(face_map >= 0)
    if len(rows):
        f = face_map[rows, cols].astype(np.int64)
        uv = mesh.face_uvs[f] * grid
        cx = cols + 0.5
        cy = rows + 0.5
        a, b, c = uv[:, 0], uv[:, 1], uv[:, 2]
        d = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])
        l1 = ((cx - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (cy - a[:, 1])) / d
        l2 = ((b[:, 0] - a[:, 0]) * (cy - a[:, 1]) - (cx - a[:, 0]) * (b[:, 1] - a[:, 1])) / d
        bary[rows, cols, 0] = 1.0 - l1 - l2
        bary[rows, cols, 1] = l1
        bary[rows, cols, 2] = l2
    return face_map, bary


# ---------------------------------------------------------------------------
# cameras


def _spherical_eye(distance: float, azimuth_deg: float, elevation_deg: float):
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    return (
        distance * math.cos(el) * math.cos(az),
        distance * math.sin(el),
        distance * math.cos(el) * math.sin(az),
    )


def _up_for_elevation(elevation_deg: float):
    # near the poles +y is parallel to the view; fall back to +x
    if abs(math.cos(math.radians(elevation_deg))) < math.cos(math.radians(80.0)):
        return (1.0, 0.0, 0.0)
    return (0.0, 1.0, 0.0)


def fit_fov(mesh: TriMesh, distance: float) -> float:
    """Vertical FOV putting the bounding sphere in frame with a 5% margin."""
    r = mesh.bounding_radius()
    return 2.0 * math.atan(FOV_MARGIN * r / distance)


def make_cameras(preset: CameraPreset, mesh: TriMesh, rng=None,
                 image_h: int = 64, image_w: int = 64) -> list:
    """Instantiate a preset around a normalized mesh.

    `rng` (int seed or numpy Generator) is only consulted by jittered18;
    results are bit-reproducible for a given seed.
    """
    fov = fit_fov(mesh, preset.distance)
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    cams = []
    if preset.kind == "human24":
        for y_off in preset.y_offsets:
            for az in preset.azimuths_deg:
                eye = _spherical_eye(preset.distance, az, 0.0)
                eye = (eye[0], eye[1] + y_off, eye[2])
                cams.append(Camera(eye, (0.0, y_off, 0.0), (0.0, 1.0, 0.0),
                                   fov, image_h, image_w))
        return cams
    slots = list(zip(preset.azimuths_deg, preset.elevations_deg))
    repeats = 2 if preset.kind == "jittered18" else 1
    for _ in range(repeats):
        for az, el in slots:
            if preset.kind == "jittered18":
                if rng is None:
                    rng = np.random.default_rng(0)
                az = az + float(rng.uniform(-JITTER_DEG, JITTER_DEG))
                el = el + float(rng.uniform(-JITTER_DEG, JITTER_DEG))
            eye = _spherical_eye(preset.distance, az, el)
            cams.append(Camera(eye, (0.0, 0.0, 0.0), _up_for_elevation(el),
                               fov, image_h, image_w))
    return cams


def camera_angles(camera: Camera):
    """(azimuth_deg, elevation_deg) of the eye as seen from the target."""
    d = np.asarray(camera.eye) - np.asarray(camera.target)
    n = np.linalg.norm(d)
    el = math.degrees(math.asin(float(np.clip(d[1] / n, -1.0, 1.0))))
    az = math.degrees(math.atan2(float(d[2]), float(d[0]))) % 360.0
    return az, el


def prompt_view_suffix(camera: Camera) -> str:
    """Viewpoint phrase appended to the text prompt.

    "top-view" above 60 degrees elevation, otherwise the nearest of the four
    exact directions by azimuth (front +x, sides at 90/270, rear 180).
    """
    az, el = camera_angles(camera)
    if el > 60.0:
        return "top-view"
    candidates = [(0.0, "front view"), (90.0, "side view"),
                  (180.0, "rear view"), (270.0, "side view")]
    best = min(candidates, key=lambda c: min(abs(az - c[0]), 360.0 - abs(az - c[0])))
    return best[1]


# ---------------------------------------------------------------------------
# texture resolution policy


def _ceil_multiple(x: float, m: int) -> int:
    return int(math.ceil(x / m)) * m


def texture_resolution(mesh: TriMesh, mode: str = "coarse", base: int = 64,
                       old_fov: Optional[float] = None,
                       new_fov: Optional[float] = None):
    """Pick a square texture size.

    coarse: scale `base` by how much surface there is to cover, measured as
      sqrt(UV-covered fraction * area / diameter^2), clamped to [base, 8*base].
    refine: scale the current side by tan(old_fov/2)/tan(new_fov/2) -- the
      footprint shrink when narrowing the FOV -- and round up to 8.
    """
    if base % 8 != 0:
        raise ValueError("base must be a multiple of 8")
    if mode == "coarse":
        diameter = 2.0 * mesh.bounding_radius()
        if diameter <= 0:
            raise InvalidMesh("degenerate mesh")
        ratio = mesh.uv_area_fraction() * mesh.surface_area() / (diameter * diameter)
        k = max(1, int(math.ceil(math.sqrt(max(ratio, 0.0)))))
        side = _ceil_multiple(base * k, 8)
        side = min(max(side, base), 8 * base)
        return side, side
    if mode == "refine":
        if old_fov is None or new_fov is None:
            raise ValueError("refine mode needs old_fov and new_fov")
        if new_fov >= old_fov:
            raise InvalidRefinement("new FOV must be narrower than the old one")
        scale = math.tan(old_fov / 2.0) / math.tan(new_fov / 2.0)
        side = _ceil_multiple(base * scale, 8)
        return side, side
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# OBJ I/O


def load_obj(path) -> TriMesh:
    """Minimal OBJ reader: v, vt, and triangular f records.

    Faces must be triangles.  If any face lacks vt indices the whole mesh is
    returned without UVs (callers then run naive_atlas).
    """
    verts = []
    uvs = []
    face_v = []
    face_vt = []
    any_missing_vt = False
    with open(path, "r") as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v" and len(parts) >= 4:
                verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif parts[0] == "vt" and len(parts) >= 3:
                uvs.append([float(parts[1]), float(parts[2])])
            elif parts[0] == "f":
                corners = parts[1:]
                if len(corners) != 3:
                    raise InvalidMesh("only triangular faces are supported")
                vi, ti = [], []
                for corner in corners:
                    bits = corner.split("/")
                    v = int(bits[0])
                    vi.append(v - 1 if v > 0 else len(verts) + v)
                    if len(bits) >= 2 and bits[1]:
                        t = int(bits[1])
                        ti.append(t - 1 if t > 0 else len(uvs) + t)
                    else:
                        ti.append(-1)
                face_v.append(vi)
                if -1 in ti:
                    any_missing_vt = True
                face_vt.append(ti)
    if not verts or not face_v:
        raise InvalidMesh(f"no geometry in {path}")
    vertices = np.asarray(verts, dtype=np.float64)
    faces = np.asarray(face_v, dtype=np.int32)
    if any_missing_vt or not uvs:
        return TriMesh(vertices, faces)
    uv_arr = np.asarray(uvs, dtype=np.float64)
    face_uvs = uv_arr[np.asarray(face_vt, dtype=np.int64)]
    face_uvs = np.clip(face_uvs, 0.0, 1.0)
    mesh = TriMesh(vertices, faces, face_uvs, np.zeros(len(faces), np.int32))
    return mesh


def save_obj(mesh: TriMesh, path):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        if mesh.face_uvs is not None:
            for f in range(mesh.num_faces):
                for k in range(3):
                    u, vv = mesh.face_uvs[f, k]
                    fh.write(f"vt {u:.9g} {vv:.9g}\n")
            for f in range(mesh.num_faces):
                a, b, c = (int(x) + 1 for x in mesh.faces[f])
                t = 3 * f
                fh.write(f"f {a}/{t + 1} {b}/{t + 2} {c}/{t + 3}\n")
        else:
            for f in mesh.faces:
                fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
