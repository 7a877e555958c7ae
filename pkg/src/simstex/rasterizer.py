"""Nearest-texel forward rendering and its exact adjoint.

Rendering here is a pure gather: each covered pixel copies one texel, chosen
by perspective-correct UV interpolation at the pixel center.  No filtering,
no mip-maps, no shading -- interpolation would change the per-pixel variance
of noisy textures, which the sampling loop cannot tolerate.  The inverse
render is the matching scatter-add, so <render(z), x> == <z, inverse(x)>
holds up to float rounding.

Screen conventions: pixel (row 0, col 0) is top-left, pixel centers at
(+0.5, +0.5).  Depth is eye-space distance along the view axis.  UV and the
Jacobian are measured in texel units, so |J| == 1 means one texel per pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .geometry import Camera, TriMesh

BACKGROUND = -1
NEAR_PLANE = 1e-3


@dataclass
class RasterOutput:
    """Per-pixel geometry buffers for one camera."""

    face_id: np.ndarray      # (h, w) int32, BACKGROUND where empty
    uv: np.ndarray           # (h, w, 2) float32, texel units
    texel_flat: np.ndarray   # (h, w) int64 flat texel index, -1 on background
    depth: np.ndarray        # (h, w) float32 eye-space depth, 0 on background
    jac: np.ndarray          # (h, w) float32 |J| in texel^2/pixel^2
    xyz: np.ndarray          # (h, w, 3) float32 world position
    tex_h: int
    tex_w: int

    @property
    def foreground(self) -> np.ndarray:
        return self.face_id != BACKGROUND

    @property
    def shape(self):
        return self.face_id.shape

    def coverage_counts(self) -> np.ndarray:
        """Pixels per texel, shape (tex_h, tex_w)."""
        fg = self.foreground
        counts = np.bincount(self.texel_flat[fg],
                             minlength=self.tex_h * self.tex_w)
        return counts.reshape(self.tex_h, self.tex_w)


def _camera_frame(camera: Camera):
    eye = np.asarray(camera.eye, dtype=np.float64)
    fwd = np.asarray(camera.target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(camera.up, dtype=np.float64))
    right = right / np.linalg.norm(right)
    up = np.cross(right, fwd)
    return eye, right, up, fwd


def rasterize(mesh: TriMesh, camera: Camera, tex_h: int, tex_w: int) -> RasterOutput:
    """Rasterize a UV'd mesh: depth-resolved geometry buffers for one view.

    Faces with any vertex closer than the near plane are dropped (no near
    clipping; cameras sit outside the normalized mesh).  Degenerate screen
    triangles are skipped.  Depth ties resolve to the lower face id, which
    keeps the output deterministic.
    """
    if mesh.face_uvs is None:
        raise ShapeError("rasterize requires a UV'd mesh")
    h, w = camera.image_h, camera.image_w
    eye, right, up, fwd = _camera_frame(camera)
    tanf = np.tan(camera.fov_y / 2.0)
    aspect = w / h

    face_id = np.full((h, w), BACKGROUND, dtype=np.int32)
    uv_buf = np.zeros((h, w, 2), dtype=np.float32)
    texel_buf = np.full((h, w), -1, dtype=np.int64)
    depth_buf = np.zeros((h, w), dtype=np.float32)
    jac_buf = np.zeros((h, w), dtype=np.float32)
    xyz_buf = np.zeros((h, w, 3), dtype=np.float32)
    out = RasterOutput(face_id, uv_buf, texel_buf, depth_buf, jac_buf,
                       xyz_buf, tex_h, tex_w)

    d = mesh.vertices - eye
    ze = d @ fwd
    xe = d @ right
    ye = d @ up

    tri = mesh.faces.astype(np.int64)
    z_tri = ze[tri]                      # (F, 3)
    keep = (z_tri > NEAR_PLANE).all(axis=1)
    if not keep.any():
        return out
    fids = np.nonzero(keep)[0]
    z_tri = z_tri[keep]
    sx = (xe[tri[keep]] / (z_tri * tanf * aspect) + 1.0) * (w / 2.0)
    sy = (1.0 - ye[tri[keep]] / (z_tri * tanf)) * (h / 2.0)

    # screen bounding boxes, clipped to the viewport
    x0 = np.clip(np.floor(sx.min(axis=1)).astype(np.int64), 0, w - 1)
    x1 = np.clip(np.ceil(sx.max(axis=1)).astype(np.int64), 0, w)
    y0 = np.clip(np.floor(sy.min(axis=1)).astype(np.int64), 0, h - 1)
    y1 = np.clip(np.ceil(sy.max(axis=1)).astype(np.int64), 0, h)
    bw = np.maximum(x1 - x0, 0)
    bh = np.maximum(y1 - y0, 0)

    # degenerate screen triangles are skipped, never an error
    e1x = sx[:, 1] - sx[:, 0]
    e1y = sy[:, 1] - sy[:, 0]
    e2x = sx[:, 2] - sx[:, 0]
    e2y = sy[:, 2] - sy[:, 0]
    det = e1x * e2y - e2x * e1y
    ok = (np.abs(det) > 1e-12) & (bw > 0) & (bh > 0)
    if not ok.any():
        return out
    fids, z_tri, sx, sy = fids[ok], z_tri[ok], sx[ok], sy[ok]
    x0, y0, bw, bh, det = x0[ok], y0[ok], bw[ok], bh[ok], det[ok]
    e1x, e1y, e2x, e2y = e1x[ok], e1y[ok], e2x[ok], e2y[ok]

    # flat candidate list: every (face, bbox pixel) pair
    counts = bw * bh
    total = int(counts.sum())
    sel = np.repeat(np.arange(len(fids)), counts)
    start = np.concatenate(([0], np.cumsum(counts)[:-1]))
    local = np.arange(total, dtype=np.int64) - np.repeat(start, counts)
    px = np.repeat(x0, counts) + local % np.repeat(bw, counts)
    py = np.repeat(y0, counts) + local // np.repeat(bw, counts)
    cx = px + 0.5
    cy = py + 0.5

    # screen-space barycentrics from the inverse edge matrix
    inv_det = 1.0 / det
    m00 = (e2y * inv_det)[sel]
    m01 = (-e2x * inv_det)[sel]
    m10 = (-e1y * inv_det)[sel]
    m11 = (e1x * inv_det)[sel]
    dx = cx - sx[sel, 0]
    dy = cy - sy[sel, 0]
    l1 = m00 * dx + m01 * dy
    l2 = m10 * dx + m11 * dy
    l0 = 1.0 - l1 - l2
    inside = (l0 >= 0.0) & (l1 >= 0.0) & (l2 >= 0.0)
    if not inside.any():
        return out

    # perspective-correct depth is all the z-buffer needs; every other
    # attribute is computed for winning pixels only.  Outside candidates can
    # produce garbage depths (their extrapolated 1/z may vanish); they are
    # masked out of the composite, so only the warnings need suppressing.
    iw = 1.0 / z_tri                        # (F, 3)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        q = l0 * iw[sel, 0] + l1 * iw[sel, 1] + l2 * iw[sel, 2]
        depth = 1.0 / q
        depth_in = np.where(inside, depth, 0.0)

        # z-buffer: nearest inside candidate per pixel.  One stable sort on a
        # composite key orders by (pixel, depth); candidates are generated in
        # ascending face order, so equal depths resolve to the lower face id.
        # Outside candidates sort to a shared tail bucket and are filtered
        # from the winners afterwards, avoiding big-array compression.
        key = py * w + px
        band = float(depth_in.max()) + 1.0
        composite = np.where(inside,
                             key.astype(np.float64) * band + depth_in,
                             np.inf)
    order = np.argsort(composite, kind="stable")
    key_o = key[order]
    first = np.ones(len(key_o), dtype=bool)
    first[1:] = key_o[1:] != key_o[:-1]
    win = order[first]
    win = win[inside[win]]
    if not len(win):
        return out

    fsel = sel[win]
    l0, l1, l2 = l0[win], l1[win], l2[win]
    depth = depth[win]
    rows, cols = py[win], px[win]

    uvt = mesh.face_uvs[fids] * np.array([tex_w, tex_h], dtype=np.float64)
    attr_u = uvt[:, :, 0] * iw
    attr_v = uvt[:, :, 1] * iw
    pu = l0 * attr_u[fsel, 0] + l1 * attr_u[fsel, 1] + l2 * attr_u[fsel, 2]
    pv = l0 * attr_v[fsel, 0] + l1 * attr_v[fsel, 1] + l2 * attr_v[fsel, 2]
    u_tex = pu * depth
    v_tex = pv * depth

    # gradients of the rational interpolants give the exact per-pixel Jacobian
    g0x = -(e2y + (-e1y)) * inv_det  # d l0/dx = -(d l1/dx + d l2/dx)
    g0y = -((-e2x) + e1x) * inv_det
    g1x, g1y = e2y * inv_det, -e2x * inv_det
    g2x, g2y = -e1y * inv_det, e1x * inv_det
    qx = (g0x * iw[:, 0] + g1x * iw[:, 1] + g2x * iw[:, 2])[fsel]
    qy = (g0y * iw[:, 0] + g1y * iw[:, 1] + g2y * iw[:, 2])[fsel]
    pux = (g0x * attr_u[:, 0] + g1x * attr_u[:, 1] + g2x * attr_u[:, 2])[fsel]
    puy = (g0y * attr_u[:, 0] + g1y * attr_u[:, 1] + g2y * attr_u[:, 2])[fsel]
    pvx = (g0x * attr_v[:, 0] + g1x * attr_v[:, 1] + g2x * attr_v[:, 2])[fsel]
    pvy = (g0y * attr_v[:, 0] + g1y * attr_v[:, 1] + g2y * attr_v[:, 2])[fsel]
    ux = (pux - u_tex * qx) * depth
    uy = (puy - u_tex * qy) * depth
    vx = (pvx - v_tex * qx) * depth
    vy = (pvy - v_tex * qy) * depth
    jac = np.abs(ux * vy - uy * vx)

    # world position via the same perspective-correct weights
    p3 = mesh.vertices[tri[keep][ok]]  # (F, 3 corners, xyz)
    pw = p3 * iw[:, :, None]
    xyz = (l0[:, None] * pw[fsel, 0] + l1[:, None] * pw[fsel, 1]
           + l2[:, None] * pw[fsel, 2]) * depth[:, None]

    face_id[rows, cols] = fids[fsel].astype(np.int32)
    uv_buf[rows, cols, 0] = u_tex
    uv_buf[rows, cols, 1] = v_tex
    tc = np.clip(u_tex.astype(np.int64), 0, tex_w - 1)
    tr = np.clip(v_tex.astype(np.int64), 0, tex_h - 1)
    texel_buf[rows, cols] = tr * tex_w + tc
    depth_buf[rows, cols] = depth
    jac_buf[rows, cols] = jac
    xyz_buf[rows, cols] = xyz.astype(np.float32)
    return out


def render_texture(tex: np.ndarray, raster: RasterOutput) -> np.ndarray:
    """Gather texels into an image; background pixels are zero."""
    tex = np.asarray(tex)
    if tex.ndim != 3 or tex.shape[0] != raster.tex_h or tex.shape[1] != raster.tex_w:
        raise ShapeError(
            f"texture {tex.shape} does not match raster "
            f"({raster.tex_h}, {raster.tex_w}, C)")
    h, w = raster.shape
    img = np.zeros((h, w, tex.shape[2]), dtype=np.float32)
    fg = raster.foreground
    img[fg] = tex.reshape(-1, tex.shape[2])[raster.texel_flat[fg]]
    return img


def inverse_render(img: np.ndarray, raster: RasterOutput, tex_h: int, tex_w: int):
    """Scatter-add an image back to texture space.

    Returns (sum_tex (H,W,C) float32, count_tex (H,W) int64).  Accumulation
    runs in float64 so the adjoint identity survives 32-bit storage.
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[:2] != raster.shape:
        raise ShapeError(f"image {img.shape} does not match raster {raster.shape}")
    if tex_h != raster.tex_h or tex_w != raster.tex_w:
        raise ShapeError("texture dims do not match the raster")
    c = img.shape[2]
    fg = raster.foreground
    idx = raster.texel_flat[fg]
    vals = img[fg].astype(np.float64)
    sums = np.empty((tex_h * tex_w, c), dtype=np.float64)
    for ch in range(c):
        sums[:, ch] = np.bincount(idx, weights=vals[:, ch],
                                  minlength=tex_h * tex_w)
    counts = np.bincount(idx, minlength=tex_h * tex_w)
    return (sums.reshape(tex_h, tex_w, c).astype(np.float32),
            counts.reshape(tex_h, tex_w))


def fill_background(img: np.ndarray, raster: RasterOutput,
                    rng: np.random.Generator) -> np.ndarray:
    """Replace background pixels with unit Gaussian noise.

    The sampler keeps every latent image at the unit-variance marginal of the
    current step; blank background would look like an impossible input to the
    denoiser.  A full-size draw is made regardless of coverage so the stream
    layout does not depend on the mask.
    """
    img = np.asarray(img, dtype=np.float32)
    bg = ~raster.foreground
    n_bg = int(bg.sum())
    out = img.copy()
    if n_bg:
        out[bg] = rng.standard_normal((n_bg, img.shape[2]), dtype=np.float32)
    return out


def normalized_depth(raster: RasterOutput) -> np.ndarray:
    """Disparity-style conditioning map: nearest surface 1, farthest 0, background 0."""
    fg = raster.foreground
    out = np.zeros(raster.shape, dtype=np.float32)
    if not fg.any():
        return out
    d = raster.depth[fg]
    lo, hi = float(d.min()), float(d.max())
    if hi - lo < 1e-12:
        out[fg] = 1.0
    else:
        out[fg] = (hi - raster.depth[fg]) / (hi - lo)
    return out
