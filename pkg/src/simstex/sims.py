"""Sequential interlaced multiview sampling over a shared latent texture.

One denoising step sweeps all cameras in order.  Each view renders the
current texture, takes a DDIM step in image space, and scatters the result
back; a per-texel quality buffer (negative UV-Jacobian magnitude) decides
which view's content wins where views overlap.  Texels already updated in
the current sweep are re-noised back to the step's input level with a single
shared texture-space noise draw before the next view renders them, so all
views keep seeing 3D-consistent input at the right noise level.

With a single full-coverage camera the scatter/gather pair is the identity
and the whole loop reduces to plain DDIM on that view.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from .diffusion import (GuidanceConfig, NoiseSchedule, cfg_combine, ddim_step,
                        predict_x0, stochastic_encode)
from .denoiser import DenoiseRequest
from .errors import ShapeError
from .geometry import (Camera, CameraPreset, TriMesh, fit_fov, make_cameras,
                       prompt_view_suffix, texture_resolution)
from .rasterizer import (RasterOutput, fill_background, inverse_render,
                         normalized_depth, rasterize, render_texture)
from .rng import (RngTree, STREAM_BACKGROUND, STREAM_ENCODE, STREAM_INIT,
                  STREAM_JITTER, STREAM_SHARED, STREAM_STEP)

CameraSource = Union[Sequence[Camera], Callable[[int], Sequence[Camera]]]


@dataclass
class SimsConfig:
    eta: float = 1.0
    tau_coarse: float = 0.5
    tau_refine: float = 0.0
    steps: int = 50
    t_min: int = 300
    t_max: int = 1000
    refine_t: int = 500
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    seed: int = 0
    channels: int = 4

    def __post_init__(self):
        for tau in (self.tau_coarse, self.tau_refine):
            if not 0.0 <= tau <= 1.0:
                raise ValueError("tau must lie in [0, 1]")
        if not self.t_min < self.refine_t < self.t_max:
            raise ValueError("refine_t must lie inside (t_min, t_max)")


@dataclass
class SimsState:
    """Loop state handed to observers after every view update."""

    z: np.ndarray            # running latent texture (level t_{i-1} on visited)
    z_step_start: np.ndarray  # texture as it was when the step began (level t_i)
    mask: np.ndarray         # (H, W) uint8, texels visited in this sweep
    quality: np.ndarray      # (H, W) float32 best -|J| so far, -inf unseen
    step_index: int          # pair index i (S..1)
    t_hi: int
    t_lo: int
    view_index: int = -1
    cameras: Sequence[Camera] = ()
    x_in: Optional[np.ndarray] = None   # denoiser input for this view
    x_out: Optional[np.ndarray] = None  # DDIM output for this view


@dataclass
class SimsResult:
    z0: np.ndarray                       # clean aggregate of the final x0 estimates
    xhat0_views: List[np.ndarray]
    z_final: np.ndarray                  # running texture after the last step (level t_min)
    coverage_mask: np.ndarray            # texels ever written into z0
    coverage_fraction: float


def renoise_visited(z_prev: np.ndarray, z_i: np.ndarray, mask: np.ndarray,
                    sched: NoiseSchedule, i: int,
                    eps_shared: np.ndarray) -> np.ndarray:
    """Push visited texels from level t_{i-1} back up to level t_i.

    Forward transition sqrt(a_i/a_{i-1}) * z + sqrt(1 - a_i/a_{i-1}) * eps,
    the unique scaling that preserves the marginal variance 1 - a_i.
    Unvisited texels keep their step-start value.
    """
    t_hi, t_lo = sched.pair(i)
    ratio = sched.alpha_bar(t_hi) / sched.alpha_bar(t_lo)
    renoised = (math.sqrt(ratio) * z_prev
                + math.sqrt(1.0 - ratio) * eps_shared).astype(np.float32)
    m = np.asarray(mask, dtype=bool)
    return np.where(m[..., None], renoised, z_i)


def _update_region(count_tex: np.ndarray, q_view: np.ndarray,
                   quality: np.ndarray) -> np.ndarray:
    """Texels this view both covers and sees better than any earlier view."""
    return (count_tex > 0) & (q_view > quality)


def aggregate_view(z_run: np.ndarray, sum_tex: np.ndarray,
                   count_tex: np.ndarray, q_view: np.ndarray,
                   mask: np.ndarray, quality: np.ndarray):
    """Fold one view's scattered content into the running texture.

    Covered texels whose view quality beats the buffer take the per-texel
    pixel mean; the visited mask and quality buffer then absorb this view.
    Returns the updated (z_run, mask, quality).
    """
    update = _update_region(count_tex, q_view, quality)
    if update.any():
        denom = count_tex[update, None].astype(np.float32)
        z_run = z_run.copy()
        z_run[update] = sum_tex[update] / denom
    mask = np.minimum(mask + (count_tex > 0), 1).astype(np.uint8)
    quality = np.maximum(quality, q_view.astype(np.float32))
    return z_run, mask, quality


def quality_from_raster(raster: RasterOutput):
    """Scatter -|J| to texture space; -inf where the view covers nothing.

    Returns (q_view (H,W) float32, coverage count (H,W) int64).
    """
    fg = raster.foreground
    neg_j = np.zeros(raster.shape + (1,), dtype=np.float32)
    neg_j[fg, 0] = -raster.jac[fg]
    q_sum, count = inverse_render(neg_j, raster, raster.tex_h, raster.tex_w)
    q_view = np.where(count > 0, q_sum[..., 0], -np.inf).astype(np.float32)
    return q_view, count


class _ViewGeometry:
    """Raster plus everything derived from it alone (not from the texture)."""

    __slots__ = ("raster", "depth", "q_view")

    def __init__(self, raster: RasterOutput):
        self.raster = raster
        self.depth = normalized_depth(raster)
        self.q_view, _ = quality_from_raster(raster)


def _resolve_cameras(cameras: CameraSource, step_i: int) -> Sequence[Camera]:
    if callable(cameras):
        return cameras(step_i)
    return cameras


def sims_round(mesh: TriMesh, cameras: CameraSource, tex_hw, sched: NoiseSchedule,
               denoiser, cfg: SimsConfig, z_init: Optional[np.ndarray] = None,
               *, tau: Optional[float] = None, start_index: Optional[int] = None,
               prompt: str = "", rng: Optional[RngTree] = None,
               observer: Optional[Callable[[str, SimsState], None]] = None
               ) -> SimsResult:
    """Run one full sampling round and return the clean texture estimate.

    `cameras` is either a fixed list (rasterized once) or a callable
    step -> list for per-step jittered sweeps.  `z_init` replaces the unit
    Gaussian texture initialization; pair `start_index` with it to resume
    from a partially noised state.  The returned z0 aggregates the final
    clean-sample predictions; texels no camera ever saw stay at zero and are
    excluded from `coverage_mask`.
    """
    tex_h, tex_w = int(tex_hw[0]), int(tex_hw[1])
    if tex_h % 8 or tex_w % 8:
        raise ShapeError("texture sides must be multiples of 8")
    if rng is None:
        rng = RngTree(cfg.seed, namespace=1)
    if tau is None:
        tau = cfg.tau_coarse
    c = cfg.channels
    if z_init is not None:
        z = np.asarray(z_init, dtype=np.float32).copy()
        if z.shape != (tex_h, tex_w, c):
            raise ShapeError(f"z_init shape {z.shape} != {(tex_h, tex_w, c)}")
        if not np.isfinite(z).all():
            raise ShapeError("z_init contains non-finite values")
    else:
        z = rng.child(STREAM_INIT).standard_normal((tex_h, tex_w, c),
                                                   dtype=np.float32)
    s_first = start_index if start_index is not None else sched.num_steps

    static_cams = None if callable(cameras) else list(cameras)
    static_geo = None
    if static_cams is not None:
        static_geo = [_ViewGeometry(rasterize(mesh, cam, tex_h, tex_w))
                      for cam in static_cams]

    zhat0 = np.zeros((tex_h, tex_w, c), dtype=np.float32)
    mask0 = np.zeros((tex_h, tex_w), dtype=np.uint8)
    quality0 = np.full((tex_h, tex_w), -np.inf, dtype=np.float32)
    xhat0_views: List[np.ndarray] = []

    for i in range(s_first, 0, -1):
        t_hi, t_lo = sched.pair(i)
        if static_cams is not None:
            cams, geo = static_cams, static_geo
        else:
            cams = list(_resolve_cameras(cameras, i))
            geo = [_ViewGeometry(rasterize(mesh, cam, tex_h, tex_w))
                   for cam in cams]
        if not cams:
            raise ShapeError("camera sweep is empty")
        mask = np.zeros((tex_h, tex_w), dtype=np.uint8)
        quality = np.full((tex_h, tex_w), -np.inf, dtype=np.float32)
        eps_shared = rng.child(STREAM_SHARED, i).standard_normal(
            (tex_h, tex_w, c), dtype=np.float32)
        z_step_start = z

        for n, (cam, view) in enumerate(zip(cams, geo)):
            raster = view.raster
            z_in = renoise_visited(z, z_step_start, mask, sched, i, eps_shared)
            x_render = render_texture(z_in, raster)
            x_in = fill_background(x_render, raster,
                                   rng.child(STREAM_BACKGROUND, i, n))
            req = DenoiseRequest(
                latents=x_in, t=t_hi, depth=view.depth,
                prompt=prompt, view_suffix=prompt_view_suffix(cam),
                guidance=cfg.guidance, view_id=n, camera=cam)
            eps_raw = denoiser.predict_epsilon(req)
            eps = cfg_combine(eps_raw, eps_raw,
                              eps_raw if cfg.guidance.w_text > 0 else None,
                              cfg.guidance)
            x_next = ddim_step(x_in, eps, sched, i, cfg.eta, tau,
                               rng.child(STREAM_STEP, i, n))
            sum_tex, count = inverse_render(x_next, raster, tex_h, tex_w)
            q_view = view.q_view

            if i == 1:
                xhat0 = predict_x0(x_in, eps, sched, i)
                xhat0_views.append(xhat0)
                sum0, _ = inverse_render(xhat0, raster, tex_h, tex_w)
                upd0 = _update_region(count, q_view, quality0)
                if upd0.any():
                    zhat0[upd0] = sum0[upd0] / count[upd0, None].astype(np.float32)
                mask0 = np.minimum(mask0 + (count > 0), 1).astype(np.uint8)
                quality0 = np.maximum(quality0, q_view)

            z, mask, quality = aggregate_view(z, sum_tex, count, q_view,
                                              mask, quality)
            if observer is not None:
                observer("view", SimsState(z, z_step_start, mask, quality,
                                           i, t_hi, t_lo, n, cams,
                                           x_in, x_next))
        if observer is not None:
            observer("step", SimsState(z, z_step_start, mask, quality,
                                       i, t_hi, t_lo, -1, cams))

    covered = mask0.astype(bool)
    return SimsResult(
        z0=zhat0, xhat0_views=xhat0_views, z_final=z,
        coverage_mask=covered,
        coverage_fraction=float(covered.mean()),
    )


# ---------------------------------------------------------------------------
# two-round pipeline


@dataclass
class PipelineResult:
    z0: np.ndarray
    xhat0_views: List[np.ndarray]
    cameras: List[Camera]
    rasters: List[RasterOutput]
    manifest: dict
    round1: SimsResult
    round2: Optional[SimsResult] = None
    round2_init: Optional[np.ndarray] = None


def jittered_camera_source(preset: CameraPreset, mesh: TriMesh, seed: int,
                           image_hw=(64, 64)) -> Callable[[int], List[Camera]]:
    """Per-step camera factory: the preset re-jittered at every step."""
    jit = CameraPreset(kind="jittered18", distance=preset.distance) \
        if preset.kind in ("default9", "jittered18") else preset

    def source(step_i: int) -> List[Camera]:
        seq = np.random.SeedSequence((seed, STREAM_JITTER, step_i))
        gen = np.random.default_rng(seq)
        if jit.kind == "jittered18":
            return make_cameras(jit, mesh, gen, image_hw[0], image_hw[1])
        # cylinder presets keep their count; jitter azimuths in place
        cams = make_cameras(jit, mesh, None, image_hw[0], image_hw[1])
        out = []
        for cam in cams:
            d_az = math.radians(float(gen.uniform(-10.0, 10.0)))
            eye = np.asarray(cam.eye)
            rot = np.array([
                [math.cos(d_az), 0.0, -math.sin(d_az)],
                [0.0, 1.0, 0.0],
                [math.sin(d_az), 0.0, math.cos(d_az)],
            ])
            rel = eye - np.asarray(cam.target)
            out.append(replace(cam, eye=tuple(rot @ rel + np.asarray(cam.target))))
        return out

    return source


def _narrow_cameras(cams: List[Camera], scale: float) -> List[Camera]:
    return [replace(c, fov_y=2.0 * math.atan(math.tan(c.fov_y / 2.0) * scale))
            for c in cams]


def texture_pipeline(mesh: TriMesh, prompt: str, preset: CameraPreset,
                       sched: NoiseSchedule, denoiser, cfg: SimsConfig,
                       *, rounds: int = 2, base_resolution: int = 64,
                       refine_tan_scale: float = 0.5,
                       image_hw=(64, 64)) -> PipelineResult:
    """Coarse sampling round, optional re-noised refinement round, manifest.

    Round 1 sweeps per-step jittered wide-FOV cameras over a coarse texture.
    Round 2 upsamples the coarse result, re-noises it to the substep nearest
    `cfg.refine_t`, and re-runs the sweep with the fixed narrow-FOV preset.
    """
    t0 = time.time()
    coarse_hw = texture_resolution(mesh, "coarse", base_resolution)
    jitter_source = jittered_camera_source(preset, mesh, cfg.seed, image_hw)
    round1 = sims_round(mesh, jitter_source, coarse_hw, sched, denoiser, cfg,
                        tau=cfg.tau_coarse, prompt=prompt,
                        rng=RngTree(cfg.seed, namespace=1))
    round1_time = time.time() - t0

    base_cams = make_cameras(preset, mesh, None, image_hw[0], image_hw[1])
    manifest = {
        "prompt": prompt,
        "preset": preset.to_json(),
        "schedule": sched.params,
        "eta": cfg.eta,
        "tau_coarse": cfg.tau_coarse,
        "tau_refine": cfg.tau_refine,
        "guidance": {"w_joint": cfg.guidance.w_joint,
                     "w_text": cfg.guidance.w_text},
        "seed": cfg.seed,
        "rounds": rounds,
        "channels": cfg.channels,
        "image_hw": list(image_hw),
        "coarse_resolution": list(coarse_hw),
        "refine_t": cfg.refine_t,
        "base_cameras": [c.to_dict() for c in base_cams],
        "coverage_round1": round1.coverage_fraction,
    }

    if rounds == 1:
        manifest["runtime_s"] = time.time() - t0
        cams = [c for c in jitter_source(1)]
        rasters = [rasterize(mesh, c, *coarse_hw) for c in cams]
        return PipelineResult(round1.z0, round1.xhat0_views, cams, rasters,
                              manifest, round1)

    old_fov = fit_fov(mesh, preset.distance)
    new_fov = 2.0 * math.atan(math.tan(old_fov / 2.0) * refine_tan_scale)
    fine_hw = texture_resolution(mesh, "refine", coarse_hw[0],
                                 old_fov=old_fov, new_fov=new_fov)
    fine_cams = _narrow_cameras(base_cams, refine_tan_scale)

    # nearest-neighbor upsample of the coarse clean estimate
    ry = (np.arange(fine_hw[0]) * coarse_hw[0]) // fine_hw[0]
    rx = (np.arange(fine_hw[1]) * coarse_hw[1]) // fine_hw[1]
    z_up = round1.z0[np.ix_(ry, rx)]
    cov_up = round1.coverage_mask[np.ix_(ry, rx)]

    rng2 = RngTree(cfg.seed, namespace=2)
    start_index = sched.start_index_for(cfg.refine_t)
    t_start = sched.pair(start_index)[0]
    encoded = stochastic_encode(z_up, sched, t_start, rng2.child(STREAM_ENCODE))
    fresh = rng2.child(STREAM_INIT).standard_normal(
        z_up.shape, dtype=np.float32)
    z_init = np.where(cov_up[..., None], encoded, fresh)

    round2 = sims_round(mesh, fine_cams, fine_hw, sched, denoiser, cfg,
                        z_init=z_init, tau=cfg.tau_refine,
                        start_index=start_index, prompt=prompt, rng=rng2)
    rasters = [rasterize(mesh, c, *fine_hw) for c in fine_cams]
    manifest.update({
        "refine_resolution": list(fine_hw),
        "refine_t_start": t_start,
        "refine_fov_y": new_fov,
        "coverage_round2": round2.coverage_fraction,
        "round1_runtime_s": round1_time,
        "runtime_s": time.time() - t0,
    })
    return PipelineResult(round2.z0, round2.xhat0_views, fine_cams, rasters,
                          manifest, round1, round2, z_init)
