"""Built-in property suites behind the `verify` CLI command.

Each check builds its own fixtures, runs one verifiable property of the
engine, and reports a CheckResult.  The acceptance test suite reuses these
for the criteria that match exactly; everything here runs on a plain CPU in
well under the stated budgets.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from .colorfield import HashGridConfig, HashGridField, distill
from .denoiser import (DeltaOracle, DenoiseRequest, GaussianOracle,
                       GaussianOracleParams)
from .diffusion import cfg_combine, ddim_sigma, ddim_step, make_schedule
from .fixtures import cube, unit_quad, uv_sphere
from .geometry import Camera, CameraPreset, make_cameras, texture_resolution
from .rasterizer import inverse_render, rasterize, render_texture
from .rng import RngTree, STREAM_INIT, STREAM_STEP
from .sims import (SimsConfig, aggregate_view, quality_from_raster,
                   renoise_visited, sims_round)


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0


def _timed(fn: Callable[[], CheckResult]) -> CheckResult:
    t0 = time.monotonic()
    res = fn()
    res.seconds = time.monotonic() - t0
    return res


def _full_frame_camera(distance=1.5, image=64):
    fov = 2.0 * math.atan(0.5 / distance)
    return Camera((distance, 0.0, 0.0), (0.0, 0.0, 0.0), (0.0, 1.0, 0.0),
                  fov, image, image)


# ---------------------------------------------------------------------------
# adjoint


def check_adjoint(n_fixtures: int = 20, tol: float = 1e-5) -> CheckResult:
    """<R(z), x> == <z, R^-1(x)> over random mesh/camera pairs."""
    rng = np.random.default_rng(2024)
    meshes = [unit_quad(), cube(), uv_sphere(), uv_sphere(6, 10, 64)]
    worst = 0.0
    for k in range(n_fixtures):
        mesh = meshes[k % len(meshes)]
        az, el = rng.uniform(0, 360), rng.uniform(-60, 75)
        eye = (1.5 * math.cos(math.radians(el)) * math.cos(math.radians(az)),
               1.5 * math.sin(math.radians(el)),
               1.5 * math.cos(math.radians(el)) * math.sin(math.radians(az)))
        cam = Camera(eye, (0, 0, 0), (0, 1, 0), rng.uniform(0.4, 1.0), 48, 48)
        raster = rasterize(mesh, cam, 64, 64)
        z = rng.standard_normal((64, 64, 4)).astype(np.float32)
        x = rng.standard_normal((48, 48, 4)).astype(np.float32)
        lhs = float(np.vdot(render_texture(z, raster).astype(np.float64),
                            x.astype(np.float64)))
        sums, _ = inverse_render(x, raster, 64, 64)
        rhs = float(np.vdot(z.astype(np.float64), sums.astype(np.float64)))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), 1e-12))
    return CheckResult("adjoint-identity", worst <= tol,
                       f"max relative error {worst:.2e} over {n_fixtures} fixtures")


# ---------------------------------------------------------------------------
# schedule


def check_schedule_shape() -> CheckResult:
    s = make_schedule()
    ok = (s.num_steps == 50 and s.substeps[0] == 1000
          and s.substeps.min() >= 300 and s.t_final == 300
          and abs(s.alpha_bar(1) - 0.99915) < 1e-12
          and (np.diff(s.alpha_bar_all[1:]) < 0).all())
    return CheckResult("schedule-shape", ok,
                       "50 substeps in (300,1000], alpha_bar monotone")


def check_sigma_identity() -> CheckResult:
    s = make_schedule()
    worst = 0.0
    for i in (1, 10, 25, 50):
        t_hi, t_lo = s.pair(i)
        a_hi, a_lo = s.alpha_bar(t_hi), s.alpha_bar(t_lo)
        post = (1 - a_lo) / (1 - a_hi) * (1 - a_hi / a_lo)
        worst = max(worst, abs(ddim_sigma(s, i, 1.0) ** 2 - post))
    return CheckResult("sigma-ddpm-identity", worst < 1e-12,
                       f"max |sigma^2 - posterior var| = {worst:.2e}")


def check_renoise_variance(tol: float = 0.02) -> CheckResult:
    """Re-noising fixed content from level t_{i-1} restores variance 1-a_i."""
    sched = make_schedule()
    rng = np.random.default_rng(2)
    worst = 0.0
    for i in (1, 10, 25, 40, 50):
        t_hi, t_lo = sched.pair(i)
        a_hi, a_lo = sched.alpha_bar(t_hi), sched.alpha_bar(t_lo)
        shape = (512, 512, 4)
        z_prev = (math.sqrt(1 - a_lo) * rng.standard_normal(shape)).astype(np.float32)
        eps = rng.standard_normal(shape).astype(np.float32)
        out = renoise_visited(z_prev, np.zeros(shape, np.float32),
                              np.ones(shape[:2], np.uint8), sched, i, eps)
        rel = abs(float(np.var(out)) - (1 - a_hi)) / (1 - a_hi)
        worst = max(worst, rel)
    return CheckResult("renoise-marginal-variance", worst <= tol,
                       f"max relative deviation {worst:.3%} at 5 schedule points")


# ---------------------------------------------------------------------------
# oracles


def check_delta_oracle_identity() -> CheckResult:
    from .diffusion import predict_x0

    sched = make_schedule()
    rng = np.random.default_rng(0)
    target = rng.standard_normal((8, 8, 4)).astype(np.float32)
    oracle = DeltaOracle({0: target}, sched)
    worst = 0.0
    for i in (1, 25, 50):
        t = sched.pair(i)[0]
        x = rng.standard_normal((8, 8, 4)).astype(np.float32)
        req = DenoiseRequest(latents=x, t=t, depth=np.zeros((8, 8)), view_id=0)
        xhat = predict_x0(x, oracle.predict_epsilon(req), sched, i)
        worst = max(worst, float(np.abs(xhat - target).max()))
    return CheckResult("delta-oracle-identity", worst < 1e-4,
                       f"x0 prediction constant in x_t, max err {worst:.1e}")


def check_gaussian_transport() -> CheckResult:
    mu, s = 0.7, 0.5
    sched = make_schedule(S=50, t_min=0, t_max=1000)
    oracle = GaussianOracle(GaussianOracleParams((mu,), (s,)), sched)
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1000, 64, 1)).astype(np.float32)
    for i in range(sched.num_steps, 0, -1):
        t = sched.pair(i)[0]
        req = DenoiseRequest(latents=x, t=t, depth=np.zeros(x.shape[:2]))
        x = ddim_step(x, oracle.predict_epsilon(req), sched, i, 0.0, 0.0)
    mean_ok = abs(float(x.mean()) - mu) < 0.05
    std_ok = abs(float(x.std()) - s) <= 0.1 * s
    return CheckResult(
        "gaussian-oracle-transport", mean_ok and std_ok,
        f"mean {float(x.mean()):.3f} (target {mu}), std {float(x.std()):.3f} (target {s})")


# ---------------------------------------------------------------------------
# sims


def check_single_view_equivalence(tol: float = 1e-6) -> CheckResult:
    quad = unit_quad()
    sched = make_schedule()
    cfg = SimsConfig(seed=123)
    oracle = GaussianOracle(GaussianOracleParams((0.7,), (0.2,)), sched)
    cam = _full_frame_camera()

    sims_traj: List[np.ndarray] = []
    sims_round(quad, [cam], (64, 64), sched, oracle, cfg,
               observer=lambda ev, st: sims_traj.append(st.x_out.copy())
               if ev == "view" else None)

    tree = RngTree(cfg.seed, namespace=1)
    z_t = tree.child(STREAM_INIT).standard_normal((64, 64, 4), dtype=np.float32)
    raster = rasterize(quad, cam, 64, 64)
    x = render_texture(z_t, raster)
    worst = 0.0
    for k, i in enumerate(range(sched.num_steps, 0, -1)):
        t_hi = sched.pair(i)[0]
        req = DenoiseRequest(latents=x, t=t_hi,
                             depth=np.zeros((64, 64), np.float32),
                             guidance=cfg.guidance, view_id=0)
        eps_raw = oracle.predict_epsilon(req)
        eps = cfg_combine(eps_raw, eps_raw, None, cfg.guidance)
        x = ddim_step(x, eps, sched, i, cfg.eta, cfg.tau_coarse,
                      tree.child(STREAM_STEP, i, 0))
        worst = max(worst, float(np.abs(sims_traj[k] - x).max()))
    return CheckResult("single-view-ddim-equivalence", worst <= tol,
                       f"max per-step deviation {worst:.2e} over 50 steps")


def check_delta_recovery() -> CheckResult:
    sphere = uv_sphere()
    sched = make_schedule()
    cfg = SimsConfig(eta=0.0, seed=7)
    cams = make_cameras(CameraPreset("default9"), sphere)
    rng = np.random.default_rng(42)
    z_star = rng.standard_normal((64, 64, 4)).astype(np.float32)
    rasters = [rasterize(sphere, c, 64, 64) for c in cams]
    targets = {n: render_texture(z_star, r) for n, r in enumerate(rasters)}
    oracle = DeltaOracle(targets, sched)
    result = sims_round(sphere, cams, (64, 64), sched, oracle, cfg)
    worst_view = max(
        float(np.abs(xhat[rasters[n].foreground]
                     - targets[n][rasters[n].foreground]).max())
        for n, xhat in enumerate(result.xhat0_views))
    cov = result.coverage_mask
    worst_tex = float(np.abs(result.z0[cov] - z_star[cov]).max())
    ok = worst_view <= 1e-2 and worst_tex <= 2e-2
    return CheckResult(
        "delta-oracle-recovery", ok,
        f"view err {worst_view:.1e} (<=1e-2), texture err {worst_tex:.1e} (<=2e-2)")


def check_aggregation_quality() -> CheckResult:
    """Head-on view (|J|=1) beats the pulled-back view (|J|=4), exactly."""
    quad = unit_quad()
    near_cam = _full_frame_camera(distance=1.5)
    far_cam = Camera((3.0, 0.0, 0.0), (0.0, 0.0, 0.0), (0.0, 1.0, 0.0),
                     near_cam.fov_y, 64, 64)
    r_near = rasterize(quad, near_cam, 64, 64)
    r_far = rasterize(quad, far_cam, 64, 64)
    z = np.zeros((64, 64, 1), np.float32)
    mask = np.zeros((64, 64), np.uint8)
    quality = np.full((64, 64), -np.inf, np.float32)
    s_far, c_far = inverse_render(np.full((64, 64, 1), 2.0, np.float32),
                                  r_far, 64, 64)
    q_far, _ = quality_from_raster(r_far)
    z, mask, quality = aggregate_view(z, s_far, c_far, q_far, mask, quality)
    s_near, c_near = inverse_render(np.full((64, 64, 1), 1.0, np.float32),
                                    r_near, 64, 64)
    q_near, _ = quality_from_raster(r_near)
    z, mask, quality = aggregate_view(z, s_near, c_near, q_near, mask, quality)
    shared = (c_far > 0) & (c_near > 0)
    z2, _, _ = aggregate_view(z, s_far, c_far, q_far, mask, quality)
    ok = (bool(shared.any()) and (z[shared] == 1.0).all()
          and (z2[shared] == 1.0).all())
    return CheckResult("quality-aggregation", bool(ok),
                       f"head-on wins all {int(shared.sum())} shared texels exactly")


def check_refine_policy() -> CheckResult:
    quad = unit_quad()
    h, w = texture_resolution(quad, "refine", 64,
                              old_fov=math.radians(60),
                              new_fov=math.radians(30))
    ok = (h, w) == (144, 144)
    return CheckResult("refinement-policy", ok,
                       f"refine(60->30 deg) maps 64 -> {h} (expect 144)")


# ---------------------------------------------------------------------------
# colorfield


def check_colorfield_gradients(tol: float = 1e-3) -> CheckResult:
    field = HashGridField(rng=np.random.default_rng(11))
    rng = np.random.default_rng(12)
    p = field.parameters()
    p["tables"][...] = rng.uniform(-0.5, 0.5, p["tables"].shape)
    for k in ("w1", "w2", "w3"):
        p[k][...] = rng.normal(0, 0.4, p[k].shape)
    for k in ("b1", "b2", "b3"):
        p[k][...] = rng.normal(0, 0.3, p[k].shape)
    xyz = rng.uniform(-0.45, 0.45, (10, 3))
    rgb = rng.uniform(0.1, 0.9, (10, 3))
    _, grads = field.loss_and_grads(xyz, rgb)

    def loss():
        pred = field.forward(xyz)
        d = pred - rgb
        return float((d * d).sum() / d.size)

    worst = 0.0
    h = 1e-3
    for key in ("tables", "w1", "b1", "w2", "b2", "w3", "b3"):
        g = grads[key].reshape(-1)
        flat = p[key].reshape(-1)
        touched = np.nonzero(np.abs(g) > 1e-12)[0]
        pick = touched[rng.permutation(len(touched))[:25]]
        for idx in pick:
            orig = flat[idx]
            flat[idx] = orig + h
            lp = loss()
            flat[idx] = orig - h
            lm = loss()
            flat[idx] = orig
            fd = (lp - lm) / (2 * h)
            rel = abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-8)
            worst = max(worst, rel)
    return CheckResult("colorfield-gradients", worst < tol,
                       f"max relative error {worst:.2e} across all groups")


def check_colorfield_constant_fit() -> CheckResult:
    field = HashGridField(rng=np.random.default_rng(21))
    rng = np.random.default_rng(22)
    xyz = rng.uniform(-0.5, 0.5, (256, 3))
    rgb = np.tile([0.6, 0.5, 0.4], (256, 1))
    distill((xyz, rgb), field, iters=100, lr=0.01)
    pred = field.forward(xyz)
    mse = float(((pred - rgb) ** 2).sum() / pred.size)
    return CheckResult("colorfield-constant-fit", mse < 1e-4,
                       f"loss {mse:.2e} after 100 Adam iterations at lr 0.01")


def check_checkerboard_psnr(iters: int = 500) -> CheckResult:
    quad = unit_quad()
    cam = _full_frame_camera()
    raster = rasterize(quad, cam, 64, 64)
    xyz = raster.xyz.reshape(-1, 3).astype(np.float64)
    rr, cc = np.meshgrid(np.arange(64), np.arange(64), indexing="ij")
    checker = ((rr // 8 + cc // 8) % 2).astype(np.float64)
    rgb = 0.2 + 0.6 * np.stack([checker] * 3, axis=-1).reshape(-1, 3)
    field = HashGridField(rng=np.random.default_rng(24))
    distill((xyz, rgb), field, iters=iters, lr=0.01, batch=4096)
    pred = field.forward(xyz)
    mse = float(((pred - rgb) ** 2).sum() / pred.size)
    psnr = 10.0 * math.log10(1.0 / mse)
    return CheckResult("colorfield-checkerboard-psnr", psnr > 30.0,
                       f"PSNR {psnr:.1f} dB after {iters} iterations")


SUITES: Dict[str, List[Callable[[], CheckResult]]] = {
    "adjoint": [check_adjoint],
    "schedule": [check_schedule_shape, check_sigma_identity,
                 check_renoise_variance],
    "oracle": [check_delta_oracle_identity, check_gaussian_transport],
    "sims": [check_single_view_equivalence, check_delta_recovery,
             check_aggregation_quality, check_refine_policy],
    "colorfield": [check_colorfield_gradients, check_colorfield_constant_fit,
                   check_checkerboard_psnr],
}


def run_suite(name: str) -> List[CheckResult]:
    if name == "all":
        checks = [fn for suite in SUITES.values() for fn in suite]
    elif name in SUITES:
        checks = SUITES[name]
    else:
        raise KeyError(f"unknown suite {name!r}; "
                       f"pick from {sorted(SUITES) + ['all']}")
    return [_timed(fn) for fn in checks]
