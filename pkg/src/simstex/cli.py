"""Command-line entry points: texture, verify, render.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Configuration
precedence is flags > config file > defaults; the manifest written next to
the outputs records the resolved values plus everything needed to reproduce
the run bit-exactly.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import verify as verify_mod
from .colorfield import (HashGridField, bake_texture, distill,
                         sample_arrays_from_views, save_field)
from .denoiser import RemoteDenoiser, parse_denoiser_spec
from .diffusion import GuidanceConfig, make_schedule
from .errors import SimstexError
from .geometry import (Camera, CameraPreset, load_obj, make_cameras,
                       naive_atlas, normalize_mesh)
from .io_formats import channel_mosaic, load_ltx, save_ltx, save_png
from .rasterizer import rasterize, render_texture
from .sims import SimsConfig, texture_pipeline

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


@dataclass
class RunConfig:
    mesh: str = ""
    prompt: str = ""
    preset: str = "default9"
    denoiser: str = "gaussian:0.5,0.3"
    rounds: int = 2
    seed: int = 0
    eta: float = 1.0
    tau_coarse: float = 0.5
    tau_refine: float = 0.0
    steps: int = 50
    t_min: int = 300
    t_max: int = 1000
    refine_t: int = 500
    w_joint: float = 5.0
    w_text: float = 0.0
    channels: int = 4
    base_resolution: int = 64
    image_size: int = 64
    distill_iters: int = 300
    out: str = "out"


def _merged_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        with open(args.config) as fh:
            file_vals = json.load(fh)
        for k, v in file_vals.items():
            if not hasattr(cfg, k):
                raise SimstexError(f"unknown config key {k!r}")
            setattr(cfg, k, v)
    for k in vars(cfg):
        v = getattr(args, k, None)
        if v is not None:
            setattr(cfg, k, v)
    if not cfg.mesh:
        raise SimstexError("no mesh given (flag --mesh or config file)")
    return cfg


def _load_mesh(path: str, texels: int):
    mesh = normalize_mesh(load_obj(path))
    if not mesh.has_uvs:
        mesh = naive_atlas(mesh, texels)
    mesh.validate()
    return mesh


def cmd_texture(args: argparse.Namespace) -> int:
    cfg = _merged_config(args)
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    mesh = _load_mesh(cfg.mesh, cfg.base_resolution)
    sched = make_schedule(S=cfg.steps, t_min=cfg.t_min, t_max=cfg.t_max)
    sims_cfg = SimsConfig(
        eta=cfg.eta, tau_coarse=cfg.tau_coarse, tau_refine=cfg.tau_refine,
        steps=cfg.steps, t_min=cfg.t_min, t_max=cfg.t_max,
        refine_t=cfg.refine_t,
        guidance=GuidanceConfig(cfg.w_joint, cfg.w_text),
        seed=cfg.seed, channels=cfg.channels)
    denoiser = parse_denoiser_spec(cfg.denoiser, sched, mesh)
    preset = CameraPreset(cfg.preset)

    t0 = time.time()
    result = texture_pipeline(
        mesh, cfg.prompt, preset, sched, denoiser, sims_cfg,
        rounds=cfg.rounds, base_resolution=cfg.base_resolution,
        image_hw=(cfg.image_size, cfg.image_size))

    save_ltx(out_dir / "z0.ltx", result.z0)
    views_dir = out_dir / "views"
    views_dir.mkdir(exist_ok=True)
    for n, view in enumerate(result.xhat0_views):
        save_ltx(views_dir / f"view_{n:02d}.ltx", view)

    manifest = dict(result.manifest)
    manifest["config"] = asdict(cfg)
    manifest["mesh_sha256"] = hashlib.sha256(
        Path(cfg.mesh).read_bytes()).hexdigest()
    manifest["schedule_json"] = sched.to_json()

    rgb_views = None
    if isinstance(denoiser, RemoteDenoiser):
        rgb_views = [denoiser.decode(v) for v in result.xhat0_views]
        # decoded views are 8x the latent size; rasterize at matching size
        big = rgb_views[0].shape[0]
        from dataclasses import replace as dc_replace

        big_cams = [dc_replace(c, image_h=big, image_w=big)
                    for c in result.cameras]
        rgb_rasters = [rasterize(mesh, c, *result.z0.shape[:2])
                       for c in big_cams]
    elif cfg.channels == 3:
        rgb_views = [np.clip(v, 0.0, 1.0) for v in result.xhat0_views]
        rgb_rasters = result.rasters
    if rgb_views is not None:
        xyz, rgb = sample_arrays_from_views(rgb_views, rgb_rasters)
        fieldgen = np.random.default_rng(cfg.seed)
        hash_field = HashGridField(rng=fieldgen)
        distill((xyz, rgb), hash_field, iters=cfg.distill_iters, lr=0.01,
                rng=np.random.default_rng(cfg.seed + 1))
        tex_side = max(result.z0.shape[0] * 2, 256)
        texture = bake_texture(hash_field, mesh, tex_side, tex_side)
        save_png(out_dir / "texture.png", texture)
        save_field(out_dir / "field.hgf", hash_field)
        manifest["texture_png"] = "texture.png"
        manifest["field_checkpoint"] = "field.hgf"
        manifest["texture_resolution"] = [tex_side, tex_side]

    manifest["total_runtime_s"] = time.time() - t0
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    print(f"wrote {out_dir}/manifest.json "
          f"(coverage {manifest['coverage_round1']:.1%}, "
          f"{manifest['total_runtime_s']:.1f}s)")
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    results = verify_mod.run_suite(args.suite)
    width = max(len(r.name) for r in results)
    failed = 0
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        print(f"{r.name:<{width}}  {status}  [{r.seconds:6.2f}s]  {r.detail}")
        failed += 0 if r.ok else 1
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


def _camera_from_args(args, mesh) -> Camera:
    if args.pose:
        with open(args.pose) as fh:
            return Camera.from_dict(json.load(fh))
    preset = CameraPreset(args.preset)
    cams = make_cameras(preset, mesh, None, args.image_size, args.image_size)
    if not 0 <= args.camera_index < len(cams):
        raise SimstexError(f"camera index {args.camera_index} out of range "
                           f"for preset {args.preset}")
    return cams[args.camera_index]


def cmd_render(args: argparse.Namespace) -> int:
    mesh = _load_mesh(args.mesh, 64)
    tex = load_ltx(args.texture)
    cam = _camera_from_args(args, mesh)
    raster = rasterize(mesh, cam, tex.shape[0], tex.shape[1])
    img = render_texture(tex, raster)
    if tex.shape[2] == 3:
        save_png(args.out, img)
    else:
        save_png(args.out, channel_mosaic(img))
    print(f"wrote {args.out}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="simstex",
                description="multiview-interlaced latent texture sampler")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("texture", parents=[], help="sample a texture")
    t.add_argument("--config", help="JSON config file (flags win)")
    t.add_argument("--mesh")
    t.add_argument("--prompt")
    t.add_argument("--preset", choices=["default9", "jittered18", "human24"])
    t.add_argument("--denoiser",
                   help="zero | gaussian:mu,s | delta:tex.ltx | remote:host:port")
    t.add_argument("--rounds", type=int, choices=[1, 2])
    t.add_argument("--seed", type=int)
    t.add_argument("--eta", type=float)
    t.add_argument("--tau-coarse", dest="tau_coarse", type=float)
    t.add_argument("--tau-refine", dest="tau_refine", type=float)
    t.add_argument("--steps", type=int)
    t.add_argument("--t-min", dest="t_min", type=int)
    t.add_argument("--t-max", dest="t_max", type=int)
    t.add_argument("--refine-t", dest="refine_t", type=int)
    t.add_argument("--w-joint", dest="w_joint", type=float)
    t.add_argument("--w-text", dest="w_text", type=float)
    t.add_argument("--channels", type=int, choices=[3, 4])
    t.add_argument("--base-resolution", dest="base_resolution", type=int)
    t.add_argument("--image-size", dest="image_size", type=int)
    t.add_argument("--distill-iters", dest="distill_iters", type=int)
    t.add_argument("--out")
    t.set_defaults(fn=cmd_texture)

    v = sub.add_parser("verify", help="run built-in property suites")
    v.add_argument("suite", nargs="?", default="all",
                   choices=["adjoint", "schedule", "oracle", "sims",
                            "colorfield", "all"])
    v.set_defaults(fn=cmd_verify)

    r = sub.add_parser("render", help="render a texture to a PNG preview")
    r.add_argument("--texture", required=True, help=".ltx texture path")
    r.add_argument("--mesh", required=True)
    r.add_argument("--camera-index", dest="camera_index", type=int, default=0)
    r.add_argument("--preset", default="default9",
                   choices=["default9", "jittered18", "human24"])
    r.add_argument("--pose", help="JSON camera pose file")
    r.add_argument("--image-size", dest="image_size", type=int, default=256)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except SimstexError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
