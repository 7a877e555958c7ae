#!/usr/bin/env python3
"""End-to-end demo: sample an RGB-mode texture on the sphere with the
Gaussian oracle, bake it, and render previews from three views.

No model weights needed.  With the bridge running
(`python -m simstex_bridge.server --port 7461`), pass
--denoiser remote:127.0.0.1:7461 to drive the wire path instead.
"""

import argparse
import subprocess
import sys
import tempfile
from pathlib import Path

from simstex.fixtures import uv_sphere
from simstex.geometry import save_obj


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="demo_out")
    parser.add_argument("--denoiser", default="gaussian:0.65,0.2")
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--rounds", type=int, default=2, choices=[1, 2])
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mesh_path = out / "sphere.obj"
    save_obj(uv_sphere(), mesh_path)

    run = [sys.executable, "-m", "simstex.cli", "texture",
           "--mesh", str(mesh_path), "--denoiser", args.denoiser,
           "--channels", "3", "--seed", str(args.seed),
           "--rounds", str(args.rounds), "--out", str(out / "run")]
    print("+", " ".join(run))
    subprocess.run(run, check=True)

    for idx in (0, 3, 8):
        render = [sys.executable, "-m", "simstex.cli", "render",
                  "--texture", str(out / "run" / "z0.ltx"),
                  "--mesh", str(mesh_path),
                  "--camera-index", str(idx),
                  "--out", str(out / f"preview_{idx}.png")]
        subprocess.run(render, check=True)
    print(f"demo complete; see {out}/")


if __name__ == "__main__":
    main()
