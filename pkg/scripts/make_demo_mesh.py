#!/usr/bin/env python3
"""Write the built-in demo meshes as OBJ files."""

import argparse
from pathlib import Path

from simstex.fixtures import cube, unit_quad, uv_sphere
from simstex.geometry import save_obj


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="demo_meshes")
    parser.add_argument("--sphere-lat", type=int, default=8)
    parser.add_argument("--sphere-lon", type=int, default=16)
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_obj(unit_quad(), out / "quad.obj")
    save_obj(cube(), out / "cube.obj")
    save_obj(uv_sphere(args.sphere_lat, args.sphere_lon), out / "sphere.obj")
    print(f"wrote quad.obj, cube.obj, sphere.obj to {out}/")


if __name__ == "__main__":
    main()
