"""Built-in meshes for tests, verification suites, and demos."""

from __future__ import annotations

import math

import numpy as np

from .geometry import TriMesh, naive_atlas, normalize_mesh


def unit_quad() -> TriMesh:
    """Square in the yz-plane facing +x, side 1, full [0,1]^2 UV coverage.

    UV layout: u increases with -z (left to right when viewed from +x),
    v increases with -y (top of the image is v=0).
    """
    verts = np.array([
        [0.0, 0.5, 0.5],    # top-left from +x
        [0.0, 0.5, -0.5],   # top-right
        [0.0, -0.5, -0.5],  # bottom-right
        [0.0, -0.5, 0.5],   # bottom-left
    ])
    faces = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int32)
    uv = np.array([
        [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]],
        [[0.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
    ])
    chart = np.zeros(2, np.int32)
    return TriMesh(verts, faces, uv, chart)


def subdivided_quad(n: int = 4) -> TriMesh:
    """unit_quad split into an n x n grid of cells (2*n^2 faces), same UV map."""
    ys = np.linspace(0.5, -0.5, n + 1)
    zs = np.linspace(0.5, -0.5, n + 1)
    verts = np.array([[0.0, y, z] for y in ys for z in zs])
    faces = []
    uvs = []
    for r in range(n):
        for c in range(n):
            i00 = r * (n + 1) + c
            i01 = i00 + 1
            i10 = i00 + (n + 1)
            i11 = i10 + 1
            u0, u1 = c / n, (c + 1) / n
            v0, v1 = r / n, (r + 1) / n
            faces.append([i00, i01, i11])
            uvs.append([[u0, v0], [u1, v0], [u1, v1]])
            faces.append([i00, i11, i10])
            uvs.append([[u0, v0], [u1, v1], [u0, v1]])
    return TriMesh(verts, np.array(faces, np.int32), np.array(uvs),
                   np.zeros(len(faces), np.int32))


def cube(texels_per_unit: float = 64) -> TriMesh:
    """Unit cube centered at the origin, naive per-face atlas."""
    corners = np.array([
        [x, y, z]
        for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)
    ])
    quads = [
        (0, 1, 3, 2), (4, 6, 7, 5),  # -x, +x
        (0, 4, 5, 1), (2, 3, 7, 6),  # -y, +y
        (0, 2, 6, 4), (1, 5, 7, 3),  # -z, +z
    ]
    faces = []
    for a, b, c, d in quads:
        faces.append([a, b, c])
        faces.append([a, c, d])
    mesh = TriMesh(corners, np.array(faces, np.int32))
    return naive_atlas(mesh, texels_per_unit)


def uv_sphere(n_lat: int = 8, n_lon: int = 16,
              texels_per_unit: float = 64) -> TriMesh:
    """Latitude/longitude sphere of diameter 1, naive per-face atlas."""
    verts = [(0.0, 0.5, 0.0)]
    for i in range(1, n_lat):
        theta = math.pi * i / n_lat
        y = 0.5 * math.cos(theta)
        r = 0.5 * math.sin(theta)
        for j in range(n_lon):
            phi = 2.0 * math.pi * j / n_lon
            verts.append((r * math.cos(phi), y, r * math.sin(phi)))
    verts.append((0.0, -0.5, 0.0))
    top, bottom = 0, len(verts) - 1

    def ring(i, j):
        return 1 + (i - 1) * n_lon + (j % n_lon)

    faces = []
    for j in range(n_lon):
        faces.append([top, ring(1, j + 1), ring(1, j)])
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append([a, b, d])
            faces.append([a, d, c])
    for j in range(n_lon):
        faces.append([bottom, ring(n_lat - 1, j), ring(n_lat - 1, j + 1)])
    mesh = TriMesh(np.array(verts), np.array(faces, np.int32))
    mesh = normalize_mesh(mesh)
    return naive_atlas(mesh, texels_per_unit)
