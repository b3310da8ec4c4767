"""Small mesh and library builders shared by the tests."""
from __future__ import annotations

import numpy as np
from scipy.spatial import Delaunay

from facerecon.library import NEUTRAL, BundleDef, JawModel, JawPose, Shape, ShapeLibrary
from facerecon.mesh import TriMesh


def grid_mesh(n, size=1.0, z=None):
    """Flat ``n`` x ``n`` vertex sheet over [0, size]^2 with uv = xy / size."""
    c = np.linspace(0.0, size, n)
    X, Y = np.meshgrid(c, c)
    Z = np.zeros_like(X) if z is None else z(X, Y)
    pos = np.stack([X, Y, Z], axis=-1).reshape(-1, 3)
    faces = []
    for j in range(n - 1):
        for i in range(n - 1):
            a = j * n + i
            faces += [(a, a + 1, a + n + 1), (a, a + n + 1, a + n)]
    return TriMesh(pos, np.array(faces), pos[:, :2] / size)


def delaunay_mesh(points2d):
    """Flat mesh on the unit square whose vertices are the corners plus ``points2d``."""
    corners = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    pts = np.vstack([corners, np.asarray(points2d, dtype=float)])
    tri = Delaunay(pts).simplices.copy()
    a, b, c = (pts[tri[:, k]] for k in range(3))
    neg = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]) < 0
    tri[neg] = tri[neg][:, [0, 2, 1]]
    pos = np.column_stack([pts, np.zeros(len(pts))])
    return TriMesh(pos, tri, pts), 4  # offset of the first user point


def quad_mesh():
    pos = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    return TriMesh(pos, np.array([[0, 1, 2], [0, 2, 3]]), pos[:, :2])


def identity_jaw():
    return JawModel(np.zeros(3), np.array([1.0, 0, 0]), np.array([0, 0, 1.0]),
                    np.array([1.0, 0, 0]))


def toy_library(n=6, n_shapes=5, skin=0.0, seed=0, jaw=None, tags=None, bundle_tags=None):
    """Grid-sheet library with random smooth shapes and one bundle per
    interior vertex of a coarse lattice."""
    rng = np.random.default_rng(seed)
    mesh = grid_mesh(n, size=10.0)
    V = mesh.n_vertices
    shapes = []
    for k in range(n_shapes):
        c = rng.uniform(2, 8, 2)
        r = np.linalg.norm(mesh.positions[:, :2] - c, axis=1)
        amp = rng.uniform(0.5, 2.0, 3)
        disp = np.exp(-(r / 3.0) ** 2)[:, None] * amp
        shapes.append(Shape(f"s{k}", disp, (jaw or [JawPose()] * n_shapes)[k],
                            frozenset(tags[k]) if tags else frozenset()))
    bundles = []
    for k, v in enumerate(range(n + 1, V - n - 1, 2)):
        if v % n in (0, n - 1):
            continue
        sp = mesh.surface_point_at_vertex(v)
        bundles.append(BundleDef(f"b{k}", sp, frozenset(bundle_tags or ())))
    skin_w = np.full(V, skin) if np.isscalar(skin) else np.asarray(skin)
    return ShapeLibrary(mesh, shapes, bundles, skin_w, identity_jaw())


def cloud_of(points, name="b", neighbors=None):
    """Bundle cloud from raw positions; point 0 plays the neutral."""
    from facerecon.index import BundleCloud, CloudPoint

    pts = [CloudPoint(NEUTRAL if i == 0 else f"p{i}", np.asarray(p, dtype=float),
                      {} if neighbors is None else neighbors[i]) for i, p in enumerate(points)]
    nbs = sorted(neighbors[0]) if neighbors else []
    return BundleCloud(name, pts, None, nbs)
