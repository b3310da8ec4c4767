"""Triangle mesh container and the small geometric kernels the rest of the
package is built on: surface points, tetrahedron barycentrics, containment
and closest point on a simplex.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    """Invalid mesh data or malformed OBJ input."""


class DegenerateTet(ValueError):
    """Raised when four points do not span a volume."""


@dataclass(frozen=True)
class SurfacePoint:
    """A point glued to a mesh face by barycentric coordinates."""

    face: int
    bary: tuple[float, float, float]

    def __post_init__(self):
        b = np.asarray(self.bary, dtype=float)
        if b.shape != (3,) or np.any(b < -1e-9) or abs(b.sum() - 1.0) > 1e-9:
            raise MeshError(f"invalid barycentric coordinates {self.bary!r}")


@dataclass
class TriMesh:
    positions: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    uvs: np.ndarray  # (V, 2)

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        self.uvs = np.ascontiguousarray(self.uvs, dtype=np.float64)
        self.validate()

    @property
    def n_vertices(self) -> int:
        return len(self.positions)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def validate(self):
        V = len(self.positions)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise MeshError("positions must be (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise MeshError("faces must be triangles")
        if self.uvs.shape != (V, 2):
            raise MeshError("expected exactly one uv per vertex")
        if len(self.faces) == 0:
            raise MeshError("mesh has no faces")
        if self.faces.min() < 0 or self.faces.max() >= V:
            raise MeshError("face index out of range")
        used = np.zeros(V, dtype=bool)
        used[self.faces.ravel()] = True
        if not used.all():
            raise MeshError(f"{int((~used).sum())} vertices not referenced by any face")
        area = face_areas(self.positions, self.faces)
        if np.any(area <= 0.0):
            raise MeshError(f"degenerate face {int(np.argmin(area))}")
        check_single_chart(self)

    def bbox_diagonal(self, positions=None) -> float:
        p = self.positions if positions is None else positions
        return float(np.linalg.norm(p.max(axis=0) - p.min(axis=0)))

    def surface_point_at_vertex(self, v: int) -> SurfacePoint:
        f, slot = np.argwhere(self.faces == v)[0]
        bary = [0.0, 0.0, 0.0]
        bary[slot] = 1.0
        return SurfacePoint(int(f), tuple(bary))


def face_areas(positions, faces):
    a, b, c = (positions[faces[:, i]] for i in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def check_single_chart(mesh: TriMesh):
    """Reject UV layouts that are not one connected, non-folded chart."""
    uv = mesh.uvs
    if np.any(uv < -1e-9) or np.any(uv > 1 + 1e-9):
        raise MeshError("uvs must lie in [0, 1]^2")
    a, b, c = (uv[mesh.faces[:, i]] for i in range(3))
    signed = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    if np.any(signed == 0.0):
        raise MeshError("zero-area face in uv space")
    if np.any(signed > 0) and np.any(signed < 0):
        raise MeshError("uv chart is folded (mixed triangle orientation)")
    # connectivity through shared vertices
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    f = mesh.faces
    rows = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
    cols = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    g = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(mesh.n_vertices,) * 2)
    n, _ = connected_components(g, directed=False)
    if n != 1:
        raise MeshError(f"multi-chart meshes are not supported ({n} charts)")


def eval_surface_point(positions, mesh: TriMesh, sp: SurfacePoint) -> np.ndarray:
    if not 0 <= sp.face < mesh.n_faces:
        raise MeshError(f"face index {sp.face} out of range")
    positions = np.asarray(positions, dtype=float)
    if len(positions) != mesh.n_vertices:
        raise MeshError("positions length does not match vertex count")
    tri = positions[mesh.faces[sp.face]]
    return np.asarray(sp.bary, dtype=float) @ tri


def _det3(a, b, c):
    return (a[0] * (b[1] * c[2] - b[2] * c[1])
            - a[1] * (b[0] * c[2] - b[2] * c[0])
            + a[2] * (b[0] * c[1] - b[1] * c[0]))


def signed_volume(q0, q1, q2, q3) -> float:
    """Six times the signed volume of the tetrahedron."""
    return _det3(q1 - q0, q2 - q0, q3 - q0)


def vol_eps(q) -> float:
    q = np.asarray(q, dtype=float)
    d = float(np.linalg.norm(q.max(axis=0) - q.min(axis=0)))
    return 1e-12 * d ** 3


def tet_barycentric(p, q0, q1, q2, q3) -> np.ndarray:
    """Barycentric weights of ``p`` with respect to a tetrahedron.

    Weights come from signed-volume ratios, so they sum to one and may be
    negative when ``p`` lies outside.

    Raises
    ------
    DegenerateTet
        If the tetrahedron volume is below the relative threshold
        ``1e-12 * diag**3``.
    """
    p, q0, q1, q2, q3 = (np.asarray(x, dtype=float) for x in (p, q0, q1, q2, q3))
    vol = signed_volume(q0, q1, q2, q3)
    if abs(vol) <= vol_eps(np.stack([q0, q1, q2, q3])):
        raise DegenerateTet(f"tetrahedron volume {vol:.3e} below threshold")
    w1 = _det3(p - q0, q2 - q0, q3 - q0) / vol
    w2 = _det3(q1 - q0, p - q0, q3 - q0) / vol
    w3 = _det3(q1 - q0, q2 - q0, p - q0) / vol
    w0 = _det3(q1 - p, q2 - p, q3 - p) / vol
    return np.array([w0, w1, w2, w3])


def tet_contains(p, q0, q1, q2, q3, tol: float = 1e-9) -> bool:
    return bool(np.all(tet_barycentric(p, q0, q1, q2, q3) >= -tol))


def _closest_on_segment(p, a, b):
    ab = b - a
    denom = ab @ ab
    if denom <= 0.0:
        return a.copy(), np.array([1.0, 0.0])
    t = min(max((p - a) @ ab / denom, 0.0), 1.0)
    return a + t * ab, np.array([1.0 - t, t])


def _closest_on_triangle(p, a, b, c):
    # Region tests after Ericson, "Real-Time Collision Detection" 5.1.5.
    ab, ac, ap = b - a, c - a, p - a
    n = np.cross(ab, ac)
    if n @ n <= 1e-24 * max(ab @ ab, ac @ ac, 1e-300) ** 2:
        return _closest_on_polyline(p, [a, b, c])
    d1, d2 = ab @ ap, ac @ ap
    if d1 <= 0 and d2 <= 0:
        return a.copy(), np.array([1.0, 0.0, 0.0])
    bp = p - b
    d3, d4 = ab @ bp, ac @ bp
    if d3 >= 0 and d4 <= d3:
        return b.copy(), np.array([0.0, 1.0, 0.0])
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        v = d1 / (d1 - d3)
        return a + v * ab, np.array([1 - v, v, 0.0])
    cp = p - c
    d5, d6 = ab @ cp, ac @ cp
    if d6 >= 0 and d5 <= d6:
        return c.copy(), np.array([0.0, 0.0, 1.0])
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        w = d2 / (d2 - d6)
        return a + w * ac, np.array([1 - w, 0.0, w])
    va = d3 * d6 - d5 * d4
    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b + w * (c - b), np.array([0.0, 1 - w, w])
    denom = 1.0 / (va + vb + vc)
    v, w = vb * denom, vc * denom
    return a + ab * v + ac * w, np.array([1 - v - w, v, w])


def _closest_on_polyline(p, verts):
    # every edge of a degenerate simplex; weights are scattered back
    best = None
    k = len(verts)
    for i in range(k):
        for j in range(i + 1, k):
            q, w = _closest_on_segment(p, verts[i], verts[j])
            d = np.sum((p - q) ** 2)
            if best is None or d < best[0]:
                full = np.zeros(k)
                full[i], full[j] = w
                best = (d, q, full)
    return best[1], best[2]


def closest_point_on_simplex(p, verts):
    """Closest point to ``p`` on the convex hull of 1 to 4 vertices.

    Returns
    -------
    point : ndarray, shape (3,)
    weights : ndarray, shape (len(verts),)
        Convex weights with ``weights @ verts == point``.
    """
    p = np.asarray(p, dtype=float)
    verts = [np.asarray(v, dtype=float) for v in verts]
    k = len(verts)
    if k == 0:
        raise ValueError("empty simplex")
    if k == 1:
        return verts[0].copy(), np.ones(1)
    if k == 2:
        return _closest_on_segment(p, *verts)
    if k == 3:
        return _closest_on_triangle(p, *verts)
    if k != 4:
        raise ValueError("simplex must have at most 4 vertices")
    try:
        w = tet_barycentric(p, *verts)
    except DegenerateTet:
        w = None
    if w is not None and np.all(w >= 0.0):
        return p.copy(), w
    best = None
    for skip in range(4):
        idx = [i for i in range(4) if i != skip]
        q, wf = _closest_on_triangle(p, *(verts[i] for i in idx))
        d = np.sum((p - q) ** 2)
        if best is None or d < best[0]:
            full = np.zeros(4)
            full[idx] = wf
            best = (d, q, full)
    return best[1], best[2]


# -- OBJ -------------------------------------------------------------------

def load_obj(path) -> TriMesh:
    """Read an ASCII OBJ with one ``vt`` per vertex and triangle faces.

    Face corners may be written ``v``, ``v/vt`` or ``v/vt/vn``; the texture
    index must equal the vertex index since uvs are stored per vertex.
    """
    positions, uvs, faces = [], [], []
    path = Path(path)
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    positions.append([float(x) for x in parts[1:4]])
                    if len(parts) < 4:
                        raise ValueError("expected 3 coordinates")
                elif tag == "vt":
                    uvs.append([float(x) for x in parts[1:3]])
                    if len(parts) < 3:
                        raise ValueError("expected 2 coordinates")
                elif tag == "f":
                    corners = parts[1:]
                    if len(corners) != 3:
                        raise MeshError(
                            f"{path}:{lineno}: non-triangle face with {len(corners)} corners")
                    tri = []
                    for c in corners:
                        fields = c.split("/")
                        vi = int(fields[0])
                        if len(fields) > 1 and fields[1] and int(fields[1]) != vi:
                            raise MeshError(
                                f"{path}:{lineno}: texture index differs from vertex index")
                        tri.append(vi - 1 if vi > 0 else len(positions) + vi)
                    faces.append(tri)
            except MeshError:
                raise
            except ValueError as exc:
                raise MeshError(f"{path}:{lineno}: parse error: {exc}") from None
    if not uvs:
        raise MeshError(f"{path}: missing uvs (no vt records)")
    if len(uvs) != len(positions):
        raise MeshError(f"{path}: {len(uvs)} uvs for {len(positions)} vertices")
    return TriMesh(np.array(positions), np.array(faces, dtype=np.int64), np.array(uvs))


def load_obj_positions(path, n_vertices=None) -> np.ndarray:
    """Vertex positions only; used for shape poses sharing the neutral topology."""
    pts = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            if line.startswith("v "):
                try:
                    pts.append([float(x) for x in line.split()[1:4]])
                except ValueError as exc:
                    raise MeshError(f"{path}:{lineno}: parse error: {exc}") from None
    arr = np.array(pts, dtype=float).reshape(-1, 3)
    if n_vertices is not None and len(arr) != n_vertices:
        raise MeshError(f"{path}: {len(arr)} vertices, expected {n_vertices}")
    return arr


def save_obj(mesh: TriMesh, positions, path):
    positions = mesh.positions if positions is None else np.asarray(positions, dtype=float)
    if positions.shape != mesh.positions.shape:
        raise MeshError("positions shape does not match mesh")
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in positions]
    lines += [f"vt {u:.9g} {v:.9g}" for u, v in mesh.uvs]
    lines += [f"f {a}/{a} {b}/{b} {c}/{c}" for a, b, c in (mesh.faces + 1)]
    Path(path).write_text("\n".join(lines) + "\n")


def unit_normalize(v):
    v = np.asarray(v, dtype=float)
    n = math.sqrt(float(v @ v))
    return v / n
