"""Spatial blending of per-bundle shape weights into a dense mesh.

Rest-pose geometry is computed once per library: the UV chart is rasterised
into texels carrying their 3D embedding, each bundle gets a fast-marched
geodesic field, the fields define a Voronoi partition, and every mesh vertex
receives natural-neighbour weights by discrete Voronoi insertion (texels
whose distance to the vertex beats their current owner are "stolen", and
weights are the stolen 3D areas per previous owner).
"""
from __future__ import annotations

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .library import REST_POSE, JawPose, ShapeLibrary, eval_bundle, skin_positions
from .mesh import SurfacePoint, TriMesh, eval_surface_point

logger = logging.getLogger(__name__)

SEED_RADIUS = 2.5  # texels initialised with straight-line 3D distance


class BlendError(ValueError):
    pass


@dataclass
class UVGrid:
    """Rasterised UV chart.

    ``face``/``bary`` give the surface point under each texel centre
    (face -1 for uncovered texels), ``emb`` its 3D position on the mesh the
    grid was built from, and ``area`` the 3D area the texel stands for.
    """

    resolution: int
    mesh: TriMesh
    covered: np.ndarray
    face: np.ndarray
    bary: np.ndarray
    emb: np.ndarray
    area: np.ndarray

    @property
    def shape(self):
        return self.covered.shape

    def texel_coords(self, uv):
        """Continuous texel coordinates (row, col) of a uv point."""
        u, v = uv
        return v * self.resolution - 0.5, u * self.resolution - 0.5

    def texel_of(self, uv):
        r = self.resolution
        i = min(max(int(np.floor(uv[1] * r)), 0), r - 1)
        j = min(max(int(np.floor(uv[0] * r)), 0), r - 1)
        return i, j

    def texel_size(self) -> float:
        """Largest 3D diagonal of a texel."""
        e, c = self.emb, self.covered
        best = 0.0
        for a, b, m in ((e[:-1, :-1], e[1:, 1:], c[:-1, :-1] & c[1:, 1:]),
                        (e[:-1, 1:], e[1:, :-1], c[:-1, 1:] & c[1:, :-1])):
            if m.any():
                best = max(best, float(np.max(np.linalg.norm(a[m] - b[m], axis=1))))
        return best


def rasterize_uv(mesh: TriMesh, resolution: int, positions=None) -> UVGrid:
    if resolution < 16:
        raise BlendError(f"uv resolution {resolution} below minimum 16")
    pos = mesh.positions if positions is None else np.asarray(positions, dtype=float)
    r = resolution
    covered = np.zeros((r, r), dtype=bool)
    face = np.full((r, r), -1, dtype=np.int64)
    bary = np.zeros((r, r, 3))
    area = np.zeros((r, r))
    uv = mesh.uvs * r
    for f, (ia, ib, ic) in enumerate(mesh.faces):
        a, b, c = uv[ia], uv[ib], uv[ic]
        lo = np.floor(np.minimum(np.minimum(a, b), c) - 0.5).astype(int)
        hi = np.ceil(np.maximum(np.maximum(a, b), c) - 0.5).astype(int)
        j0, i0 = max(lo[0], 0), max(lo[1], 0)
        j1, i1 = min(hi[0], r - 1), min(hi[1], r - 1)
        if j1 < j0 or i1 < i0:
            continue
        jj, ii = np.meshgrid(np.arange(j0, j1 + 1), np.arange(i0, i1 + 1))
        px, py = jj + 0.5, ii + 0.5
        det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])
        l1 = ((px - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (py - a[1])) / det
        l2 = ((b[0] - a[0]) * (py - a[1]) - (px - a[0]) * (b[1] - a[1])) / det
        l0 = 1.0 - l1 - l2
        inside = (l0 >= -1e-12) & (l1 >= -1e-12) & (l2 >= -1e-12)
        inside &= ~covered[ii, jj]
        if not inside.any():
            continue
        ti, tj = ii[inside], jj[inside]
        w = np.clip(np.stack([l0[inside], l1[inside], l2[inside]], axis=1), 0.0, None)
        w /= w.sum(axis=1, keepdims=True)
        covered[ti, tj] = True
        face[ti, tj] = f
        bary[ti, tj] = w
        area3 = 0.5 * np.linalg.norm(np.cross(pos[ib] - pos[ia], pos[ic] - pos[ia]))
        area[ti, tj] = area3 / (abs(det) / 2.0) if det else 0.0
    emb = np.zeros((r, r, 3))
    fi = face[covered]
    tri = pos[mesh.faces[fi]]
    emb[covered] = np.einsum("nk,nkc->nc", bary[covered], tri)
    return UVGrid(r, mesh, covered, face, bary, emb, area)


def seed_texels(grid: UVGrid, point, uv, radius=SEED_RADIUS):
    """Covered texels near ``uv`` with their straight-line distance to ``point``."""
    ci, cj = grid.texel_coords(uv)
    r = grid.resolution
    rad = radius
    while True:
        i0, i1 = max(int(np.floor(ci - rad)), 0), min(int(np.ceil(ci + rad)), r - 1)
        j0, j1 = max(int(np.floor(cj - rad)), 0), min(int(np.ceil(cj + rad)), r - 1)
        jj, ii = np.meshgrid(np.arange(j0, j1 + 1), np.arange(i0, i1 + 1))
        m = ((ii - ci) ** 2 + (jj - cj) ** 2 <= rad * rad) & grid.covered[ii, jj]
        if m.any() or rad > r:
            break
        rad *= 2
    ii, jj = ii[m], jj[m]
    d = np.linalg.norm(grid.emb[ii, jj] - np.asarray(point, dtype=float), axis=1)
    return (ii * r + jj).astype(np.int64), d


def _march_full(grid, idx, d):
    n = grid.resolution ** 2
    dist = np.full(n, np.inf)
    state = np.zeros(n, dtype=np.uint8)
    kernels.march(grid.emb, grid.covered.view(np.uint8), idx, d, dist, state)
    return dist.reshape(grid.shape)


def fast_march(grid: UVGrid, seed: SurfacePoint) -> np.ndarray:
    """Geodesic distance from a surface point to every covered texel.

    Uncovered texels, and covered texels unreachable through the lattice,
    hold ``inf``.
    """
    mesh = grid.mesh
    if not 0 <= seed.face < mesh.n_faces:
        raise BlendError(f"seed face {seed.face} out of range")
    pos = eval_surface_point(_grid_positions(grid), mesh, seed)
    uv = np.asarray(seed.bary) @ mesh.uvs[mesh.faces[seed.face]]
    i, j = grid.texel_of(uv)
    idx, d = seed_texels(grid, pos, uv)
    if not len(idx):
        raise BlendError(f"seed texel ({i}, {j}) not covered")
    dist = _march_full(grid, idx, d)
    unreached = grid.covered & ~np.isfinite(dist)
    if unreached.any():
        logger.warning("%d covered texels unreachable from seed", int(unreached.sum()))
    return dist


def _grid_positions(grid):
    # emb was built from the mesh positions at raster time
    return grid.mesh.positions


@dataclass
class VoronoiPartition:
    names: list
    labels: np.ndarray  # int, -1 on uncovered texels
    dist: np.ndarray  # distance to owner, inf on uncovered texels
    gap: np.ndarray  # runner-up minus owner distance


def voronoi_partition(fields: dict) -> VoronoiPartition:
    if not fields:
        raise BlendError("no bundle fields")
    names = sorted(fields)
    stack = np.stack([fields[n] for n in names])
    labels = np.argmin(stack, axis=0)
    dist = np.take_along_axis(stack, labels[None], axis=0)[0]
    if len(names) > 1:
        part = np.partition(stack, 1, axis=0)
        gap = part[1] - part[0]
    else:
        gap = np.full(dist.shape, np.inf)
    finite = np.isfinite(dist)
    labels = np.where(finite, labels, -1)
    return VoronoiPartition(names, labels, dist, np.where(finite, gap, np.inf))


def voronoi_adjacency(partition: VoronoiPartition) -> dict:
    """Bundles whose cells share a texel edge, as name -> sorted neighbour list."""
    L = partition.labels
    pairs = set()
    for a, b in ((L[:, :-1], L[:, 1:]), (L[:-1, :], L[1:, :])):
        m = (a >= 0) & (b >= 0) & (a != b)
        for x, y in zip(a[m].tolist(), b[m].tolist()):
            pairs.add((min(x, y), max(x, y)))
    adj = {n: [] for n in partition.names}
    for x, y in sorted(pairs):
        adj[partition.names[x]].append(partition.names[y])
        adj[partition.names[y]].append(partition.names[x])
    return {k: sorted(v) for k, v in adj.items()}


@dataclass
class NNWeightField:
    """Per-vertex convex weights over bundles, stored densely (V, B)."""

    names: list
    weights: np.ndarray
    flagged: np.ndarray = field(default=None)  # vertices that stole nothing

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.flagged is None:
            self.flagged = np.zeros(len(self.weights), dtype=bool)

    def sparse(self, v) -> dict:
        row = self.weights[v]
        return {self.names[k]: float(row[k]) for k in np.flatnonzero(row)}

    def column(self, name) -> np.ndarray:
        return self.weights[:, self.names.index(name)]


def bundle_sites(lib: ShapeLibrary) -> dict:
    return {b.name: eval_surface_point(lib.x0, lib.neutral, b.attach) for b in lib.bundles}


def natural_neighbor_field(grid: UVGrid, partition: VoronoiPartition, fields: dict,
                           mesh: TriMesh, sites: dict | None = None,
                           threads: int = 1) -> NNWeightField:
    """Discrete natural-neighbour weights at every mesh vertex.

    ``sites`` maps bundle names to rest positions; a vertex coinciding with a
    site (within 1e-9 of the bbox diagonal) takes weight 1 on that bundle,
    since inserting it would steal nothing.
    """
    names = partition.names
    B = len(names)
    V = mesh.n_vertices
    W = np.zeros((V, B))
    flagged = np.zeros(V, dtype=bool)
    limit = partition.dist.ravel()
    labels = partition.labels.ravel()
    area = grid.area.ravel()
    eps = 1e-9 * mesh.bbox_diagonal()
    site_names = list(sites) if sites else []
    site_pos = np.array([sites[n] for n in site_names]) if sites else np.zeros((0, 3))
    n_tex = grid.resolution ** 2

    def one(v, dist, state):
        P = mesh.positions[v]
        if len(site_pos):
            dd = np.linalg.norm(site_pos - P, axis=1)
            k = int(np.argmin(dd))
            if dd[k] <= eps:
                W[v, names.index(site_names[k])] = 1.0
                return
        idx, d = seed_texels(grid, P, mesh.uvs[v])
        dist.fill(np.inf)
        state.fill(0)
        stolen = kernels.march(grid.emb, grid.covered.view(np.uint8), idx, d, dist, state,
                               limit=limit)
        if len(stolen):
            acc = np.bincount(labels[stolen], weights=area[stolen], minlength=B)
            total = acc.sum()
            if total > 0:
                W[v] = acc / total
                return
        i, j = grid.texel_of(mesh.uvs[v])
        at = np.array([fields[n][i, j] for n in names])
        W[v, int(np.argmin(at))] = 1.0
        flagged[v] = True

    def chunk(vs):
        dist = np.empty(n_tex)
        state = np.empty(n_tex, dtype=np.uint8)
        for v in vs:
            one(v, dist, state)

    if threads > 1:
        parts = np.array_split(np.arange(V), threads)
        with ThreadPoolExecutor(threads) as ex:
            list(ex.map(chunk, parts))
    else:
        chunk(range(V))
    if flagged.any():
        logger.warning("%d vertices stole no area; assigned to nearest bundle", int(flagged.sum()))
    return NNWeightField(list(names), W, flagged)


def natural_neighbor_field_mesh(mesh: TriMesh, lib_sites: dict, attach: dict) -> NNWeightField:
    """Natural-neighbour weights computed on the vertex graph instead of UV space.

    Distances are Dijkstra over mesh edges; each vertex carries one third of
    its incident face areas.  Exposed to compare against the UV-lattice mode.
    """
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import dijkstra

    V = mesh.n_vertices
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e = np.unique(np.sort(e, axis=1), axis=0)
    w = np.linalg.norm(mesh.positions[e[:, 0]] - mesh.positions[e[:, 1]], axis=1)
    # virtual source node V for seeding with offsets
    names = sorted(lib_sites)

    def field_from(face_vids, point):
        extra_r = np.full(len(face_vids), V)
        off = np.linalg.norm(mesh.positions[face_vids] - point, axis=1) + 1e-300
        rows = np.concatenate([e[:, 0], extra_r])
        cols = np.concatenate([e[:, 1], face_vids])
        g = coo_matrix((np.concatenate([w, off]), (rows, cols)), shape=(V + 1, V + 1)).tocsr()
        return dijkstra(g, directed=False, indices=V)[:V]

    D = np.stack([field_from(mesh.faces[attach[n].face], lib_sites[n]) for n in names])
    owner = np.argmin(D, axis=0)
    dmin = D[owner, np.arange(V)]
    from .mesh import face_areas

    varea = np.zeros(V)
    np.add.at(varea, f.ravel(), np.repeat(face_areas(mesh.positions, f) / 3.0, 3))
    g = coo_matrix((w, (e[:, 0], e[:, 1])), shape=(V, V)).tocsr()
    dv = dijkstra(g, directed=False)
    Wt = np.zeros((V, len(names)))
    flagged = np.zeros(V, dtype=bool)
    eps = 1e-9 * mesh.bbox_diagonal()
    for v in range(V):
        if dmin[v] <= eps:
            Wt[v, owner[v]] = 1.0
            continue
        stolen = dv[v] < dmin
        acc = np.bincount(owner[stolen], weights=varea[stolen], minlength=len(names))
        if acc.sum() > 0:
            Wt[v] = acc / acc.sum()
        else:
            Wt[v, owner[v]] = 1.0
            flagged[v] = True
    return NNWeightField(names, Wt, flagged)


def sample_field(grid: UVGrid, field_map, uv) -> float:
    """Bilinear sample of a texel field at a uv point (nearest when clipped)."""
    ci, cj = grid.texel_coords(uv)
    r = grid.resolution
    i0, j0 = int(np.floor(ci)), int(np.floor(cj))
    fi, fj = ci - i0, cj - j0
    vals, ws = [], []
    for di, wi in ((0, 1 - fi), (1, fi)):
        for dj, wj in ((0, 1 - fj), (1, fj)):
            i, j = i0 + di, j0 + dj
            if 0 <= i < r and 0 <= j < r and np.isfinite(field_map[i, j]):
                vals.append(field_map[i, j])
                ws.append(wi * wj)
    if ws and sum(ws) > 0:
        return float(np.dot(vals, ws) / sum(ws))
    i, j = grid.texel_of(uv)
    return float(field_map[i, j])


def rbf_blend_field(grid: UVGrid, fields: dict, mesh: TriMesh, sigma: float) -> NNWeightField:
    """Gaussian kernel weights on geodesic distance, normalised over bundles.

    Unlike the natural-neighbour field this does not reproduce bundle
    positions exactly.
    """
    if not sigma > 0:
        raise BlendError("sigma must be positive")
    names = sorted(fields)
    G = np.array([[sample_field(grid, fields[n], uv) for n in names] for uv in mesh.uvs])
    return NNWeightField(names, rbf_weights(G, sigma))


def rbf_weights(G, sigma):
    logits = -(np.asarray(G, dtype=float) ** 2) / (2.0 * sigma * sigma)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def default_rbf_sigma(sites: dict) -> float:
    """Half the median nearest-neighbour distance between bundle sites."""
    P = np.array(list(sites.values()))
    if len(P) < 2:
        return 1.0
    d = np.linalg.norm(P[:, None] - P[None], axis=2)
    np.fill_diagonal(d, np.inf)
    return 0.5 * float(np.median(d.min(axis=1)))


# -- blending -------------------------------------------------------------

def bundle_weight_matrix(lib: ShapeLibrary, frame, names) -> np.ndarray:
    """(B, S) matrix of per-bundle shape weights in library shape order."""
    col = {n: k for k, n in enumerate(lib.shape_names)}
    M = np.zeros((len(names), len(lib.shapes)))
    for r, b in enumerate(names):
        sol = frame.per_bundle.get(b)
        if sol is None:
            raise BlendError(f"bundle {b} has natural-neighbour weights but no solution")
        for shape, w in sol.shape_weights.items():
            if shape in col:
                M[r, col[shape]] = w
    return M


def blend_weights(lib, frame, nn: NNWeightField) -> np.ndarray:
    return nn.weights @ bundle_weight_matrix(lib, frame, nn.names)


def blend_frame(lib: ShapeLibrary, frame, nn: NNWeightField) -> np.ndarray:
    """Dense positions ``T(theta)(x0 + sum_n w_n(v) b*_n)`` for one frame."""
    Weff = blend_weights(lib, frame, nn)
    x = lib.x0 + np.einsum("vs,svc->vc", Weff, lib.unskinned_stack())
    return skin_positions(lib, x, frame.theta)


def baseline_displacement_interp(lib: ShapeLibrary, observed: dict, theta: JawPose,
                                 nn: NNWeightField) -> np.ndarray:
    """Jaw-skinned neutral plus interpolated bundle displacements.

    Carries no detail beyond the neutral mesh; used as a comparison baseline.
    """
    D = np.zeros((len(nn.names), 3))
    for k, name in enumerate(nn.names):
        if name in observed:
            rest = eval_bundle(lib, lib.bundle(name), {}, theta)
            D[k] = np.asarray(observed[name], dtype=float) - rest
    return skin_positions(lib, lib.x0, theta) + nn.weights @ D


def texel_quantization_bound(lib: ShapeLibrary, grid: UVGrid) -> float:
    """Surface change over one texel: texel size times the steepest relative
    displacement gradient along mesh edges of any shape."""
    if not lib.shapes:
        return 0.0
    f = lib.neutral.faces
    e = np.unique(np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1),
                  axis=0)
    L = np.linalg.norm(lib.x0[e[:, 0]] - lib.x0[e[:, 1]], axis=1)
    S = lib.unskinned_stack()
    grad = np.linalg.norm(S[:, e[:, 0]] - S[:, e[:, 1]], axis=2) / L
    return grid.texel_size() * float(grad.max())


# -- rest-pose context ----------------------------------------------------

@dataclass
class BlendContext:
    grid: UVGrid
    fields: dict
    partition: VoronoiPartition
    adjacency: dict
    nn: NNWeightField
    sites: dict


def build_blend_context(lib: ShapeLibrary, resolution: int = 512, mode: str = "uv",
                        threads: int = 1) -> BlendContext:
    if not lib.bundles:
        raise BlendError("library has no bundles")
    grid = rasterize_uv(lib.neutral, resolution)
    sites = bundle_sites(lib)

    def field_for(b):
        return b.name, fast_march(grid, b.attach)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            fields = dict(ex.map(field_for, lib.bundles))
    else:
        fields = dict(map(field_for, lib.bundles))
    partition = voronoi_partition(fields)
    adjacency = voronoi_adjacency(partition)
    if mode == "uv":
        nn = natural_neighbor_field(grid, partition, fields, lib.neutral, sites, threads)
    elif mode == "mesh":
        nn = natural_neighbor_field_mesh(lib.neutral, sites, {b.name: b.attach for b in lib.bundles})
    else:
        raise BlendError(f"unknown mode {mode!r}")
    return BlendContext(grid, fields, partition, adjacency, nn, sites)


# -- files ----------------------------------------------------------------

NN_MAGIC = b"LGNN"


def save_nn(nn: NNWeightField, path, adjacency: dict | None = None):
    """Binary natural-neighbour cache: per-vertex sparse (bundle id, f32) lists.

    The bundle adjacency graph is appended so the solver can be run from the
    cache alone.
    """
    out = bytearray(NN_MAGIC)
    out += struct.pack("<III", 1, len(nn.weights), len(nn.names))
    for n in nn.names:
        b = n.encode()
        out += struct.pack("<H", len(b)) + b
    for v, row in enumerate(nn.weights):
        nz = np.flatnonzero(row)
        out += struct.pack("<HB", len(nz), int(nn.flagged[v]))
        pairs = np.empty(len(nz), dtype=[("id", "<u4"), ("w", "<f4")])
        pairs["id"] = nz
        pairs["w"] = row[nz]
        out += pairs.tobytes()
    adjacency = adjacency or {}
    out += struct.pack("<I", len(adjacency))
    for n in nn.names:
        if n in adjacency:
            ids = [nn.names.index(x) for x in adjacency[n]]
            out += struct.pack("<II", nn.names.index(n), len(ids))
            out += np.asarray(ids, dtype="<u4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_nn(path):
    """Returns ``(NNWeightField, adjacency)``; weights are renormalised."""
    data = Path(path).read_bytes()
    if data[:4] != NN_MAGIC:
        raise BlendError(f"{path}: not a natural-neighbour cache")
    off = 4
    version, V, B = struct.unpack_from("<III", data, off)
    off += 12
    names = []
    for _ in range(B):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        names.append(data[off:off + n].decode())
        off += n
    W = np.zeros((V, B))
    flagged = np.zeros(V, dtype=bool)
    dt = np.dtype([("id", "<u4"), ("w", "<f4")])
    for v in range(V):
        k, fl = struct.unpack_from("<HB", data, off)
        off += 3
        pairs = np.frombuffer(data, dtype=dt, count=k, offset=off)
        off += k * dt.itemsize
        W[v, pairs["id"]] = pairs["w"]
        flagged[v] = bool(fl)
    s = W.sum(axis=1, keepdims=True)
    W = np.divide(W, s, out=W, where=s > 0)
    (na,) = struct.unpack_from("<I", data, off)
    off += 4
    adjacency = {}
    for _ in range(na):
        i, k = struct.unpack_from("<II", data, off)
        off += 8
        ids = np.frombuffer(data, dtype="<u4", count=k, offset=off)
        off += 4 * k
        adjacency[names[i]] = [names[x] for x in ids]
    return NNWeightField(names, W, flagged), adjacency


def write_pgm(path, image):
    """8-bit binary PGM; values are clipped to [0, 255]."""
    img = np.clip(np.asarray(image), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img[::-1].tobytes())


def partition_image(partition: VoronoiPartition) -> np.ndarray:
    L = partition.labels
    img = np.where(L >= 0, 40 + (L * 97) % 215, 0)
    return img


def weight_image(grid: UVGrid, nn: NNWeightField, name) -> np.ndarray:
    """Texel image of one bundle's vertex weights, interpolated across faces."""
    col = nn.column(name)
    img = np.zeros(grid.shape)
    c = grid.covered
    vids = grid.mesh.faces[grid.face[c]]
    img[c] = np.einsum("nk,nk->n", grid.bary[c], col[vids])
    return img * 255.0
