"""Per-bundle point clouds, overlapping tetrahedra and point location.

Every bundle gets a cloud holding its (unskinned) position on each dataset
shape.  All quadruples of cloud points that pass a quality filter become
tetrahedra; they overlap freely, so one bundle position can be explained by
several local geometries.  A uniform grid accelerates containment queries.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from . import kernels
from ._pykernels import triangles_closest
from .library import NEUTRAL, ShapeLibrary

logger = logging.getLogger(__name__)

DEFAULT_CAP = 250_000
# grid cell registrations allowed per tetrahedron before the grid is coarsened
REGISTRATION_BUDGET = 64


class CombinatorialCapExceeded(RuntimeError):
    def __init__(self, bundle, n_points, n_tets, cap):
        self.bundle, self.n_points, self.n_tets, self.cap = bundle, n_points, n_tets, cap
        super().__init__(
            f"bundle {bundle}: {n_points} cloud points give C({n_points},4)={n_tets} "
            f"tetrahedra, above the cap of {cap}; raise --min-disp / --dedupe-eps to "
            f"prune harder, or enable jaw binning with --jaw-bins")


@dataclass
class PruneConfig:
    """Cloud pruning thresholds.  ``None`` means relative to the library's
    bounding-box diagonal (1e-3 and 1e-4 of it respectively)."""

    min_disp: float | None = None
    dedupe_eps: float | None = None

    def resolve(self, diag):
        return (1e-3 * diag if self.min_disp is None else self.min_disp,
                1e-4 * diag if self.dedupe_eps is None else self.dedupe_eps)


@dataclass
class QualityConfig:
    min_vol_frac: float = 1e-6
    max_aspect: float = 25.0
    max_extent_frac: float = 0.75

    @classmethod
    def disabled(cls):
        return cls(0.0, math.inf, math.inf)


@dataclass
class CloudPoint:
    shape: str
    pos: np.ndarray
    neighbor_evals: dict = field(default_factory=dict)


@dataclass
class BundleCloud:
    bundle: str
    points: list
    jaw_bin: tuple | None = None
    neighbors: list = field(default_factory=list)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.pos for p in self.points]).reshape(-1, 3)

    def neighbor_array(self) -> np.ndarray:
        """(n_points, n_neighbors, 3) in ``self.neighbors`` order."""
        return np.array([[p.neighbor_evals[nb] for nb in self.neighbors]
                         for p in self.points]).reshape(len(self.points), len(self.neighbors), 3)

    def diagonal(self) -> float:
        P = self.positions
        return float(np.linalg.norm(P.max(axis=0) - P.min(axis=0)))


@dataclass
class TetSet:
    tets: np.ndarray  # (m, 4) int64, rows sorted ascending, lexicographic order
    quality: np.ndarray  # (m, 3): volume, aspect ratio, longest edge
    too_small: bool = False

    def __len__(self):
        return len(self.tets)


@dataclass
class UniformGrid:
    lo: np.ndarray
    hi: np.ndarray
    dims: np.ndarray
    offsets: np.ndarray  # (ncells + 1,)
    items: np.ndarray  # tet ids, ascending within each cell

    def cell_of(self, p):
        p = np.asarray(p, dtype=float)
        if np.any(p < self.lo) or np.any(p > self.hi):
            return None
        ext = self.hi - self.lo
        c = np.floor((p - self.lo) / np.where(ext > 0, ext, 1.0) * self.dims).astype(np.int64)
        c = np.minimum(c, self.dims - 1)
        return int((c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2])

    def cell_items(self, cell):
        return self.items[self.offsets[cell]:self.offsets[cell + 1]]


@dataclass
class BundleIndex:
    cloud: BundleCloud
    tetset: TetSet
    grid: UniformGrid | None
    usage: np.ndarray = None
    blacklist: set = field(default_factory=set)

    def __post_init__(self):
        if self.usage is None:
            self.usage = np.zeros(len(self.tetset), dtype=np.uint64)
        self._P = self.cloud.positions
        self._T = self._P[self.tetset.tets] if len(self.tetset) else np.zeros((0, 4, 3))
        self._N = self.cloud.neighbor_array()
        self._Minv = _edge_inverses(self._T)
        self._q0 = np.ascontiguousarray(self._T[:, 0])
        self.diag = self.cloud.diagonal()

    @property
    def bundle(self):
        return self.cloud.bundle

    @property
    def tet_points(self):
        return self._T

    @property
    def points(self):
        return self._P

    @property
    def neighbor_evals(self):
        """(n_points, n_neighbors, 3) in ``cloud.neighbors`` order."""
        return self._N

    def in_bin(self, rot) -> bool:
        if self.cloud.jaw_bin is None:
            return True
        lo, hi, closed = self.cloud.jaw_bin
        return lo <= rot < hi or (closed and rot == hi)


# -- cloud construction ---------------------------------------------------

def bundle_eval_table(lib: ShapeLibrary) -> np.ndarray:
    """(S+1, B, 3) unskinned bundle evaluations; row 0 is the neutral."""
    faces = lib.neutral.faces[[b.attach.face for b in lib.bundles]]  # (B, 3)
    bary = np.array([b.attach.bary for b in lib.bundles])  # (B, 3)
    base = np.einsum("bk,bkc->bc", bary, lib.x0[faces])
    S = lib.unskinned_stack()
    disp = np.einsum("bk,sbkc->sbc", bary, S[:, faces]) if len(S) else np.zeros((0, len(faces), 3))
    return np.concatenate([base[None], base[None] + disp])


def build_cloud(lib: ShapeLibrary, bundle, prune_cfg: PruneConfig | None = None,
                adjacency: dict | None = None, shapes=None, table=None) -> BundleCloud:
    """Point cloud of one bundle over the dataset.

    ``shapes`` restricts the candidate shapes (used by jaw binning).  Tags
    filter only when both the shape and the bundle carry tags.
    """
    prune_cfg = prune_cfg or PruneConfig()
    adjacency = adjacency or {}
    table = bundle_eval_table(lib) if table is None else table
    bnames = [b.name for b in lib.bundles]
    bi = bnames.index(bundle.name)
    neighbors = [n for n in adjacency.get(bundle.name, []) if n in bnames]
    nbi = [bnames.index(n) for n in neighbors]
    min_disp, dedupe = lib_thresholds(lib, prune_cfg)
    rest = table[0, bi]

    def point(row, name):
        return CloudPoint(name, table[row, bi].copy(),
                          {n: table[row, k].copy() for n, k in zip(neighbors, nbi)})

    pts = [point(0, NEUTRAL)]
    kept = [rest]
    allowed = None if shapes is None else set(shapes)
    for s_i, shape in enumerate(lib.shapes):
        if allowed is not None and shape.name not in allowed:
            continue
        if shape.tags and bundle.region_tags and not (shape.tags & bundle.region_tags):
            continue
        pos = table[s_i + 1, bi]
        if np.linalg.norm(pos - rest) < min_disp:
            continue
        if np.min(np.linalg.norm(np.array(kept) - pos, axis=1)) < dedupe:
            continue
        kept.append(pos)
        pts.append(point(s_i + 1, shape.name))
    return BundleCloud(bundle.name, pts, None, neighbors)


def lib_thresholds(lib, prune_cfg):
    return prune_cfg.resolve(lib.bbox_diagonal())


def bin_clouds_by_jaw(lib: ShapeLibrary, bundle, bin_edges, prune_cfg=None, adjacency=None,
                      table=None) -> list:
    """One cloud per jaw-rotation interval.

    Intervals are ``[-inf, e0), [e0, e1), ..., [ek, inf]``; the neutral is
    in every bin and every shape stays unskinned to the rest pose.
    """
    edges = [float(e) for e in bin_edges]
    if edges != sorted(edges):
        raise ValueError("bin edges must be ascending")
    bounds = [-math.inf] + edges + [math.inf]
    table = bundle_eval_table(lib) if table is None else table
    clouds = []
    for k in range(len(bounds) - 1):
        lo, hi = bounds[k], bounds[k + 1]
        last = k == len(bounds) - 2
        members = [s.name for s in lib.shapes
                   if lo <= s.jaw.rot < hi or (last and s.jaw.rot == hi)]
        c = build_cloud(lib, bundle, prune_cfg, adjacency, members, table)
        c.jaw_bin = (lo, hi, last)
        clouds.append(c)
    return clouds


# -- tetrahedra -----------------------------------------------------------

def _det(a, b, c):
    return (a[..., 0] * (b[..., 1] * c[..., 2] - b[..., 2] * c[..., 1])
            - a[..., 1] * (b[..., 0] * c[..., 2] - b[..., 2] * c[..., 0])
            + a[..., 2] * (b[..., 0] * c[..., 1] - b[..., 1] * c[..., 0]))


def tet_weights(T, p) -> np.ndarray:
    """Barycentric weights of ``p`` in each tetrahedron of ``T`` (m, 4, 3).

    Same signed-volume formulation as :func:`facerecon.mesh.tet_barycentric`.
    """
    q0, q1, q2, q3 = T[:, 0], T[:, 1], T[:, 2], T[:, 3]
    e1, e2, e3 = q1 - q0, q2 - q0, q3 - q0
    r = p - q0
    vol = _det(e1, e2, e3)
    w = np.empty((len(T), 4))
    w[:, 1] = _det(r, e2, e3) / vol
    w[:, 2] = _det(e1, r, e3) / vol
    w[:, 3] = _det(e1, e2, r) / vol
    w[:, 0] = _det(q1 - p, q2 - p, q3 - p) / vol
    return w


def _edge_inverses(T):
    """Inverse of the edge matrix ``[q1-q0, q2-q0, q3-q0]`` per tetrahedron."""
    if not len(T):
        return np.zeros((0, 3, 3))
    E = np.stack([T[:, 1] - T[:, 0], T[:, 2] - T[:, 0], T[:, 3] - T[:, 0]], axis=2)
    return np.linalg.inv(E)


def tet_quality(T):
    """Volume, aspect ratio (longest edge / smallest altitude), longest edge."""
    e1, e2, e3 = T[:, 1] - T[:, 0], T[:, 2] - T[:, 0], T[:, 3] - T[:, 0]
    vol = np.abs(_det(e1, e2, e3)) / 6.0
    pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
    longest = np.max(np.stack([np.linalg.norm(T[:, i] - T[:, j], axis=1) for i, j in pairs]),
                     axis=0)
    areas = []
    for a, b, c in ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)):
        areas.append(0.5 * np.linalg.norm(np.cross(T[:, b] - T[:, a], T[:, c] - T[:, a]), axis=1))
    max_area = np.max(np.stack(areas), axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        min_alt = 3.0 * vol / max_area
        aspect = np.where(min_alt > 0, longest / min_alt, np.inf)
    return vol, aspect, longest


def enumerate_tets(cloud: BundleCloud, quality_cfg: QualityConfig | None = None,
                   cap: int = DEFAULT_CAP, blacklist=()) -> TetSet:
    """All quality-passing 4-subsets of the cloud, in canonical order.

    ``too_small`` is set when the cloud has no four non-coplanar points; the
    bundle then runs in projection-only mode.
    """
    quality_cfg = quality_cfg or QualityConfig()
    P = cloud.positions
    n = len(P)
    total = math.comb(n, 4)
    if total > cap:
        raise CombinatorialCapExceeded(cloud.bundle, n, total, cap)
    if n < 4:
        return TetSet(np.zeros((0, 4), np.int64), np.zeros((0, 3)), True)
    combos = np.fromiter((c for comb in combinations(range(n), 4) for c in comb),
                         dtype=np.int64, count=4 * total).reshape(total, 4)
    T = P[combos]
    d = cloud.diagonal()
    vol, aspect, longest = tet_quality(T)
    tet_diag = np.linalg.norm(T.max(axis=1) - T.min(axis=1), axis=1)
    nondegenerate = 6.0 * vol > 1e-12 * tet_diag ** 3
    keep = nondegenerate.copy()
    keep &= vol >= quality_cfg.min_vol_frac * d ** 3
    keep &= aspect <= quality_cfg.max_aspect
    keep &= longest <= quality_cfg.max_extent_frac * d
    if blacklist:
        bl = {tuple(sorted(int(x) for x in t)) for t in blacklist}
        keep &= np.array([tuple(c) not in bl for c in combos.tolist()], dtype=bool)
    q = np.stack([vol, aspect, longest], axis=1)[keep]
    return TetSet(combos[keep], q, bool(not nondegenerate.any()))


def build_grid(tetset: TetSet, cloud: BundleCloud,
               budget: int = REGISTRATION_BUDGET) -> UniformGrid | None:
    """Uniform grid over the inflated cloud bounds.

    Cells per axis start at ``ceil(cbrt(m / 8))`` clamped to [1, 64] and are
    reduced while the total number of cell registrations exceeds
    ``budget * m``, since large overlapping tetrahedra otherwise register in
    thousands of cells each.
    """
    m = len(tetset)
    if m == 0:
        return None
    P = cloud.positions
    lo, hi = P.min(axis=0), P.max(axis=0)
    ext = hi - lo
    pad = np.maximum(0.05 * ext, 1e-9 * max(float(np.linalg.norm(ext)), 1e-300))
    lo, hi = lo - pad, hi + pad
    ext = hi - lo
    T = P[tetset.tets]
    margin = 1e-7 * max(float(np.linalg.norm(ext)), 1e-300)
    tlo = (T.min(axis=1) - margin - lo) / ext
    thi = (T.max(axis=1) + margin - lo) / ext

    d = int(min(max(math.ceil((m / 8.0) ** (1.0 / 3.0)), 1), 64))
    while True:
        dims = np.array([d, d, d])
        c0 = np.clip(np.floor(tlo * dims).astype(np.int64), 0, dims - 1)
        c1 = np.clip(np.floor(thi * dims).astype(np.int64), 0, dims - 1)
        span = c1 - c0 + 1
        counts = np.prod(span, axis=1)
        if d == 1 or counts.sum() <= budget * m:
            break
        d -= 1

    N = int(counts.sum())
    tet_id = np.repeat(np.arange(m), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(N) - start
    sy = np.repeat(span[:, 1], counts)
    sz = np.repeat(span[:, 2], counts)
    kx = local // (sy * sz)
    ky = (local // sz) % sy
    kz = local % sz
    cell = (((np.repeat(c0[:, 0], counts) + kx) * dims[1] + np.repeat(c0[:, 1], counts) + ky)
            * dims[2] + np.repeat(c0[:, 2], counts) + kz)
    order = np.argsort(cell, kind="stable")
    ncell = int(np.prod(dims))
    offsets = np.zeros(ncell + 1, dtype=np.int64)
    np.cumsum(np.bincount(cell, minlength=ncell), out=offsets[1:])
    return UniformGrid(lo, hi, dims, offsets, tet_id[order].astype(np.int64))


def build_bundle_index(cloud: BundleCloud, quality_cfg=None, cap=DEFAULT_CAP,
                       blacklist=()) -> BundleIndex:
    tetset = enumerate_tets(cloud, quality_cfg, cap, blacklist)
    return BundleIndex(cloud, tetset, build_grid(tetset, cloud),
                       blacklist={tuple(int(x) for x in t) for t in blacklist})


# -- queries --------------------------------------------------------------

def query_containing(index: BundleIndex, p, tol: float = 1e-9):
    """Tetrahedra containing ``p`` as ``(tet_ids, weights)``.

    Weights are clamped to be non-negative and renormalised; tet ids are
    ascending (canonical order).  Empty arrays mean ``p`` is outside the data.
    """
    p = np.asarray(p, dtype=float)
    empty = (np.zeros(0, np.int64), np.zeros((0, 4)))
    if index.grid is None or not np.all(np.isfinite(p)):
        return empty
    cell = index.grid.cell_of(p)
    if cell is None:
        return empty
    cand = index.grid.cell_items(cell)
    if not len(cand):
        return empty
    ids, w = kernels.tets_containing(p, index._q0, index._Minv, cand, tol)
    w = np.clip(w, 0.0, None)
    w /= w.sum(axis=1, keepdims=True)
    return ids, w


def brute_force_containing(index: BundleIndex, p, tol: float = 1e-9):
    """Containment over every tetrahedron, bypassing the grid."""
    if not len(index.tetset):
        return np.zeros(0, np.int64)
    every = np.arange(len(index.tetset), dtype=np.int64)
    return kernels.tets_containing(np.asarray(p, dtype=float), index._q0, index._Minv, every,
                                   tol)[0]


@dataclass
class Projection:
    simplex: tuple  # cloud point ids
    weights: np.ndarray
    point: np.ndarray
    distance: float


def _cloud_simplices(n):
    for k in (3, 2, 1):
        yield k, np.array(list(combinations(range(n), k)), dtype=np.int64).reshape(-1, k)


PROJECTION_TIE = 1e-9  # absolute distance below which projections count as tied


def projection_candidates(index: BundleIndex, p, tie_tol: float | None = None) -> list:
    """Every simplex within ``tie_tol`` of the closest distance from ``p``.

    Solid tetrahedra are searched when any exist; otherwise the triangles,
    edges and points of the cloud.  Results are in canonical order.
    """
    p = np.asarray(p, dtype=float)
    P = index.cloud.positions
    if tie_tol is None:
        tie_tol = PROJECTION_TIE
    if len(index.tetset):
        d2, W = kernels.closest_on_tets(p, index.tet_points)
        dist = np.sqrt(d2)
        best = dist.min()
        out = []
        for t in np.flatnonzero(dist <= best + tie_tol):
            ids = tuple(int(x) for x in index.tetset.tets[t])
            out.append(Projection(ids, W[t], W[t] @ P[list(ids)], float(dist[t])))
        return out
    cands = []
    for k, S in _cloud_simplices(len(P)):
        if not len(S):
            continue
        if k == 3:
            d2, W = triangles_closest(p, P[S[:, 0]], P[S[:, 1]], P[S[:, 2]])
        elif k == 2:
            a, b = P[S[:, 0]], P[S[:, 1]]
            ab = b - a
            den = np.einsum("ij,ij->i", ab, ab)
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.clip(np.einsum("ij,ij->i", p - a, ab) / den, 0.0, 1.0)
            t = np.where(den > 0, t, 0.0)
            W = np.stack([1 - t, t], axis=1)
            q = a + t[:, None] * ab
            d2 = np.sum((p - q) ** 2, axis=1)
        else:
            W = np.ones((len(S), 1))
            d2 = np.sum((p - P[S[:, 0]]) ** 2, axis=1)
        for s, w, dd in zip(S, W, d2):
            cands.append((math.sqrt(dd), tuple(int(x) for x in s), w))
    best = min(c[0] for c in cands)
    out = [Projection(ids, w, w @ P[list(ids)], d) for d, ids, w in cands if d <= best + tie_tol]
    out.sort(key=lambda c: (-len(c.simplex), c.simplex))
    return out


def project_to_index(index: BundleIndex, p) -> Projection:
    """Closest point of the indexed volume (first canonical simplex on ties)."""
    return projection_candidates(index, p)[0]


# -- whole index ----------------------------------------------------------

@dataclass
class LGIndex:
    """Indices for every bundle; a bundle has several entries when jaw-binned."""

    shape_names: list
    bundles: dict  # name -> list[BundleIndex]
    adjacency: dict
    bin_edges: list = field(default_factory=list)

    def for_bundle(self, name, rot=0.0) -> tuple:
        entries = self.bundles[name]
        for k, bi in enumerate(entries):
            if bi.in_bin(rot):
                return k, bi
        return 0, entries[0]


def build_index(lib: ShapeLibrary, adjacency: dict, prune_cfg=None, quality_cfg=None,
                bin_edges=None, cap=DEFAULT_CAP, threads=1) -> LGIndex:
    table = bundle_eval_table(lib)
    bin_edges = list(bin_edges or [])

    def one(bundle):
        if bin_edges:
            clouds = bin_clouds_by_jaw(lib, bundle, bin_edges, prune_cfg, adjacency, table)
        else:
            clouds = [build_cloud(lib, bundle, prune_cfg, adjacency, None, table)]
        return bundle.name, [build_bundle_index(c, quality_cfg, cap) for c in clouds]

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as ex:
            built = list(ex.map(one, lib.bundles))
    else:
        built = [one(b) for b in lib.bundles]
    return LGIndex(lib.shape_names, dict(built), adjacency, bin_edges)


def prune_index(index: LGIndex, min_usage: int = 1, blacklist: dict | None = None) -> LGIndex:
    """Drop rarely used or blacklisted tetrahedra and rebuild the grids.

    ``blacklist`` maps bundle names to cloud-point quadruples.
    """
    blacklist = blacklist or {}
    out = {}
    for name, entries in index.bundles.items():
        rebuilt = []
        for bi in entries:
            bl = set(bi.blacklist) | {tuple(sorted(int(x) for x in t))
                                      for t in blacklist.get(name, [])}
            tets = bi.tetset.tets
            keep = bi.usage >= min_usage
            if bl:
                keep &= np.array([tuple(t) not in bl for t in tets.tolist()], dtype=bool)
            ts = TetSet(tets[keep], bi.tetset.quality[keep], bi.tetset.too_small)
            rebuilt.append(BundleIndex(bi.cloud, ts, build_grid(ts, bi.cloud), bi.usage[keep], bl))
        out[name] = rebuilt
    return LGIndex(index.shape_names, out, index.adjacency, index.bin_edges)


# -- LGI1 cache -----------------------------------------------------------

INDEX_MAGIC = b"LGI1"
INDEX_VERSION = 1


class IndexFormatError(ValueError):
    pass


class _Writer:
    def __init__(self):
        self.buf = bytearray()

    def pack(self, fmt, *vals):
        self.buf += struct.pack("<" + fmt, *vals)

    def string(self, s):
        b = s.encode()
        self.pack("H", len(b))
        self.buf += b

    def strings(self, items):
        self.pack("I", len(items))
        for s in items:
            self.string(s)

    def array(self, a, dtype):
        self.buf += np.ascontiguousarray(a, dtype=dtype).tobytes()


class _Reader:
    def __init__(self, data):
        self.data, self.off = data, 0

    def unpack(self, fmt):
        fmt = "<" + fmt
        vals = struct.unpack_from(fmt, self.data, self.off)
        self.off += struct.calcsize(fmt)
        return vals if len(vals) > 1 else vals[0]

    def string(self):
        n = self.unpack("H")
        s = self.data[self.off:self.off + n].decode()
        self.off += n
        return s

    def strings(self):
        return [self.string() for _ in range(self.unpack("I"))]

    def array(self, dtype, shape):
        dt = np.dtype(dtype)
        count = int(np.prod(shape))
        a = np.frombuffer(self.data, dtype=dt, count=count, offset=self.off)
        self.off += count * dt.itemsize
        return a.reshape(shape).astype(dt.newbyteorder("="))


def save_index(index: LGIndex, path):
    """Write the binary cache; the output is a pure function of ``index``."""
    w = _Writer()
    w.buf += INDEX_MAGIC
    w.pack("I", INDEX_VERSION)
    table = [NEUTRAL] + list(index.shape_names)
    w.strings(table)
    w.pack("I", len(index.bin_edges))
    w.array(index.bin_edges, "<f8")
    adj_names = sorted(index.adjacency)
    w.pack("I", len(adj_names))
    for name in adj_names:
        w.string(name)
        w.strings(list(index.adjacency[name]))
    w.pack("I", len(index.bundles))
    for name, entries in index.bundles.items():
        w.string(name)
        w.pack("I", len(entries))
        for bi in entries:
            c = bi.cloud
            if c.jaw_bin is None:
                w.pack("BddB", 0, 0.0, 0.0, 0)
            else:
                w.pack("BddB", 1, c.jaw_bin[0], c.jaw_bin[1], int(c.jaw_bin[2]))
            w.strings(c.neighbors)
            n = len(c.points)
            w.pack("I", n)
            w.array([table.index(p.shape) for p in c.points], "<u4")
            w.array(c.positions, "<f8")
            w.array(c.neighbor_array(), "<f8")
            ts = bi.tetset
            w.pack("IB", len(ts), int(ts.too_small))
            w.array(ts.tets, "<u4")
            w.array(ts.quality, "<f8")
            w.array(bi.usage, "<u8")
            bl = sorted(bi.blacklist)
            w.pack("I", len(bl))
            w.array(np.array(bl, dtype=np.int64).reshape(-1, 4), "<u4")
            g = bi.grid
            w.pack("B", g is not None)
            if g is not None:
                w.array(g.lo, "<f8")
                w.array(g.hi, "<f8")
                w.array(g.dims, "<u4")
                w.pack("I", len(g.items))
                w.array(g.offsets, "<u8")
                w.array(g.items, "<u4")
    Path(path).write_bytes(bytes(w.buf))


def load_index(path) -> LGIndex:
    data = Path(path).read_bytes()
    if data[:4] != INDEX_MAGIC:
        raise IndexFormatError(f"{path}: not an index cache (bad magic)")
    try:
        return _parse_index(path, data)
    except (struct.error, ValueError, IndexError, UnicodeDecodeError) as exc:
        raise IndexFormatError(f"{path}: truncated or corrupt index cache ({exc})") from None


def _parse_index(path, data) -> LGIndex:
    r = _Reader(data)
    r.off = 4
    version = r.unpack("I")
    if version != INDEX_VERSION:
        raise IndexFormatError(f"{path}: unsupported index version {version}")
    table = r.strings()
    edges = r.array("<f8", (r.unpack("I"),)).tolist()
    adjacency = {}
    for _ in range(r.unpack("I")):
        name = r.string()
        adjacency[name] = r.strings()
    bundles = {}
    for _ in range(r.unpack("I")):
        name = r.string()
        entries = []
        for _ in range(r.unpack("I")):
            has_bin, lo, hi, closed = r.unpack("BddB")
            neighbors = r.strings()
            n = r.unpack("I")
            shape_ids = r.array("<u4", (n,))
            pos = r.array("<f8", (n, 3))
            nbe = r.array("<f8", (n, len(neighbors), 3))
            points = [CloudPoint(table[s], pos[i], {nb: nbe[i, k] for k, nb in enumerate(neighbors)})
                      for i, s in enumerate(shape_ids)]
            cloud = BundleCloud(name, points, (lo, hi, bool(closed)) if has_bin else None,
                                neighbors)
            m, too_small = r.unpack("IB")
            tets = r.array("<u4", (m, 4)).astype(np.int64)
            quality = r.array("<f8", (m, 3))
            usage = r.array("<u8", (m,))
            bl = r.array("<u4", (r.unpack("I"), 4)).astype(np.int64)
            grid = None
            if r.unpack("B"):
                glo = r.array("<f8", (3,))
                ghi = r.array("<f8", (3,))
                dims = r.array("<u4", (3,)).astype(np.int64)
                n_items = r.unpack("I")
                offsets = r.array("<u8", (int(np.prod(dims)) + 1,)).astype(np.int64)
                items = r.array("<u4", (n_items,)).astype(np.int64)
                grid = UniformGrid(glo, ghi, dims, offsets, items)
            entries.append(BundleIndex(cloud, TetSet(tets, quality, bool(too_small)), grid,
                                       usage, {tuple(int(x) for x in t) for t in bl}))
        bundles[name] = entries
    if r.off != len(data):
        raise IndexFormatError(f"{path}: {len(data) - r.off} trailing bytes")
    return LGIndex(table[1:], bundles, adjacency, edges)
