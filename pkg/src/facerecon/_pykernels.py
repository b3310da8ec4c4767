"""Pure-Python kernels.

Reference implementations of the hot loops.  ``_kernels.pyx`` mirrors these
statement for statement; both backends must agree to the last bit on the
marching kernel and to rounding on the projection kernel.
"""
import heapq
import math

import numpy as np

INF = math.inf

# neighbour offsets (di, dj) in circular order
OFFSETS = ((0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1))
# stencil triangles as pairs of neighbour slots: 45-degree wedges, then the
# axis-aligned and diagonal right-angle wedges
TRIANGLES = tuple((k, (k + 1) % 8) for k in range(8)) + (
    (0, 2), (2, 4), (4, 6), (6, 0), (1, 3), (3, 5), (5, 7), (7, 1))

FAR, TRIAL, ACCEPTED, BLOCKED = 0, 1, 2, 3


def _solve_wedge(ex, ey, ez, fx, fy, fz, a, b):
    """Arrival time at the apex of a wedge spanned by edges e, f.

    ``a``/``b`` are the known times at the far ends of e and f.  Returns inf
    when the characteristic does not pass between the two edges.
    """
    g11 = ex * ex + ey * ey + ez * ez
    g12 = ex * fx + ey * fy + ez * fz
    g22 = fx * fx + fy * fy + fz * fz
    det = g11 * g22 - g12 * g12
    if det <= 1e-12 * g11 * g22:
        return INF
    q11 = g22 / det
    q12 = -g12 / det
    q22 = g11 / det
    qa = q11 + 2.0 * q12 + q22
    qb = q11 * a + q12 * (a + b) + q22 * b
    qc = q11 * a * a + 2.0 * q12 * a * b + q22 * b * b - 1.0
    disc = qb * qb - qa * qc
    if disc < 0.0:
        return INF
    t = (qb + math.sqrt(disc)) / qa
    r1 = a - t
    r2 = b - t
    if q11 * r1 + q12 * r2 > 0.0 or q12 * r1 + q22 * r2 > 0.0:
        return INF
    return t


def _update(emb, covered, dist, state, H, W, i, j):
    px, py, pz = emb[i, j, 0], emb[i, j, 1], emb[i, j, 2]
    vals = [INF] * 8
    ex = [0.0] * 8
    ey = [0.0] * 8
    ez = [0.0] * 8
    best = INF
    for k in range(8):
        ni = i + OFFSETS[k][0]
        nj = j + OFFSETS[k][1]
        if ni < 0 or nj < 0 or ni >= H or nj >= W:
            continue
        q = ni * W + nj
        if state[q] != ACCEPTED:
            continue
        vals[k] = dist[q]
        ex[k] = emb[ni, nj, 0] - px
        ey[k] = emb[ni, nj, 1] - py
        ez[k] = emb[ni, nj, 2] - pz
        t = vals[k] + math.sqrt(ex[k] * ex[k] + ey[k] * ey[k] + ez[k] * ez[k])
        if t < best:
            best = t
    for k, l in TRIANGLES:
        if vals[k] == INF or vals[l] == INF:
            continue
        t = _solve_wedge(ex[k], ey[k], ez[k], ex[l], ey[l], ez[l], vals[k], vals[l])
        if t < best:
            best = t
    return best


def march(emb, covered, seed_idx, seed_dist, dist, state, limit=None, margin=0.0):
    """First-order fast marching on a texel lattice with 3D edge lengths.

    ``dist`` and ``state`` are flat scratch arrays (inf / 0 on entry) that
    are filled in place.  With ``limit`` the front only advances through
    texels whose arrival time is below ``limit - margin``; others are marked
    blocked and do not propagate.

    Returns the flat indices of accepted texels in acceptance order.
    """
    H, W = covered.shape
    heap = []
    for q, d in zip(seed_idx, seed_dist):
        q = int(q)
        d = float(d)
        if d < dist[q]:
            dist[q] = d
            state[q] = TRIAL
            heapq.heappush(heap, (d, q))
    accepted = []
    while heap:
        d, q = heapq.heappop(heap)
        if state[q] == ACCEPTED or state[q] == BLOCKED or d > dist[q]:
            continue
        if limit is not None and not d < limit[q] - margin:
            state[q] = BLOCKED
            continue
        state[q] = ACCEPTED
        accepted.append(q)
        i, j = divmod(q, W)
        for di, dj in OFFSETS:
            ni = i + di
            nj = j + dj
            if ni < 0 or nj < 0 or ni >= H or nj >= W:
                continue
            n = ni * W + nj
            if not covered[ni, nj] or state[n] == ACCEPTED or state[n] == BLOCKED:
                continue
            t = _update(emb, covered, dist, state, H, W, ni, nj)
            if t < dist[n]:
                dist[n] = t
                state[n] = TRIAL
                heapq.heappush(heap, (t, n))
    return np.asarray(accepted, dtype=np.int64)


def triangles_closest(p, a, b, c):
    """Vectorised Ericson region tests for triangles ``a, b, c`` (m, 3).

    Returns ``(dist2, w)`` with w of shape (m, 3).
    """
    ab = b - a
    ac = c - a
    ap = p - a
    bp = p - b
    cp = p - c
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4
    one = np.ones_like(d1)
    zero = np.zeros_like(d1)
    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = d1 / (d1 - d3)
        w_ac = d2 / (d2 - d6)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
        v_in = vb * denom
        w_in = vc * denom
    conds = [
        (d1 <= 0.0) & (d2 <= 0.0),
        (d3 >= 0.0) & (d4 <= d3),
        (vc <= 0.0) & (d1 >= 0.0) & (d3 <= 0.0),
        (d6 >= 0.0) & (d5 <= d6),
        (vb <= 0.0) & (d2 >= 0.0) & (d6 <= 0.0),
        (va <= 0.0) & ((d4 - d3) >= 0.0) & ((d5 - d6) >= 0.0),
    ]
    wa = np.select(conds, [one, zero, 1.0 - v_ab, zero, 1.0 - w_ac, zero], 1.0 - v_in - w_in)
    wb = np.select(conds, [zero, one, v_ab, zero, zero, 1.0 - w_bc], v_in)
    wc = np.select(conds, [zero, zero, zero, one, w_ac, w_bc], w_in)
    q = wa[:, None] * a + wb[:, None] * b + wc[:, None] * c
    diff = p - q
    return np.einsum("ij,ij->i", diff, diff), np.stack([wa, wb, wc], axis=1)


_FACES = ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2))


def _det3(a, b, c):
    return (a[:, 0] * (b[:, 1] * c[:, 2] - b[:, 2] * c[:, 1])
            - a[:, 1] * (b[:, 0] * c[:, 2] - b[:, 2] * c[:, 0])
            + a[:, 2] * (b[:, 0] * c[:, 1] - b[:, 1] * c[:, 0]))


def closest_on_tets(p, tets):
    """Closest point on each solid tetrahedron of ``tets`` (m, 4, 3).

    Returns ``(dist2, weights)`` with weights of shape (m, 4).  Tetrahedra
    must be non-degenerate.
    """
    p = np.asarray(p, dtype=np.float64)
    tets = np.asarray(tets, dtype=np.float64)
    m = len(tets)
    q0, q1, q2, q3 = tets[:, 0], tets[:, 1], tets[:, 2], tets[:, 3]
    e1, e2, e3 = q1 - q0, q2 - q0, q3 - q0
    r = p - q0
    vol = _det3(e1, e2, e3)
    w = np.empty((m, 4))
    w[:, 1] = _det3(r, e2, e3) / vol
    w[:, 2] = _det3(e1, r, e3) / vol
    w[:, 3] = _det3(e1, e2, r) / vol
    w[:, 0] = _det3(q1 - p, q2 - p, q3 - p) / vol
    inside = np.all(w >= 0.0, axis=1)

    dist2 = np.full(m, INF)
    weights = np.zeros((m, 4))
    for f in _FACES:
        d2, wf = triangles_closest(p, tets[:, f[0]], tets[:, f[1]], tets[:, f[2]])
        better = d2 < dist2
        dist2 = np.where(better, d2, dist2)
        weights[better] = 0.0
        weights[better, f[0]] = wf[better, 0]
        weights[better, f[1]] = wf[better, 1]
        weights[better, f[2]] = wf[better, 2]
    dist2[inside] = 0.0
    weights[inside] = w[inside]
    return dist2, weights


def tets_containing(p, q0, Minv, cand, tol):
    """Candidates whose barycentric weights are all ``>= -tol``.

    ``q0`` (m, 3) are first vertices, ``Minv`` (m, 3, 3) inverse edge
    matrices and ``cand`` the ids to test.  Returns ``(ids, weights)`` with
    raw (unclamped) weights, in candidate order.
    """
    cand = np.asarray(cand, dtype=np.int64)
    M = Minv[cand]
    r = np.asarray(p, dtype=float) - q0[cand]
    w = np.empty((len(cand), 4))
    for i in range(3):
        w[:, i + 1] = M[:, i, 0] * r[:, 0] + M[:, i, 1] * r[:, 1] + M[:, i, 2] * r[:, 2]
    w[:, 0] = 1.0 - (w[:, 1] + w[:, 2] + w[:, 3])
    ok = np.all(w >= -tol, axis=1)
    return cand[ok], w[ok]
