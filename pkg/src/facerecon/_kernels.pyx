# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; see ``_pykernels`` for the reference semantics."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY
from libc.stdlib cimport malloc, realloc, free

cnp.import_array()

cdef int[8] DI = [0, -1, -1, -1, 0, 1, 1, 1]
cdef int[8] DJ = [1, 1, 0, -1, -1, -1, 0, 1]
cdef int[16] TRI_K = [0, 1, 2, 3, 4, 5, 6, 7, 0, 2, 4, 6, 1, 3, 5, 7]
cdef int[16] TRI_L = [1, 2, 3, 4, 5, 6, 7, 0, 2, 4, 6, 0, 3, 5, 7, 1]

DEF FAR = 0
DEF TRIAL = 1
DEF ACCEPTED = 2
DEF BLOCKED = 3


cdef struct Heap:
    double *key
    long *idx
    long size
    long cap


cdef inline bint _less(double ka, long ia, double kb, long ib) nogil:
    return ka < kb or (ka == kb and ia < ib)


cdef int heap_push(Heap *h, double k, long q) nogil:
    cdef long i, parent
    if h.size == h.cap:
        h.cap = h.cap * 2 + 16
        h.key = <double *> realloc(h.key, h.cap * sizeof(double))
        h.idx = <long *> realloc(h.idx, h.cap * sizeof(long))
        if h.key == NULL or h.idx == NULL:
            return -1
    i = h.size
    h.size += 1
    while i > 0:
        parent = (i - 1) >> 1
        if _less(k, q, h.key[parent], h.idx[parent]):
            h.key[i] = h.key[parent]
            h.idx[i] = h.idx[parent]
            i = parent
        else:
            break
    h.key[i] = k
    h.idx[i] = q
    return 0


cdef void heap_pop(Heap *h, double *k, long *q) nogil:
    cdef long i = 0, child, n
    cdef double lk
    cdef long li
    k[0] = h.key[0]
    q[0] = h.idx[0]
    h.size -= 1
    n = h.size
    if n == 0:
        return
    lk = h.key[n]
    li = h.idx[n]
    while True:
        child = 2 * i + 1
        if child >= n:
            break
        if child + 1 < n and _less(h.key[child + 1], h.idx[child + 1], h.key[child], h.idx[child]):
            child += 1
        if _less(h.key[child], h.idx[child], lk, li):
            h.key[i] = h.key[child]
            h.idx[i] = h.idx[child]
            i = child
        else:
            break
    h.key[i] = lk
    h.idx[i] = li


cdef inline double _solve_wedge(double ex, double ey, double ez,
                                double fx, double fy, double fz,
                                double a, double b) nogil:
    cdef double g11 = ex * ex + ey * ey + ez * ez
    cdef double g12 = ex * fx + ey * fy + ez * fz
    cdef double g22 = fx * fx + fy * fy + fz * fz
    cdef double det = g11 * g22 - g12 * g12
    cdef double q11, q12, q22, qa, qb, qc, disc, t, r1, r2
    if det <= 1e-12 * g11 * g22:
        return INFINITY
    q11 = g22 / det
    q12 = -g12 / det
    q22 = g11 / det
    qa = q11 + 2.0 * q12 + q22
    qb = q11 * a + q12 * (a + b) + q22 * b
    qc = q11 * a * a + 2.0 * q12 * a * b + q22 * b * b - 1.0
    disc = qb * qb - qa * qc
    if disc < 0.0:
        return INFINITY
    t = (qb + sqrt(disc)) / qa
    r1 = a - t
    r2 = b - t
    if q11 * r1 + q12 * r2 > 0.0 or q12 * r1 + q22 * r2 > 0.0:
        return INFINITY
    return t


cdef double _update(const double[:, :, ::1] emb, double[::1] dist,
                    unsigned char[::1] state, long H, long W, long i, long j) nogil:
    cdef double px = emb[i, j, 0], py = emb[i, j, 1], pz = emb[i, j, 2]
    cdef double vals[8]
    cdef double ex[8]
    cdef double ey[8]
    cdef double ez[8]
    cdef double best = INFINITY, t
    cdef long k, l, ni, nj, q, m
    for k in range(8):
        vals[k] = INFINITY
        ex[k] = 0.0
        ey[k] = 0.0
        ez[k] = 0.0
        ni = i + DI[k]
        nj = j + DJ[k]
        if ni < 0 or nj < 0 or ni >= H or nj >= W:
            continue
        q = ni * W + nj
        if state[q] != ACCEPTED:
            continue
        vals[k] = dist[q]
        ex[k] = emb[ni, nj, 0] - px
        ey[k] = emb[ni, nj, 1] - py
        ez[k] = emb[ni, nj, 2] - pz
        t = vals[k] + sqrt(ex[k] * ex[k] + ey[k] * ey[k] + ez[k] * ez[k])
        if t < best:
            best = t
    for m in range(16):
        k = TRI_K[m]
        l = TRI_L[m]
        if vals[k] == INFINITY or vals[l] == INFINITY:
            continue
        t = _solve_wedge(ex[k], ey[k], ez[k], ex[l], ey[l], ez[l], vals[k], vals[l])
        if t < best:
            best = t
    return best


def march(const double[:, :, ::1] emb, const unsigned char[:, ::1] covered,
          seed_idx, seed_dist, double[::1] dist, unsigned char[::1] state,
          limit=None, double margin=0.0):
    cdef long H = covered.shape[0], W = covered.shape[1]
    cdef const long long[::1] sidx = np.ascontiguousarray(seed_idx, dtype=np.int64)
    cdef const double[::1] sdist = np.ascontiguousarray(seed_dist, dtype=np.float64)
    cdef const double[::1] lim
    cdef bint use_limit = limit is not None
    cdef Heap h
    cdef long s, q, n, i, j, k, ni, nj, n_acc = 0, cap_acc = 1024
    cdef double d, t
    cdef long *acc
    if use_limit:
        lim = np.ascontiguousarray(limit, dtype=np.float64)
    h.size = 0
    h.cap = 1024
    h.key = <double *> malloc(h.cap * sizeof(double))
    h.idx = <long *> malloc(h.cap * sizeof(long))
    acc = <long *> malloc(cap_acc * sizeof(long))
    if h.key == NULL or h.idx == NULL or acc == NULL:
        raise MemoryError()
    try:
        with nogil:
            for s in range(sidx.shape[0]):
                q = sidx[s]
                d = sdist[s]
                if d < dist[q]:
                    dist[q] = d
                    state[q] = TRIAL
                    if heap_push(&h, d, q) < 0:
                        with gil:
                            raise MemoryError()
            while h.size > 0:
                heap_pop(&h, &d, &q)
                if state[q] == ACCEPTED or state[q] == BLOCKED or d > dist[q]:
                    continue
                if use_limit and not d < lim[q] - margin:
                    state[q] = BLOCKED
                    continue
                state[q] = ACCEPTED
                if n_acc == cap_acc:
                    cap_acc *= 2
                    acc = <long *> realloc(acc, cap_acc * sizeof(long))
                    if acc == NULL:
                        with gil:
                            raise MemoryError()
                acc[n_acc] = q
                n_acc += 1
                i = q // W
                j = q - i * W
                for k in range(8):
                    ni = i + DI[k]
                    nj = j + DJ[k]
                    if ni < 0 or nj < 0 or ni >= H or nj >= W:
                        continue
                    n = ni * W + nj
                    if not covered[ni, nj] or state[n] == ACCEPTED or state[n] == BLOCKED:
                        continue
                    t = _update(emb, dist, state, H, W, ni, nj)
                    if t < dist[n]:
                        dist[n] = t
                        state[n] = TRIAL
                        if heap_push(&h, t, n) < 0:
                            with gil:
                                raise MemoryError()
        out = np.empty(n_acc, dtype=np.int64)
        for s in range(n_acc):
            out[s] = acc[s]
        return out
    finally:
        free(h.key)
        free(h.idx)
        free(acc)


cdef inline double _det3(double ax, double ay, double az, double bx, double by, double bz,
                         double cx, double cy, double cz) nogil:
    return ax * (by * cz - bz * cy) - ay * (bx * cz - bz * cx) + az * (bx * cy - by * cx)


cdef double _tri_closest(double px, double py, double pz,
                         const double[:, :, ::1] T, long t, int ia, int ib, int ic,
                         double *w) nogil:
    cdef double ax = T[t, ia, 0], ay = T[t, ia, 1], az = T[t, ia, 2]
    cdef double bx = T[t, ib, 0], by = T[t, ib, 1], bz = T[t, ib, 2]
    cdef double cx = T[t, ic, 0], cy = T[t, ic, 1], cz = T[t, ic, 2]
    cdef double abx = bx - ax, aby = by - ay, abz = bz - az
    cdef double acx = cx - ax, acy = cy - ay, acz = cz - az
    cdef double d1 = abx * (px - ax) + aby * (py - ay) + abz * (pz - az)
    cdef double d2 = acx * (px - ax) + acy * (py - ay) + acz * (pz - az)
    cdef double d3 = abx * (px - bx) + aby * (py - by) + abz * (pz - bz)
    cdef double d4 = acx * (px - bx) + acy * (py - by) + acz * (pz - bz)
    cdef double d5 = abx * (px - cx) + aby * (py - cy) + abz * (pz - cz)
    cdef double d6 = acx * (px - cx) + acy * (py - cy) + acz * (pz - cz)
    cdef double vc = d1 * d4 - d3 * d2
    cdef double vb = d5 * d2 - d1 * d6
    cdef double va = d3 * d6 - d5 * d4
    cdef double wa, wb, wc, v, ww, denom, qx, qy, qz
    if d1 <= 0.0 and d2 <= 0.0:
        wa = 1.0; wb = 0.0; wc = 0.0
    elif d3 >= 0.0 and d4 <= d3:
        wa = 0.0; wb = 1.0; wc = 0.0
    elif vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        wa = 1.0 - v; wb = v; wc = 0.0
    elif d6 >= 0.0 and d5 <= d6:
        wa = 0.0; wb = 0.0; wc = 1.0
    elif vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        ww = d2 / (d2 - d6)
        wa = 1.0 - ww; wb = 0.0; wc = ww
    elif va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        ww = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        wa = 0.0; wb = 1.0 - ww; wc = ww
    else:
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        ww = vc * denom
        wa = 1.0 - v - ww; wb = v; wc = ww
    w[0] = wa
    w[1] = wb
    w[2] = wc
    qx = wa * ax + wb * bx + wc * cx
    qy = wa * ay + wb * by + wc * cy
    qz = wa * az + wb * bz + wc * cz
    return (px - qx) * (px - qx) + (py - qy) * (py - qy) + (pz - qz) * (pz - qz)


cdef int[12] FACE_IDX = [1, 2, 3, 0, 2, 3, 0, 1, 3, 0, 1, 2]


def closest_on_tets(p, tets):
    cdef const double[:, :, ::1] T = np.ascontiguousarray(tets, dtype=np.float64)
    cdef long m = T.shape[0], t, f, k
    cdef double px = p[0], py = p[1], pz = p[2]
    out_d = np.empty(m)
    out_w = np.zeros((m, 4))
    cdef double[::1] D = out_d
    cdef double[:, ::1] Wt = out_w
    cdef double e1x, e1y, e1z, e2x, e2y, e2z, e3x, e3y, e3z, rx, ry, rz, vol
    cdef double w0, w1, w2, w3, best, d2
    cdef double wf[3]
    with nogil:
        for t in range(m):
            e1x = T[t, 1, 0] - T[t, 0, 0]; e1y = T[t, 1, 1] - T[t, 0, 1]; e1z = T[t, 1, 2] - T[t, 0, 2]
            e2x = T[t, 2, 0] - T[t, 0, 0]; e2y = T[t, 2, 1] - T[t, 0, 1]; e2z = T[t, 2, 2] - T[t, 0, 2]
            e3x = T[t, 3, 0] - T[t, 0, 0]; e3y = T[t, 3, 1] - T[t, 0, 1]; e3z = T[t, 3, 2] - T[t, 0, 2]
            rx = px - T[t, 0, 0]; ry = py - T[t, 0, 1]; rz = pz - T[t, 0, 2]
            vol = _det3(e1x, e1y, e1z, e2x, e2y, e2z, e3x, e3y, e3z)
            w1 = _det3(rx, ry, rz, e2x, e2y, e2z, e3x, e3y, e3z) / vol
            w2 = _det3(e1x, e1y, e1z, rx, ry, rz, e3x, e3y, e3z) / vol
            w3 = _det3(e1x, e1y, e1z, e2x, e2y, e2z, rx, ry, rz) / vol
            w0 = _det3(T[t, 1, 0] - px, T[t, 1, 1] - py, T[t, 1, 2] - pz,
                       T[t, 2, 0] - px, T[t, 2, 1] - py, T[t, 2, 2] - pz,
                       T[t, 3, 0] - px, T[t, 3, 1] - py, T[t, 3, 2] - pz) / vol
            if w0 >= 0.0 and w1 >= 0.0 and w2 >= 0.0 and w3 >= 0.0:
                D[t] = 0.0
                Wt[t, 0] = w0; Wt[t, 1] = w1; Wt[t, 2] = w2; Wt[t, 3] = w3
                continue
            best = INFINITY
            for f in range(4):
                d2 = _tri_closest(px, py, pz, T, t, FACE_IDX[3 * f], FACE_IDX[3 * f + 1],
                                  FACE_IDX[3 * f + 2], wf)
                if d2 < best:
                    best = d2
                    for k in range(4):
                        Wt[t, k] = 0.0
                    Wt[t, FACE_IDX[3 * f]] = wf[0]
                    Wt[t, FACE_IDX[3 * f + 1]] = wf[1]
                    Wt[t, FACE_IDX[3 * f + 2]] = wf[2]
            D[t] = best
    return out_d, out_w


def tets_containing(p, const double[:, ::1] q0, const double[:, :, ::1] Minv,
                    const long[::1] cand, double tol):
    cdef double px = p[0], py = p[1], pz = p[2]
    cdef Py_ssize_t n = cand.shape[0], k, t, cnt = 0
    cdef double rx, ry, rz, w1, w2, w3, w0
    ids_arr = np.empty(n, dtype=np.int64)
    w_arr = np.empty((n, 4), dtype=np.float64)
    cdef long[::1] ids = ids_arr
    cdef double[:, ::1] W = w_arr
    with nogil:
        for k in range(n):
            t = cand[k]
            rx = px - q0[t, 0]
            ry = py - q0[t, 1]
            rz = pz - q0[t, 2]
            # same association order as the einsum in the reference kernel
            w1 = Minv[t, 0, 0] * rx + Minv[t, 0, 1] * ry + Minv[t, 0, 2] * rz
            if w1 < -tol:
                continue
            w2 = Minv[t, 1, 0] * rx + Minv[t, 1, 1] * ry + Minv[t, 1, 2] * rz
            if w2 < -tol:
                continue
            w3 = Minv[t, 2, 0] * rx + Minv[t, 2, 1] * ry + Minv[t, 2, 2] * rz
            if w3 < -tol:
                continue
            w0 = 1.0 - (w1 + w2 + w3)
            if w0 < -tol:
                continue
            ids[cnt] = t
            W[cnt, 0] = w0
            W[cnt, 1] = w1
            W[cnt, 2] = w2
            W[cnt, 3] = w3
            cnt += 1
    return ids_arr[:cnt], w_arr[:cnt]
