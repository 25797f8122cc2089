# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: RANSAC hypothesis scoring, agglomerative merging, AP."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, sqrt, INFINITY, NAN, isfinite

cnp.import_array()

LINKAGES = {"average": 0, "single": 1, "complete": 2}

cdef double _DEGENERATE_AREA = 1e-9


cdef inline double _area2(double[:, ::1] p, long a, long b, long c) nogil:
    return ((p[b, 0] - p[a, 0]) * (p[c, 1] - p[a, 1])
            - (p[b, 1] - p[a, 1]) * (p[c, 0] - p[a, 0]))


cdef bint _well_conditioned(double[:, ::1] q) nogil:
    cdef double lo = q[0, 0], hi = q[0, 0], scale
    cdef int r, c
    for r in range(4):
        for c in range(2):
            if q[r, c] < lo:
                lo = q[r, c]
            if q[r, c] > hi:
                hi = q[r, c]
    scale = (hi - lo) * (hi - lo) + 1e-300
    if fabs(_area2(q, 0, 1, 2)) <= _DEGENERATE_AREA * scale:
        return False
    if fabs(_area2(q, 0, 1, 3)) <= _DEGENERATE_AREA * scale:
        return False
    if fabs(_area2(q, 0, 2, 3)) <= _DEGENERATE_AREA * scale:
        return False
    if fabs(_area2(q, 1, 2, 3)) <= _DEGENERATE_AREA * scale:
        return False
    return True


cdef bint _solve8(double[:, ::1] A, double[::1] b, double[::1] x) nogil:
    """Gaussian elimination with partial pivoting, in place."""
    cdef int n = 8, col, row, piv, k
    cdef double best, tmp, f
    for col in range(n):
        piv = col
        best = fabs(A[col, col])
        for row in range(col + 1, n):
            if fabs(A[row, col]) > best:
                best = fabs(A[row, col])
                piv = row
        if best < 1e-300:
            return False
        if piv != col:
            for k in range(n):
                tmp = A[col, k]
                A[col, k] = A[piv, k]
                A[piv, k] = tmp
            tmp = b[col]
            b[col] = b[piv]
            b[piv] = tmp
        for row in range(col + 1, n):
            f = A[row, col] / A[col, col]
            if f != 0.0:
                for k in range(col, n):
                    A[row, k] -= f * A[col, k]
                b[row] -= f * b[col]
    for row in range(n - 1, -1, -1):
        tmp = b[row]
        for k in range(row + 1, n):
            tmp -= A[row, k] * x[k]
        x[row] = tmp / A[row, row]
        if not isfinite(x[row]):
            return False
    return True


cdef double _det3(double[::1] h) nogil:
    return (h[0] * (h[4] * h[8] - h[5] * h[7])
            - h[1] * (h[3] * h[8] - h[5] * h[6])
            + h[2] * (h[3] * h[7] - h[4] * h[6]))


def ransac_hypotheses(src, dst, samples, double thresh):
    """Score every 4-point hypothesis and keep the first one with most inliers."""
    cdef double[:, ::1] s = np.ascontiguousarray(src, dtype=np.float64)
    cdef double[:, ::1] d = np.ascontiguousarray(dst, dtype=np.float64)
    cdef cnp.int64_t[:, ::1] smp = np.ascontiguousarray(samples, dtype=np.int64)
    cdef Py_ssize_t n = s.shape[0], iters = smp.shape[0], it, i, r
    cdef double[:, ::1] q_src = np.empty((4, 2))
    cdef double[:, ::1] q_dst = np.empty((4, 2))
    cdef double[:, ::1] A = np.empty((8, 8))
    cdef double[::1] b = np.empty(8)
    cdef double[::1] h = np.empty(9)
    cdef double[::1] best_h = np.empty(9)
    cdef double x, y, u, v, w, pu, pv, t2 = thresh * thresh
    cdef long count, best_count = -1, idx
    cdef Py_ssize_t best_it = -1

    with nogil:
        for it in range(iters):
            for r in range(4):
                idx = smp[it, r]
                q_src[r, 0] = s[idx, 0]
                q_src[r, 1] = s[idx, 1]
                q_dst[r, 0] = d[idx, 0]
                q_dst[r, 1] = d[idx, 1]
            if not (_well_conditioned(q_src) and _well_conditioned(q_dst)):
                continue
            for r in range(4):
                x = q_src[r, 0]; y = q_src[r, 1]; u = q_dst[r, 0]; v = q_dst[r, 1]
                A[2 * r, 0] = x; A[2 * r, 1] = y; A[2 * r, 2] = 1.0
                A[2 * r, 3] = 0.0; A[2 * r, 4] = 0.0; A[2 * r, 5] = 0.0
                A[2 * r, 6] = -u * x; A[2 * r, 7] = -u * y
                A[2 * r + 1, 0] = 0.0; A[2 * r + 1, 1] = 0.0; A[2 * r + 1, 2] = 0.0
                A[2 * r + 1, 3] = x; A[2 * r + 1, 4] = y; A[2 * r + 1, 5] = 1.0
                A[2 * r + 1, 6] = -v * x; A[2 * r + 1, 7] = -v * y
                b[2 * r] = u
                b[2 * r + 1] = v
            if not _solve8(A, b, h):
                continue
            h[8] = 1.0
            if fabs(_det3(h)) <= 1e-12:
                continue
            count = 0
            for i in range(n):
                x = s[i, 0]; y = s[i, 1]
                w = h[6] * x + h[7] * y + h[8]
                if fabs(w) <= 1e-12:
                    continue
                pu = (h[0] * x + h[1] * y + h[2]) / w - d[i, 0]
                pv = (h[3] * x + h[4] * y + h[5]) / w - d[i, 1]
                if sqrt(pu * pu + pv * pv) <= thresh:
                    count += 1
            if count > best_count:
                best_count = count
                best_it = it
                for r in range(9):
                    best_h[r] = h[r]

    mask = np.zeros(n, dtype=bool)
    if best_it < 0:
        return None, mask, 0
    H = np.asarray(best_h).reshape(3, 3).copy()
    cdef cnp.uint8_t[::1] m = mask.view(np.uint8)
    for i in range(n):
        x = s[i, 0]; y = s[i, 1]
        w = best_h[6] * x + best_h[7] * y + best_h[8]
        if fabs(w) <= 1e-12:
            continue
        pu = (best_h[0] * x + best_h[1] * y + best_h[2]) / w - d[i, 0]
        pv = (best_h[3] * x + best_h[4] * y + best_h[5]) / w - d[i, 1]
        if sqrt(pu * pu + pv * pv) <= thresh:
            m[i] = 1
    return H, mask, int(best_count)


cdef inline void _row_best(double[:, ::1] S, cnp.uint8_t[::1] active, Py_ssize_t i, Py_ssize_t n,
                           double[::1] rbest, cnp.int64_t[::1] rarg) noexcept nogil:
    # first maximum of S[i, j] over active j > i
    cdef Py_ssize_t j
    rbest[i] = -INFINITY
    rarg[i] = -1
    for j in range(i + 1, n):
        if active[j] and (rarg[i] < 0 or S[i, j] > rbest[i]):
            rbest[i] = S[i, j]
            rarg[i] = j


def agglomerate(sim, linkage, double stop_below):
    """Greedy agglomerative merging; see the pure-Python twin for semantics.

    Keeps the best partner of every row so that a merge only rescans the
    rows it touched.
    """
    cdef int code = LINKAGES[linkage] if isinstance(linkage, str) else int(linkage)
    cdef double[:, ::1] S = np.array(sim, dtype=np.float64, copy=True, order="C")
    cdef Py_ssize_t n = S.shape[0], i, k, bi = 0, bj = 0, step
    cdef double best, val, si, sj
    cdef double[::1] size = np.ones(n)
    cdef cnp.uint8_t[::1] active = np.ones(n, dtype=np.uint8)
    cdef cnp.int64_t[::1] parent = np.arange(n, dtype=np.int64)
    cdef double[::1] rbest = np.empty(n)
    cdef cnp.int64_t[::1] rarg = np.empty(n, dtype=np.int64)
    merges = []
    with nogil:
        for i in range(n):
            _row_best(S, active, i, n, rbest, rarg)
    for step in range(n - 1):
        best = -INFINITY
        bi = -1
        with nogil:
            for i in range(n):
                if active[i] and rarg[i] >= 0 and (bi < 0 or rbest[i] > best):
                    best = rbest[i]
                    bi = i
        if bi < 0 or not isfinite(best) or best < stop_below:
            break
        bj = rarg[bi]
        merges.append((int(bi), int(bj), float(best)))
        si = size[bi]
        sj = size[bj]
        with nogil:
            for k in range(n):
                if code == 0:
                    val = (si * S[bi, k] + sj * S[bj, k]) / (si + sj)
                elif code == 1:
                    val = S[bi, k] if S[bi, k] >= S[bj, k] else S[bj, k]
                else:
                    val = S[bi, k] if S[bi, k] <= S[bj, k] else S[bj, k]
                S[bi, k] = val
                S[k, bi] = val
            size[bi] = si + sj
            active[bj] = 0
            for k in range(n):
                if parent[k] == bj:
                    parent[k] = bi
            _row_best(S, active, bi, n, rbest, rarg)
            for k in range(bj):
                if not active[k] or k == bi:
                    continue
                if rarg[k] == bi or rarg[k] == bj:
                    _row_best(S, active, k, n, rbest, rarg)
                elif k < bi and (S[k, bi] > rbest[k] or (S[k, bi] == rbest[k] and bi < rarg[k])):
                    rbest[k] = S[k, bi]
                    rarg[k] = bi
    labels = np.empty(n, dtype=np.int64)
    seen = {}
    for k in range(n):
        p = parent[k]
        if p not in seen:
            seen[p] = len(seen)
        labels[k] = seen[p]
    return labels, merges


def average_precision(scores, labels):
    """Ranked-retrieval AP; ties broken by original index (stable sort)."""
    cdef double[::1] sc = np.ascontiguousarray(scores, dtype=np.float64)
    cdef cnp.uint8_t[::1] lab = np.ascontiguousarray(np.asarray(labels) > 0, dtype=np.uint8)
    cdef cnp.int64_t[::1] order = np.argsort(-np.asarray(sc), kind="stable").astype(np.int64)
    cdef Py_ssize_t n = sc.shape[0], r
    cdef long hits = 0
    cdef double acc = 0.0
    for r in range(n):
        if lab[order[r]]:
            hits += 1
            acc += <double>hits / <double>(r + 1)
    if hits == 0:
        return float("nan")
    return acc / hits


def average_precision_columns(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    cdef cnp.int64_t[:, ::1] order = np.ascontiguousarray(np.argsort(-scores, axis=0, kind="stable"), dtype=np.int64)
    cdef cnp.uint8_t[:, ::1] lab = np.ascontiguousarray(np.asarray(labels) > 0, dtype=np.uint8)
    cdef Py_ssize_t n = order.shape[0], m = order.shape[1], r, c
    cdef double[::1] out = np.empty(m)
    cdef long hits
    cdef double acc
    with nogil:
        for c in range(m):
            hits = 0
            acc = 0.0
            for r in range(n):
                if lab[order[r, c], c]:
                    hits += 1
                    acc += <double>hits / <double>(r + 1)
            out[c] = acc / hits if hits > 0 else NAN
    return np.asarray(out)
