"""Pure numpy implementations of the hot kernels.

Signatures and results match the compiled module `_ckernels`; these are used
when the extension is not built or TOPOAFF_PURE_PYTHON=1 is set.
"""

import numpy as np

LINKAGES = {"average": 0, "single": 1, "complete": 2}

_DEGENERATE_AREA = 1e-9


def _tri_area2(p, q, r):
    # twice the signed triangle area, batched over leading axes
    return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0])


def _well_conditioned(quad):
    """quad: (k, 4, 2). True where no three of the four points are collinear."""
    scale = np.ptp(quad.reshape(len(quad), -1), axis=1) ** 2 + 1e-300
    ok = np.ones(len(quad), dtype=bool)
    for a, b, c in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        area = np.abs(_tri_area2(quad[:, a], quad[:, b], quad[:, c]))
        ok &= area > _DEGENERATE_AREA * scale
    return ok


def _dlt_systems(src4, dst4):
    k = len(src4)
    A = np.zeros((k, 8, 8))
    rhs = np.zeros((k, 8))
    x, y = src4[..., 0], src4[..., 1]
    u, v = dst4[..., 0], dst4[..., 1]
    A[:, 0::2, 0] = x
    A[:, 0::2, 1] = y
    A[:, 0::2, 2] = 1.0
    A[:, 0::2, 6] = -u * x
    A[:, 0::2, 7] = -u * y
    A[:, 1::2, 3] = x
    A[:, 1::2, 4] = y
    A[:, 1::2, 5] = 1.0
    A[:, 1::2, 6] = -v * x
    A[:, 1::2, 7] = -v * y
    rhs[:, 0::2] = u
    rhs[:, 1::2] = v
    return A, rhs


def solve_four_point(src4, dst4):
    """Exact homography (h33 = 1) mapping four src points onto dst; None if degenerate."""
    src4 = np.asarray(src4, dtype=np.float64).reshape(1, 4, 2)
    dst4 = np.asarray(dst4, dtype=np.float64).reshape(1, 4, 2)
    if not (_well_conditioned(src4)[0] and _well_conditioned(dst4)[0]):
        return None
    A, rhs = _dlt_systems(src4, dst4)
    try:
        h = np.linalg.solve(A[0], rhs[0])
    except np.linalg.LinAlgError:
        return None
    H = np.append(h, 1.0).reshape(3, 3)
    if not np.isfinite(H).all() or abs(np.linalg.det(H)) <= 1e-12:
        return None
    return H


def reprojection_errors(H, src, dst):
    ph = np.c_[src, np.ones(len(src))] @ np.asarray(H).T
    w = ph[:, 2]
    err = np.full(len(src), np.inf)
    ok = np.abs(w) > 1e-12
    proj = ph[ok, :2] / w[ok, None]
    err[ok] = np.sqrt(((proj - dst[ok]) ** 2).sum(axis=1))
    return err


def ransac_hypotheses(src, dst, samples, thresh):
    """Score every 4-point hypothesis and keep the first one with most inliers.

    src, dst: (n, 2) float64; samples: (iters, 4) int64 indices.
    Returns (H or None, inlier mask, inlier count).
    """
    src = np.ascontiguousarray(src, dtype=np.float64)
    dst = np.ascontiguousarray(dst, dtype=np.float64)
    samples = np.asarray(samples, dtype=np.int64)
    n = len(src)
    src4, dst4 = src[samples], dst[samples]
    ok = _well_conditioned(src4) & _well_conditioned(dst4)
    A, rhs = _dlt_systems(src4, dst4)
    A[~ok] = np.eye(8)
    with np.errstate(all="ignore"):
        try:
            h = np.linalg.solve(A, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            h = np.stack([_safe_solve(a, r) for a, r in zip(A, rhs)])
        Hs = np.concatenate([h, np.ones((len(h), 1))], axis=1).reshape(-1, 3, 3)
        ok &= np.isfinite(Hs).all(axis=(1, 2))
        Hs[~ok] = np.eye(3)
        ok &= np.abs(np.linalg.det(Hs)) > 1e-12
        ph = np.einsum("kij,nj->kni", Hs, np.c_[src, np.ones(n)])
        w = ph[..., 2]
        valid = np.abs(w) > 1e-12
        safe_w = np.where(valid, w, 1.0)
        du = ph[..., 0] / safe_w - dst[None, :, 0]
        dv = ph[..., 1] / safe_w - dst[None, :, 1]
        inl = valid & (np.sqrt(du * du + dv * dv) <= thresh)
    counts = np.where(ok, inl.sum(axis=1), -1)
    if len(counts) == 0 or counts.max() < 0:
        return None, np.zeros(n, dtype=bool), 0
    best = int(np.argmax(counts))
    return Hs[best].copy(), inl[best].copy(), int(counts[best])


def _safe_solve(a, r):
    try:
        return np.linalg.solve(a, r)
    except np.linalg.LinAlgError:
        return np.full(8, np.nan)


def agglomerate(sim, linkage, stop_below):
    """Greedy agglomerative merging on a similarity matrix.

    Merges the most similar pair of active clusters (first in row-major order
    on ties) until the best similarity falls below `stop_below`. Cluster
    similarities follow the Lance-Williams update for the given linkage.
    Returns (labels, merges) with labels numbered by smallest member.
    """
    code = LINKAGES[linkage] if isinstance(linkage, str) else int(linkage)
    S = np.array(sim, dtype=np.float64, copy=True)
    n = S.shape[0]
    size = np.ones(n)
    active = np.ones(n, dtype=bool)
    parent = np.arange(n)
    merges = []
    work = np.triu(S, 1)
    work[np.tril_indices(n)] = -np.inf
    for _ in range(n - 1):
        flat = int(np.argmax(work))
        i, j = divmod(flat, n)
        best = work[i, j]
        if not np.isfinite(best) or best < stop_below:
            break
        merges.append((i, j, float(best)))
        row_i, row_j = S[i].copy(), S[j].copy()
        if code == 0:
            new = (size[i] * row_i + size[j] * row_j) / (size[i] + size[j])
        elif code == 1:
            new = np.maximum(row_i, row_j)
        else:
            new = np.minimum(row_i, row_j)
        S[i, :] = new
        S[:, i] = new
        size[i] += size[j]
        active[j] = False
        parent[parent == j] = i
        work[j, :] = -np.inf
        work[:, j] = -np.inf
        idx = np.arange(n)
        below = active & (idx < i)
        above = active & (idx > i)
        work[below, i] = new[below]
        work[i, above] = new[above]
    return _relabel(parent), merges


def _relabel(parent):
    labels = np.empty(len(parent), dtype=np.int64)
    seen = {}
    for idx, p in enumerate(parent):
        if p not in seen:
            seen[p] = len(seen)
        labels[idx] = seen[p]
    return labels


def average_precision(scores, labels):
    """Ranked-retrieval AP; ties broken by original index (stable sort)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels) > 0
    npos = int(labels.sum())
    if npos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    return float((np.arange(1, npos + 1) / ranks).sum() / npos)


def average_precision_columns(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    return np.array([average_precision(scores[:, c], labels[:, c]) for c in range(scores.shape[1])])
