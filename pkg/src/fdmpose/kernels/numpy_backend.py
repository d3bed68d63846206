"""Pure-numpy implementations of the hot geometric kernels.

These are the reference implementations; the optional Cython extension in
``_fastkern`` provides drop-in replacements with identical semantics
(including tie-breaking by lowest index).
"""

import numpy as np

BACKEND_NAME = "numpy"

# chunk row count for pairwise distance matrices, bounds peak memory
_CHUNK = 512


def _pairwise_sq(a, b):
    # (n, m) squared distances
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("nmk,nmk->nm", d, d)


def nearest_neighbor(query, ref):
    """Index and distance of the nearest row of ``ref`` for each query row."""
    query = np.ascontiguousarray(query, dtype=np.float64)
    ref = np.ascontiguousarray(ref, dtype=np.float64)
    n = query.shape[0]
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.float64)
    for s in range(0, n, _CHUNK):
        d2 = _pairwise_sq(query[s:s + _CHUNK], ref)
        i = np.argmin(d2, axis=1)
        idx[s:s + _CHUNK] = i
        dist[s:s + _CHUNK] = np.sqrt(d2[np.arange(len(i)), i])
    return idx, dist


def knn(query, ref, k):
    """k nearest rows of ``ref`` per query row, ascending by distance.

    Ties are broken by lower reference index.
    """
    query = np.ascontiguousarray(query, dtype=np.float64)
    ref = np.ascontiguousarray(ref, dtype=np.float64)
    if k > ref.shape[0]:
        raise ValueError(f"k={k} exceeds reference size {ref.shape[0]}")
    n = query.shape[0]
    idx = np.empty((n, k), dtype=np.int64)
    dist = np.empty((n, k), dtype=np.float64)
    for s in range(0, n, _CHUNK):
        d2 = _pairwise_sq(query[s:s + _CHUNK], ref)
        # stable lexsort on (distance, index) so ties go to the lower index
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        idx[s:s + _CHUNK] = order
        dist[s:s + _CHUNK] = np.sqrt(np.take_along_axis(d2, order, axis=1))
    return idx, dist


def fps(points, k, seed_index=0):
    """Farthest point sampling indices.

    The first index is ``seed_index``; each following index maximizes the
    minimum distance to the already-selected set, ties to the lowest index.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} points")
    if not 0 <= seed_index < n:
        raise ValueError(f"seed_index={seed_index} out of range")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = seed_index
    diff = points - points[seed_index]
    min_d2 = np.einsum("ij,ij->i", diff, diff)
    for i in range(1, k):
        nxt = int(np.argmax(min_d2))  # argmax returns the first maximum
        chosen[i] = nxt
        diff = points - points[nxt]
        np.minimum(min_d2, np.einsum("ij,ij->i", diff, diff), out=min_d2)
    return chosen


def zbuffer(points_cam, fx, fy, cx, cy, width, height):
    """Point-splat z-buffer.

    Returns an (height, width) int64 image holding, per pixel, the index of
    the nearest (smallest positive z) point projecting into it, or -1.
    """
    points_cam = np.ascontiguousarray(points_cam, dtype=np.float64)
    winner = np.full((height, width), -1, dtype=np.int64)
    z = points_cam[:, 2]
    front = z > 0.0
    if not front.any():
        return winner
    pidx = np.nonzero(front)[0]
    p = points_cam[pidx]
    u = np.floor(fx * p[:, 0] / p[:, 2] + cx).astype(np.int64)
    v = np.floor(fy * p[:, 1] / p[:, 2] + cy).astype(np.int64)
    ok = (u >= 0) & (u < width) & (v >= 0) & (v < height)
    pidx, u, v = pidx[ok], u[ok], v[ok]
    if pidx.size == 0:
        return winner
    flat = v * width + u
    # sort by (pixel, depth, index); first entry per pixel wins
    order = np.lexsort((pidx, points_cam[pidx, 2], flat))
    flat, pidx = flat[order], pidx[order]
    first = np.ones(flat.size, dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    winner.reshape(-1)[flat[first]] = pidx[first]
    return winner
