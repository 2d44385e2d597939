"""Pure numpy fallback for the compiled kernels in ``_ckernels.pyx``."""

import numpy as np


def _sq_dists(a, b):
    diff = a[:, None, :] - b[None, :, :]
    out = diff[..., 0] * diff[..., 0]
    for c in range(1, a.shape[1]):
        out = out + diff[..., c] * diff[..., c]
    return out


def knn_indices(query, target, k):
    m = target.shape[0]
    if k > m:
        raise ValueError(f"k={k} exceeds target size {m}")
    d = _sq_dists(query, target)
    # stable sort keeps the lower index first on ties
    return np.argsort(d, axis=1, kind="stable")[:, :k].astype(np.int64)


def farthest_point_sampling(points, m, seed_index):
    n = points.shape[0]
    if m > n or m < 1:
        raise ValueError(f"cannot sample {m} of {n} points")
    if seed_index < 0 or seed_index >= n:
        raise ValueError(f"seed index {seed_index} out of range")
    sel = np.empty(m, dtype=np.int64)
    mind = np.full(n, np.inf)
    taken = np.zeros(n, dtype=bool)
    sel[0] = last = seed_index
    taken[last] = True
    for i in range(1, m):
        diff = points - points[last]
        d = diff[:, 0] * diff[:, 0]
        for c in range(1, points.shape[1]):
            d = d + diff[:, c] * diff[:, c]
        mind = np.minimum(mind, d)
        cand = np.where(taken, -1.0, mind)
        last = int(np.argmax(cand))
        sel[i] = last
        taken[last] = True
    return sel


def voxelize_2d(xy, origin_x, origin_y, cell_size, rows, cols):
    r = np.floor((xy[:, 0] - origin_x) / cell_size).astype(np.int64)
    c = np.floor((xy[:, 1] - origin_y) / cell_size).astype(np.int64)
    bad = (r < 0) | (r >= rows) | (c < 0) | (c >= cols)
    out = np.stack([r, c], axis=1)
    out[bad] = -1
    return out


def gaussian_kde(points, bandwidth):
    d = _sq_dists(points, points)
    return np.exp(-d * (1.0 / (2.0 * bandwidth * bandwidth))).mean(axis=1)
