"""Pure-numpy implementations of the inner loops.

Used when the compiled extension is unavailable, and as the reference the
compiled versions are tested against.
"""
import numpy as np

_CHUNK = 4096


def assign_nearest(points, centroids):
    """Index of the nearest centroid per point (lowest index on ties) and its squared distance."""
    diff = points[:, None, :] - centroids[None, :, :]
    dist = np.einsum("nkd,nkd->nk", diff, diff)
    labels = np.argmin(dist, axis=1).astype(np.int64)
    return labels, dist[np.arange(points.shape[0]), labels]


def batch_mean_sq_errors(G, idx, mu):
    """Squared Euclidean error of each row-set mean ``G[idx[r]].mean(0)`` against ``mu``."""
    t, m = idx.shape
    out = np.empty(t, dtype=np.float64)
    for start in range(0, t, _CHUNK):
        block = idx[start:start + _CHUNK]
        acc = G[block[:, 0]].copy()
        for j in range(1, m):
            acc += G[block[:, j]]
        diff = acc * (1.0 / m) - mu
        out[start:start + _CHUNK] = np.einsum("tp,tp->t", diff, diff)
    return out
