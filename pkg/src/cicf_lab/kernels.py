"""Backend selection for the inner loops.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``CICF_LAB_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("CICF_LAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def assign_nearest(points, centroids):
    points = np.ascontiguousarray(points, dtype=np.float64)
    centroids = np.ascontiguousarray(centroids, dtype=np.float64)
    return _impl.assign_nearest(points, centroids)


def batch_mean_sq_errors(G, idx, mu):
    G = np.ascontiguousarray(G, dtype=np.float64)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    mu = np.ascontiguousarray(mu, dtype=np.float64)
    return _impl.batch_mean_sq_errors(G, idx, mu)
