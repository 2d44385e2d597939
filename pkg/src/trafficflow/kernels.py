"""Backend selection for the index-producing point-cloud kernels.

The compiled Cython module is used when it imports; otherwise the numpy
implementation. Set ``TRAFFICFLOW_PURE_PYTHON=1`` to force the fallback.
All entry points take float64 C-contiguous arrays (anything array-like is
converted) and never participate in autograd.
"""

import os

import numpy as np

from . import _pykernels

if os.environ.get("TRAFFICFLOW_PURE_PYTHON") == "1":
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"


def _resolve(impl):
    """``None`` -> active backend; ``"cython"``/``"python"`` or a module pick explicitly."""
    if impl is None:
        return _impl
    if impl == "python":
        return _pykernels
    if impl == "cython":
        from . import _ckernels
        return _ckernels
    return impl


def _as_f64(a):
    if hasattr(a, "detach"):
        a = a.detach().cpu().numpy()
    return np.ascontiguousarray(a, dtype=np.float64)


def knn_indices(query, target, k, impl=None):
    impl = _resolve(impl)
    return impl.knn_indices(_as_f64(query), _as_f64(target), int(k))


def farthest_point_sampling(points, m, seed_index=0, impl=None):
    impl = _resolve(impl)
    return impl.farthest_point_sampling(_as_f64(points), int(m), int(seed_index))


def voxelize_2d(xy, origin, cell_size, shape, impl=None):
    impl = _resolve(impl)
    return impl.voxelize_2d(_as_f64(xy)[:, :2].copy(), float(origin[0]), float(origin[1]),
                            float(cell_size), int(shape[0]), int(shape[1]))


def gaussian_kde(points, bandwidth, impl=None):
    impl = _resolve(impl)
    return impl.gaussian_kde(_as_f64(points), float(bandwidth))
