"""Geometric hot kernels with a compiled backend and a numpy fallback.

The compiled Cython extension is preferred when importable. Set
``FDMPOSE_KERNELS=numpy`` or ``FDMPOSE_KERNELS=cython`` to force a backend
(forcing cython raises if the extension is missing).
"""

import os

from . import numpy_backend

_forced = os.environ.get("FDMPOSE_KERNELS", "").strip().lower()

if _forced == "numpy":
    _impl = numpy_backend
else:
    try:
        from . import _fastkern as _impl  # type: ignore[no-redef]
    except ImportError:
        if _forced == "cython":
            raise ImportError(
                "FDMPOSE_KERNELS=cython but the compiled extension is not available"
            )
        _impl = numpy_backend

BACKEND = _impl.BACKEND_NAME
nearest_neighbor = _impl.nearest_neighbor
knn = _impl.knn
fps = _impl.fps
zbuffer = _impl.zbuffer

__all__ = ["BACKEND", "nearest_neighbor", "knn", "fps", "zbuffer", "numpy_backend"]
