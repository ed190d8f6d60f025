"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback is used.  Setting ``MFLQ_PURE_PYTHON=1`` forces the fallback.
"""

from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("MFLQ_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

euler_paths = _impl.euler_paths
euler_paths_empirical = _impl.euler_paths_empirical
mean_ode = _impl.mean_ode
backward_coeffs = _impl.backward_coeffs

__all__ = ["BACKEND", "euler_paths", "euler_paths_empirical", "mean_ode", "backward_coeffs"]
