"""Kernel backend selection.

The compiled extension is used when importable; set ``A2A_PURE_PYTHON=1``
to force the pure-Python implementation.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("A2A_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

band_cholesky_solve = _impl.band_cholesky_solve
mlpg_normal_band = _impl.mlpg_normal_band
mlpg_solve_batch = _impl.mlpg_solve_batch
