"""Hot kernels with a compiled backend and a numpy fallback.

The compiled module is used when it has been built (``pip install -e .``
with Cython available) unless ``TOPOAFF_PURE_PYTHON=1`` is set.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("TOPOAFF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels

ransac_hypotheses = _impl.ransac_hypotheses
agglomerate = _impl.agglomerate
average_precision = _impl.average_precision
average_precision_columns = _impl.average_precision_columns

# pure helpers shared by both backends
solve_four_point = _pykernels.solve_four_point
reprojection_errors = _pykernels.reprojection_errors
LINKAGES = _pykernels.LINKAGES

__all__ = [
    "BACKEND",
    "ransac_hypotheses",
    "agglomerate",
    "average_precision",
    "average_precision_columns",
    "solve_four_point",
    "reprojection_errors",
    "LINKAGES",
]
