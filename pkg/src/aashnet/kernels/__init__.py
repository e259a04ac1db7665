"""Hot loops, JIT-compiled with numba when available.

Set ``AASHNET_DISABLE_NUMBA=1`` to force the pure-numpy path. Both paths
produce bitwise-identical fixed-point results; the lasso kernel agrees to
rounding.
"""
import os

from . import _numpy

_disabled = os.environ.get("AASHNET_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

if _disabled:
    _impl = _numpy
    BACKEND = "numpy"
else:
    try:
        from . import _numba as _impl
        BACKEND = "numba"
    except ImportError:  # numba missing or broken
        _impl = _numpy
        BACKEND = "numpy"

OK = _numpy.OK
OVERFLOW = _numpy.OVERFLOW
CORRUPT = _numpy.CORRUPT

fxp_forward = _impl.fxp_forward
fxp_reverse_position = _impl.fxp_reverse_position
fxp_reverse_velocity = _impl.fxp_reverse_velocity
lasso_cd = _impl.lasso_cd


def implementations():
    """``{name: module}`` for every importable backend (used by tests and benchmarks)."""
    out = {"numpy": _numpy}
    try:
        from . import _numba
        out["numba"] = _numba
    except ImportError:
        pass
    return out
