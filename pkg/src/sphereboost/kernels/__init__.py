"""Backend dispatch for the hot margin-head kernels.

The env var SPHEREBOOST_BACKEND picks the implementation:

* ``auto``  (default) - numba if it imports, else pure numpy
* ``numba`` - require the JIT kernels, fail loudly if numba is missing
* ``numpy`` - force the pure-numpy reference path

The choice is made once at import; ``ACTIVE_BACKEND`` records it.  Both
backends are deterministic run-to-run; they are not bit-identical to each
other (reduction order differs), so the backend is part of a run's identity.
"""

import os

from . import numpy_impl

_REQUESTED = os.environ.get("SPHEREBOOST_BACKEND", "auto").strip().lower()
if _REQUESTED not in ("auto", "numba", "numpy"):
    raise ImportError(
        f"SPHEREBOOST_BACKEND must be one of auto/numba/numpy, got {_REQUESTED!r}"
    )

if _REQUESTED == "numpy":
    _impl = numpy_impl
    ACTIVE_BACKEND = "numpy"
else:
    try:
        from . import numba_impl as _impl
        ACTIVE_BACKEND = "numba"
    except ImportError:
        if _REQUESTED == "numba":
            raise
        _impl = numpy_impl
        ACTIVE_BACKEND = "numpy"

SIN_FLOOR = numpy_impl.SIN_FLOOR

margin_head_forward = _impl.margin_head_forward
margin_head_backward = _impl.margin_head_backward

__all__ = [
    "ACTIVE_BACKEND",
    "SIN_FLOOR",
    "margin_head_forward",
    "margin_head_backward",
    "numpy_impl",
]
