"""Numeric kernel backend selection.

The compiled Cython extension is preferred when it imported cleanly;
otherwise the pure numpy/scipy implementation is used.  Both expose the
same functions with identical semantics (see `pykernels`).  Set
``DTRCAL_PURE_PYTHON=1`` to force the fallback, e.g. for benchmarking.
"""

import os

from . import pykernels

_impl = pykernels
if os.environ.get("DTRCAL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811
    except ImportError:
        _impl = pykernels

BACKEND = "compiled" if _impl is not pykernels else "python"

ols_solve = _impl.ols_solve
calib_moments = _impl.calib_moments
