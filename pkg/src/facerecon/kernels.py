"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the pure-Python
reference kernels are used.  Setting ``FACERECON_PURE_PYTHON=1`` forces the
fallback.
"""
import logging
import os

from . import _pykernels

logger = logging.getLogger(__name__)

if os.environ.get("FACERECON_PURE_PYTHON") == "1":
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        logger.info("compiled kernels unavailable, using pure-Python fallback")
        _impl = _pykernels
        BACKEND = "python"

march = _impl.march
closest_on_tets = _impl.closest_on_tets
tets_containing = _impl.tets_containing
