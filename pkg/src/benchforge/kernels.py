"""Kernel selection.

The compiled extension is used when it imports cleanly. Setting
``BENCHFORGE_PURE_PYTHON=1`` forces the pure-Python fallback.
"""

from __future__ import annotations

import logging
import os

from . import _pykernels

logger = logging.getLogger(__name__)

BACKEND = "python"

if os.environ.get("BENCHFORGE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:  # extension not built
        logger.debug("compiled kernels unavailable, using pure-Python fallback")
        _impl = _pykernels
else:
    _impl = _pykernels

trigram_counts = _impl.trigram_counts
search_layer = _impl.search_layer
select_neighbors = _impl.select_neighbors

__all__ = ["BACKEND", "trigram_counts", "search_layer", "select_neighbors"]
