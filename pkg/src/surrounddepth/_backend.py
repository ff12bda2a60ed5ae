"""Kernel backend selection.

The compiled extension is used when it imports; ``SURROUND_BACKEND=python``
forces the numpy fallback. ``SURROUND_THREADS`` caps the worker count of the
compiled kernels (default: all cores).
"""

import logging
import os

logger = logging.getLogger(__name__)

if os.environ.get("SURROUND_BACKEND", "").lower() == "python":
    from . import _kernels_py as kernels
else:
    try:
        from . import _kernels as kernels
    except ImportError:  # extension not built
        logger.debug("compiled kernels unavailable, using numpy fallback")
        from . import _kernels_py as kernels

BACKEND = kernels.BACKEND


def num_threads() -> int:
    raw = os.environ.get("SURROUND_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n <= 0:
        n = os.cpu_count() or 1
    return n
