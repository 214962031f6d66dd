"""Kernel backend selection.

``HCLN_BACKEND=numpy`` forces the pure-numpy kernels; the default is numba
when it imports cleanly. ``HCLN_THREADS`` caps numba's thread pool.
"""

import logging
import os

log = logging.getLogger(__name__)

_requested = os.environ.get("HCLN_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise RuntimeError(f"HCLN_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

HAVE_NUMBA = False
if _requested == "numba":
    try:
        import numba

        # tbb in this image is too old; omp is thread-safe for concurrent callers
        numba.config.THREADING_LAYER = os.environ.get("NUMBA_THREADING_LAYER", "omp")
        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        log.warning("numba not importable, falling back to numpy kernels")

BACKEND = "numba" if HAVE_NUMBA else "numpy"

if HAVE_NUMBA:
    _threads = os.environ.get("HCLN_THREADS")
    if _threads:
        numba.set_num_threads(max(1, min(int(_threads), numba.config.NUMBA_NUM_THREADS)))
