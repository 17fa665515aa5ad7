"""Kernel backend selection.

Hot numeric kernels are written once (see kernels.py) and compiled with
numba's @njit when available.  Setting the environment variable

    CONVEXDP_BACKEND=numpy

before import selects the pure-NumPy fallback: the same source is executed
by the interpreter, no compilation.  CONVEXDP_BACKEND=numba insists on the
compiled path and raises if numba is missing.  The default is numba when it
imports, numpy otherwise.

CONVEXDP_WORKERS (or the CLI --workers flag) sets the numba thread count
used by the stage kernels.  Node solves write to disjoint output slots, so
results are bit-identical for any worker count.
"""

from __future__ import annotations

import os

# the portable layer; avoids probing optional TBB/OpenMP backends
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only on stripped installs
    numba = None
    HAS_NUMBA = False

_requested = os.environ.get("CONVEXDP_BACKEND", "auto").strip().lower()
if _requested in ("", "auto"):
    USE_NUMBA = HAS_NUMBA
elif _requested == "numba":
    if not HAS_NUMBA:
        raise ImportError("CONVEXDP_BACKEND=numba but numba is not installed")
    USE_NUMBA = True
elif _requested == "numpy":
    USE_NUMBA = False
else:
    raise ValueError(f"CONVEXDP_BACKEND must be auto|numba|numpy, got {_requested!r}")

BACKEND_NAME = "numba" if USE_NUMBA else "numpy"


def jit(**options):
    """Return the kernel decorator for the active backend.

    Compiled path: numba.njit(cache=True, **options).  Fallback: identity.
    """
    if USE_NUMBA:
        options.setdefault("cache", True)
        return numba.njit(**options)

    def passthrough(fn):
        return fn

    return passthrough


def available_workers() -> int:
    return os.cpu_count() or 1


def set_worker_threads(n: int) -> int:
    """Clamp and apply the numba thread count; returns the value in effect."""
    n = max(1, int(n))
    if USE_NUMBA:
        n = min(n, numba.config.NUMBA_NUM_THREADS)
        numba.set_num_threads(n)
    return n


def default_workers() -> int:
    env = os.environ.get("CONVEXDP_WORKERS", "").strip()
    if env:
        return max(1, int(env))
    return available_workers()
