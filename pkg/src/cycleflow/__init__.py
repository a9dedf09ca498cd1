"""Cycle-consistency training for dense cross-instance correspondence at desk scale."""

import ctypes as _ctypes
import os as _os
import warnings as _warnings

__version__ = "0.1.0"

# numba emits a benign threading-layer notice on some TBB versions
_warnings.filterwarnings("ignore", message=".*TBB.*")


def _tune_malloc() -> None:
    """Keep freed large blocks in the heap instead of unmapping them.

    The training loop allocates and frees hundreds of MB of activation
    buffers per step; with glibc defaults every large block is a fresh
    mmap and the page faults dominate the BLAS work.  Opt out with
    CYCLEFLOW_NO_MALLOC_TUNING=1.
    """
    if _os.environ.get("CYCLEFLOW_NO_MALLOC_TUNING"):
        return
    try:
        libc = _ctypes.CDLL(None)
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
        libc.mallopt(-4, 0)        # M_MMAP_MAX
    except Exception:
        pass


_tune_malloc()
