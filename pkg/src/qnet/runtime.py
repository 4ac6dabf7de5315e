"""Process-level tuning shared by the CLI and the test suite."""
from __future__ import annotations

import ctypes
import ctypes.util
import os

from threadpoolctl import threadpool_limits

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_tuned = False


def tune_allocator() -> bool:
    """Keep freed activation buffers in the glibc heap.

    Large numpy temporaries are otherwise mmap'd and unmapped on every layer,
    and the resulting page faults can cost more than the arithmetic.
    Returns False where glibc's mallopt is unavailable.
    """
    global _tuned
    if _tuned:
        return True
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    ok = mallopt(_M_MMAP_THRESHOLD, 1 << 30) and mallopt(_M_TRIM_THRESHOLD, 1 << 31 - 1)
    _tuned = bool(ok)
    return _tuned


def thread_limit():
    """Context manager capping BLAS threads at QNET_THREADS (default 1)."""
    n = int(os.environ.get("QNET_THREADS", "1") or 1)
    return threadpool_limits(limits=max(1, n))
