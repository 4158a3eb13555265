"""Process-level tuning for the training drivers."""

from __future__ import annotations

import ctypes
import ctypes.util

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_tuned = False


def tune_allocator(threshold=1 << 30):
    """Keep large temporaries on the glibc heap instead of mmap/munmap per array.

    Training allocates many multi-megabyte arrays per iteration; returning each
    to the OS costs page faults on every reuse.  No-op on non-glibc systems.
    """
    global _tuned
    if _tuned:
        return True
    name = ctypes.util.find_library("c")
    try:
        libc = ctypes.CDLL(name)
        ok = libc.mallopt(_M_MMAP_THRESHOLD, threshold) and libc.mallopt(_M_TRIM_THRESHOLD, threshold)
    except (OSError, AttributeError, TypeError):
        return False
    _tuned = bool(ok)
    return _tuned
