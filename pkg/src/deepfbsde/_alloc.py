"""Allocator tuning for the training loop.

Training allocates many short-lived arrays of a few megabytes.  glibc serves
those with fresh mmap calls by default, and the page faults cost more than the
arithmetic.  Raising the mmap threshold keeps them on the heap.  No-op off glibc.
"""

import ctypes
import ctypes.util

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_done = False


def tune_allocator(mmap_threshold=1 << 26):
    global _done
    if _done:
        return
    _done = True
    name = ctypes.util.find_library("c")
    if not name:
        return
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return
    mallopt(_M_MMAP_THRESHOLD, int(mmap_threshold))
    mallopt(_M_TRIM_THRESHOLD, int(4 * mmap_threshold))
