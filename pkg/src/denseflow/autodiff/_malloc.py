"""Keep freed activation buffers inside the process heap.

glibc returns large blocks to the kernel on free and every new activation
then pays first-touch page faults again; in a VM that doubles the cost of a
training step.  Raising the mmap and trim thresholds makes the allocator
recycle the same pages.  Best effort: silently does nothing off glibc.
"""

import ctypes
import ctypes.util

_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3


def tune():
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    ok = mallopt(_M_MMAP_THRESHOLD, 32 * 1024 * 1024)
    ok &= mallopt(_M_TRIM_THRESHOLD, 1 << 30)
    ok &= mallopt(_M_TOP_PAD, 64 * 1024 * 1024)
    return bool(ok)


tuned = tune()
