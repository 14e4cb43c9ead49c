"""glibc allocator tuning for the many short-lived multi-megabyte activation arrays.

Without it every large temporary is mmapped and unmapped, and page faults
dominate the numpy kernels. No-op off glibc.
"""
import ctypes
import ctypes.util

_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3

_done = False


def tune_allocator() -> bool:
    global _done
    if _done:
        return True
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        ok = libc.mallopt(_M_MMAP_THRESHOLD, 32 * 1024 * 1024)
        ok &= libc.mallopt(_M_TRIM_THRESHOLD, 1024 * 1024 * 1024)
        ok &= libc.mallopt(_M_TOP_PAD, 256 * 1024 * 1024)
    except (OSError, AttributeError):
        return False
    _done = bool(ok)
    return _done
