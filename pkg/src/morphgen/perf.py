"""Process-level performance knobs.

Training steps cycle through a few hundred MB of numpy buffers. With
glibc defaults those large blocks are mmapped and returned to the kernel
on free, so every step re-faults its pages; raising the mmap and trim
thresholds keeps the arena resident. Purely a speed knob: results are
bit-identical either way.
"""

from __future__ import annotations

import ctypes

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_APPLIED = False


def tune_allocator(threshold_bytes: int = 512 * 1024 * 1024) -> bool:
    """Raise glibc malloc trim/mmap thresholds; no-op off glibc."""
    global _APPLIED
    if _APPLIED:
        return True
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        ok = bool(libc.mallopt(_M_TRIM_THRESHOLD, threshold_bytes))
        ok = bool(libc.mallopt(_M_MMAP_THRESHOLD, threshold_bytes)) and ok
        _APPLIED = ok
        return ok
    except (OSError, AttributeError):
        return False
