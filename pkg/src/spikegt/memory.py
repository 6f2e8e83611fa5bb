"""Live-tensor byte accounting.

Every array that backs a public tensor is registered here at construction.
The accountant tracks the number of currently live payload bytes and the
peak reached, which stands in for device memory when comparing methods.
It deliberately counts only tensor payloads, not interpreter overhead.
"""

from __future__ import annotations

import ctypes
import weakref

from .errors import MemoryCapExceeded


def tune_allocator() -> bool:
    """Raise glibc's mmap and trim thresholds so multi-megabyte tensor
    temporaries are served from the reusable heap arena.

    Without this, glibc mmaps and munmaps every large numpy buffer, and
    page-fault time dominates the actual arithmetic. No-op off glibc.
    """
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        ok_mmap = libc.mallopt(-3, 256 * 1024 * 1024)  # M_MMAP_THRESHOLD
        ok_trim = libc.mallopt(-1, 512 * 1024 * 1024)  # M_TRIM_THRESHOLD
        return bool(ok_mmap and ok_trim)
    except OSError:
        return False


class Accountant:
    def __init__(self) -> None:
        self.live_bytes = 0
        self.peak_bytes = 0
        self.cap_bytes: int | None = None
        self._tracked: set[int] = set()

    def track(self, arr) -> None:
        """Register an ndarray's payload; it is released when the array dies."""
        key = id(arr)
        if key in self._tracked:
            return
        nbytes = int(arr.nbytes)
        self._tracked.add(key)
        self.live_bytes += nbytes
        if self.live_bytes > self.peak_bytes:
            self.peak_bytes = self.live_bytes
        weakref.finalize(arr, self._release, key, nbytes)
        if self.cap_bytes is not None and self.live_bytes > self.cap_bytes:
            raise MemoryCapExceeded(
                f"live tensor bytes {self.live_bytes} exceed cap {self.cap_bytes}"
            )

    def _release(self, key: int, nbytes: int) -> None:
        if key in self._tracked:
            self._tracked.discard(key)
            self.live_bytes -= nbytes

    def reset_peak(self) -> int:
        """Reset the peak to the current live count; returns the baseline."""
        self.peak_bytes = self.live_bytes
        return self.live_bytes


_DEFAULT = Accountant()


def default_accountant() -> Accountant:
    return _DEFAULT


def track(arr) -> None:
    _DEFAULT.track(arr)


class region:
    """Context manager measuring peak live bytes above the entry baseline."""

    def __init__(self, accountant: Accountant | None = None):
        self.acct = accountant or _DEFAULT
        self.baseline = 0
        self.peak_above = 0

    def __enter__(self) -> "region":
        self.baseline = self.acct.reset_peak()
        return self

    def __exit__(self, *exc) -> None:
        self.peak_above = self.acct.peak_bytes - self.baseline
