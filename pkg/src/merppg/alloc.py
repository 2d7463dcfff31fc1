"""Allocation accounting for memory benchmarks.

Model code obtains its large buffers through :func:`tracked` / :func:`empty`
so that memory benchmarks can measure allocation behaviour deterministically,
independent of the OS allocator or garbage collector. Two counters are kept:

* ``total_bytes``   — cumulative bytes allocated while the meter was active.
* ``peak_bytes``    — high-water mark of live tracked bytes. Transient
  buffers that the owner explicitly retires via :func:`release` stop counting
  against the live set.

Metering is opt-in: when no meter is active, tracking calls are no-ops.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

_local = threading.local()


@dataclass
class AllocationMeter:
    """Accumulates allocation statistics for one measured region."""

    total_bytes: int = 0
    peak_bytes: int = 0
    live_bytes: int = 0
    n_allocations: int = 0
    _released: set = field(default_factory=set, repr=False)

    def add(self, nbytes: int) -> None:
        self.total_bytes += nbytes
        self.live_bytes += nbytes
        self.n_allocations += 1
        if self.live_bytes > self.peak_bytes:
            self.peak_bytes = self.live_bytes

    def sub(self, nbytes: int) -> None:
        self.live_bytes = max(0, self.live_bytes - nbytes)


def current_meter() -> AllocationMeter | None:
    return getattr(_local, "meter", None)


class metered:
    """Context manager installing a fresh meter for the enclosed region."""

    def __init__(self) -> None:
        self.meter = AllocationMeter()

    def __enter__(self) -> AllocationMeter:
        self._prev = current_meter()
        _local.meter = self.meter
        return self.meter

    def __exit__(self, *exc) -> None:
        _local.meter = self._prev


def tracked(arr: np.ndarray) -> np.ndarray:
    """Register an existing array with the active meter (no copy)."""
    m = current_meter()
    if m is not None and arr.base is None:
        m.add(arr.nbytes)
    return arr


def empty(shape, dtype=np.float64) -> np.ndarray:
    """Allocate an uninitialised tracked array."""
    return tracked(np.empty(shape, dtype=dtype))


def zeros(shape, dtype=np.float64) -> np.ndarray:
    return tracked(np.zeros(shape, dtype=dtype))


def release(arr: np.ndarray) -> None:
    """Mark a tracked buffer as retired (removes it from the live set)."""
    m = current_meter()
    if m is not None:
        key = id(arr)
        if key not in m._released:
            m._released.add(key)
            m.sub(arr.nbytes)
