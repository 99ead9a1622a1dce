"""Monotonic stream clock.

All capture/composite/latency timestamps are microseconds since a stream
epoch recorded at server start. The epoch itself is a raw CLOCK_MONOTONIC
reading, which on Linux is machine-global: a client process on the same
host can subtract the epoch from its own monotonic clock and land in the
same timeline. Wall-clock time never enters latency math.
"""

from __future__ import annotations

import time
from dataclasses import dataclass


def monotonic_us() -> int:
    """Raw monotonic clock in microseconds (comparable across processes on one host)."""
    return time.monotonic_ns() // 1000


@dataclass(frozen=True)
class Timebase:
    """Maps the monotonic clock onto a shared stream epoch."""

    epoch_us: int

    @classmethod
    def start(cls) -> "Timebase":
        return cls(epoch_us=monotonic_us())

    def now_us(self) -> int:
        return monotonic_us() - self.epoch_us
