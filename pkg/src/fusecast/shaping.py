"""In-process bandwidth shaping for benchmarks.

A shared token bucket applied at the transport write path: every byte
written through a shaped writer consumes one token, and writers block
until tokens refill at the configured rate. This gives a deterministic,
CI-friendly stand-in for a constrained link without touching OS qdiscs.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass


@dataclass(frozen=True)
class ShapedLink:
    """Link description: sustained rate plus per-frame propagation delay."""

    bandwidth_bytes_per_s: float
    base_delay_ms: float = 0.0
    burst_bytes: int | None = None  # defaults to 2 canvas frames at attach time

    def __post_init__(self) -> None:
        if self.bandwidth_bytes_per_s <= 0:
            raise ValueError("bandwidth must be positive")


class TokenBucket:
    """Thread-safe blocking token bucket."""

    def __init__(self, rate_bytes_per_s: float, capacity_bytes: int):
        self.rate = float(rate_bytes_per_s)
        self.capacity = int(capacity_bytes)
        self._tokens = float(capacity_bytes)
        self._updated = time.monotonic()
        self._lock = threading.Lock()

    def _refill_locked(self, now: float) -> None:
        self._tokens = min(self.capacity, self._tokens + (now - self._updated) * self.rate)
        self._updated = now

    def try_acquire(self, n: int) -> bool:
        with self._lock:
            self._refill_locked(time.monotonic())
            if self._tokens >= n:
                self._tokens -= n
                return True
            return False

    def acquire(self, n: int) -> None:
        """Block until n tokens are consumed. Requests beyond the bucket
        capacity are drained in capacity-sized chunks."""
        remaining = n
        while remaining > 0:
            chunk = min(remaining, self.capacity)
            while True:
                with self._lock:
                    now = time.monotonic()
                    self._refill_locked(now)
                    if self._tokens >= chunk:
                        self._tokens -= chunk
                        break
                    wait = (chunk - self._tokens) / self.rate
                time.sleep(min(wait, 0.05))
            remaining -= chunk


class SharedShaper:
    """One token bucket shared by every connection crossing the link."""

    def __init__(self, link: ShapedLink, default_burst: int):
        burst = link.burst_bytes if link.burst_bytes is not None else default_burst
        self.link = link
        self.bucket = TokenBucket(link.bandwidth_bytes_per_s, max(1, burst))

    def send_frame(self, sock, data: bytes) -> None:
        """Pace one frame's bytes through the shared bucket, then send."""
        if self.link.base_delay_ms > 0:
            time.sleep(self.link.base_delay_ms / 1000.0)
        view = memoryview(data)
        chunk_size = 65536
        for off in range(0, len(view), chunk_size):
            chunk = view[off : off + chunk_size]
            self.bucket.acquire(len(chunk))
            sock.sendall(chunk)
