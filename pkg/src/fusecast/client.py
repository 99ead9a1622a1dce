"""Client-side pieces: FUSE/1 stream subscriber, control channel, verification.

A subscriber on the same host shares the server's monotonic clock domain;
it converts its own clock into stream time using the epoch from the stream
hello, so latency subtraction never crosses clocks.
"""

from __future__ import annotations

import json
import socket
import threading
import uuid
from dataclasses import dataclass, field
from typing import Any, Iterator

import numpy as np

from . import wire
from .errors import AckTimeout, WireFormatError
from .source import decode_scaled_tile
from .timebase import monotonic_us


@dataclass
class ReceivedFrame:
    frame: wire.WireFrame
    arrival_ts: int  # microseconds in the stream's clock domain
    wire_bytes: int


class StreamSubscriber:
    """Blocking FUSE/1 frame reader."""

    def __init__(self, host: str, port: int, pixel_format: int = wire.PIXEL_RAW,
                 connect_timeout: float = 5.0):
        self.sock = socket.create_connection((host, port), timeout=connect_timeout)
        self.sock.settimeout(10.0)
        self.sock.sendall(wire.encode_subscribe(pixel_format))
        self._rfile = self.sock.makefile("rb")
        msg_type = wire.read_preamble(self._rfile)
        if msg_type != wire.MSG_HELLO:
            raise WireFormatError(f"expected stream hello, got type 0x{msg_type:02x}")
        self.hello = wire.read_hello_body(self._rfile)

    def now_stream_us(self) -> int:
        return monotonic_us() - self.hello.epoch_us

    def read_frame(self) -> ReceivedFrame:
        msg_type = wire.read_preamble(self._rfile)
        if msg_type != wire.MSG_FRAME:
            raise WireFormatError(f"expected frame, got type 0x{msg_type:02x}")
        frame = wire.read_frame_body(self._rfile)
        return ReceivedFrame(
            frame=frame,
            arrival_ts=self.now_stream_us(),
            wire_bytes=wire.frame_wire_len(len(frame.channels), len(frame.payload)),
        )

    def frames(self) -> Iterator[ReceivedFrame]:
        while True:
            try:
                yield self.read_frame()
            except (WireFormatError, OSError):
                return

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class ControlChannel:
    """NDJSON control session over FUSE/1. One request in flight at a time."""

    def __init__(self, host: str, port: int, token: str | None = None,
                 connect_timeout: float = 5.0):
        self.sock = socket.create_connection((host, port), timeout=connect_timeout)
        self.sock.settimeout(10.0)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock.sendall(wire.encode_control_preamble())
        self._rfile = self.sock.makefile("rb")
        self._lock = threading.Lock()
        self._counter = 0
        if token is not None:
            self.request({"type": "hello", "token": token})

    def _next_id(self) -> str:
        self._counter += 1
        return f"c-{uuid.uuid4().hex[:8]}-{self._counter}"

    def request(self, msg: dict[str, Any], timeout: float = 5.0) -> dict[str, Any]:
        with self._lock:
            if "id" not in msg:
                msg = {**msg, "id": self._next_id()}
            self.sock.settimeout(timeout)
            self.sock.sendall(json.dumps(msg).encode() + b"\n")
            line = self._rfile.readline()
            if not line:
                raise AckTimeout("control connection closed before response")
            return json.loads(line)

    def ping_rtt_us(self, samples: int = 5) -> int:
        """Median request round-trip over the control channel."""
        rtts = []
        for _ in range(samples):
            t0 = monotonic_us()
            self.request({"type": "ping"})
            rtts.append(monotonic_us() - t0)
        rtts.sort()
        return rtts[len(rtts) // 2]

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


@dataclass
class VerifyResult:
    frames_checked: int = 0
    tiles_checked: int = 0
    tiles_ok: int = 0
    mismatches: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.tiles_checked > 0 and self.tiles_ok == self.tiles_checked


def verify_frame(frame: wire.WireFrame, result: VerifyResult) -> None:
    """Decode every tile's signature and compare with the frame's provenance."""
    if frame.pixel_format != wire.PIXEL_RAW:
        raise WireFormatError("verification requires the raw pixel format")
    image = np.frombuffer(frame.payload, dtype=np.uint8).reshape(
        frame.height, frame.width, 3
    )
    result.frames_checked += 1
    for desc in frame.channels:
        x, y, w, h = desc.rect
        tile = image[y : y + h, x : x + w]
        result.tiles_checked += 1
        try:
            channel, seq = decode_scaled_tile(tile, desc.src_width, desc.src_height)
        except Exception as exc:
            result.mismatches.append(
                f"frame {frame.frame_seq} ch {desc.channel}: undecodable ({exc})"
            )
            continue
        if channel == desc.channel and seq == desc.source_seq:
            result.tiles_ok += 1
        else:
            result.mismatches.append(
                f"frame {frame.frame_seq}: tile decoded ({channel}, {seq}), "
                f"provenance says ({desc.channel}, {desc.source_seq})"
            )
