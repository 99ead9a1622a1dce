"""FUSE/1 framed byte protocol.

Every message starts with the 5-byte preamble ``FUS1`` + type byte. Types:

* 0x00 stream hello (server to client): epoch + canvas geometry, sent once
  before the first frame so clients can join the server's clock domain.
* 0x01 fused frame: fixed header, per-channel descriptors, payload.
* 0x02 subscribe (client to server): requested pixel format.
* 0x03 control session (client to server): after this preamble the
  connection speaks newline-delimited JSON in both directions.

All integers are little-endian. The frame header is 25 bytes, each channel
descriptor 30 bytes, followed by a 4-byte payload length; a raw payload is
width*height*3 bytes of packed RGB rows, a JPEG payload is the encoded
image. The layout is bit-exact and versioned by the preamble.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import BinaryIO

from PIL import Image

from .compositor import ChannelProvenance, FusedFrame
from .errors import EncodeFailure, WireFormatError

PREAMBLE = b"FUS1"
MSG_HELLO = 0x00
MSG_FRAME = 0x01
MSG_SUBSCRIBE = 0x02
MSG_CONTROL = 0x03

PIXEL_RAW = 0
PIXEL_JPEG = 1

_FIXED = struct.Struct("<QQHHBH2x")  # seq, composite_ts, w, h, fmt, count + reserved
_DESC = struct.Struct("<HQQHHHHHH")  # channel, seq, ts, x, y, w, h, src_w, src_h
_PAYLOAD_LEN = struct.Struct("<I")
_HELLO = struct.Struct("<QHHI")  # epoch_us, width, height, tick_rate_millihz

FIXED_HEADER_LEN = _FIXED.size  # 25
DESC_LEN = _DESC.size  # 30

assert FIXED_HEADER_LEN == 25 and DESC_LEN == 30


def header_len(channel_count: int) -> int:
    """Header bytes following the preamble (excludes payload)."""
    return FIXED_HEADER_LEN + DESC_LEN * channel_count + _PAYLOAD_LEN.size


def frame_wire_len(channel_count: int, payload_len: int) -> int:
    return len(PREAMBLE) + 1 + header_len(channel_count) + payload_len


@dataclass(frozen=True)
class Hello:
    epoch_us: int
    width: int
    height: int
    tick_rate: float


@dataclass(frozen=True)
class WireFrame:
    """Decoded frame message: header fields plus raw payload bytes."""

    frame_seq: int
    composite_ts_us: int
    width: int
    height: int
    pixel_format: int
    channels: tuple[ChannelProvenance, ...]
    payload: bytes

    def to_fused(self) -> FusedFrame:
        if self.pixel_format != PIXEL_RAW:
            raise WireFormatError("only raw frames convert losslessly")
        return FusedFrame(
            frame_seq=self.frame_seq,
            composite_ts=self.composite_ts_us,
            width=self.width,
            height=self.height,
            pixels=self.payload,
            channels=self.channels,
        )


def jpeg_encode(width: int, height: int, pixels: bytes, quality: int = 80) -> bytes:
    try:
        img = Image.frombuffer("RGB", (width, height), pixels, "raw", "RGB", 0, 1)
        out = io.BytesIO()
        img.save(out, "JPEG", quality=quality)
        return out.getvalue()
    except Exception as exc:
        raise EncodeFailure(f"JPEG encode failed: {exc}") from exc


def jpeg_decode(data: bytes) -> tuple[int, int, bytes]:
    img = Image.open(io.BytesIO(data)).convert("RGB")
    return img.width, img.height, img.tobytes()


def encode_frame(
    frame: FusedFrame, pixel_format: int = PIXEL_RAW, jpeg_quality: int = 80
) -> bytes:
    """Serialize a fused frame: preamble, header, descriptors, payload."""
    if pixel_format == PIXEL_RAW:
        payload = frame.pixels
    elif pixel_format == PIXEL_JPEG:
        payload = jpeg_encode(frame.width, frame.height, frame.pixels, jpeg_quality)
    else:
        raise WireFormatError(f"unknown pixel format {pixel_format}")
    parts = [
        PREAMBLE,
        bytes([MSG_FRAME]),
        _FIXED.pack(
            frame.frame_seq,
            frame.composite_ts,
            frame.width,
            frame.height,
            pixel_format,
            len(frame.channels),
        ),
    ]
    for ch in frame.channels:
        x, y, w, h = ch.rect
        parts.append(
            _DESC.pack(
                ch.channel,
                ch.source_seq,
                ch.capture_ts,
                x,
                y,
                w,
                h,
                ch.src_width,
                ch.src_height,
            )
        )
    parts.append(_PAYLOAD_LEN.pack(len(payload)))
    parts.append(payload)
    return b"".join(parts)


def encode_hello(epoch_us: int, width: int, height: int, tick_rate: float) -> bytes:
    return (
        PREAMBLE
        + bytes([MSG_HELLO])
        + _HELLO.pack(epoch_us, width, height, int(round(tick_rate * 1000)))
    )


def encode_subscribe(pixel_format: int = PIXEL_RAW) -> bytes:
    return PREAMBLE + bytes([MSG_SUBSCRIBE, pixel_format])


def encode_control_preamble() -> bytes:
    return PREAMBLE + bytes([MSG_CONTROL])


def read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise WireFormatError(f"stream closed mid-message ({len(buf)}/{n} bytes)")
        buf += chunk
    return buf


def read_preamble(stream: BinaryIO) -> int:
    head = read_exact(stream, 5)
    if head[:4] != PREAMBLE:
        raise WireFormatError(f"bad preamble {head[:4]!r}")
    return head[4]


def read_frame_body(stream: BinaryIO) -> WireFrame:
    """Read a frame message body (preamble already consumed)."""
    fixed = read_exact(stream, FIXED_HEADER_LEN)
    frame_seq, composite_ts, width, height, pixel_format, count = _FIXED.unpack(fixed)
    channels = []
    for _ in range(count):
        desc = read_exact(stream, DESC_LEN)
        cid, sseq, cts, x, y, w, h, sw, sh = _DESC.unpack(desc)
        channels.append(ChannelProvenance(cid, sseq, cts, (x, y, w, h), sw, sh))
    (payload_len,) = _PAYLOAD_LEN.unpack(read_exact(stream, _PAYLOAD_LEN.size))
    payload = read_exact(stream, payload_len)
    if pixel_format == PIXEL_RAW and payload_len != width * height * 3:
        raise WireFormatError(
            f"raw payload {payload_len} != {width}x{height}x3"
        )
    return WireFrame(
        frame_seq=frame_seq,
        composite_ts_us=composite_ts,
        width=width,
        height=height,
        pixel_format=pixel_format,
        channels=tuple(channels),
        payload=payload,
    )


def read_hello_body(stream: BinaryIO) -> Hello:
    epoch_us, width, height, tick_millihz = _HELLO.unpack(read_exact(stream, _HELLO.size))
    return Hello(epoch_us, width, height, tick_millihz / 1000.0)


def read_message(stream: BinaryIO) -> tuple[int, Hello | WireFrame | int]:
    """Read one server-to-client or client-to-server message.

    Returns (type, body): Hello for 0x00, WireFrame for 0x01, the requested
    pixel format for 0x02, and 0 for a control-session preamble.
    """
    msg_type = read_preamble(stream)
    if msg_type == MSG_HELLO:
        return msg_type, read_hello_body(stream)
    if msg_type == MSG_FRAME:
        return msg_type, read_frame_body(stream)
    if msg_type == MSG_SUBSCRIBE:
        return msg_type, read_exact(stream, 1)[0]
    if msg_type == MSG_CONTROL:
        return msg_type, 0
    raise WireFormatError(f"unknown message type 0x{msg_type:02x}")
