"""Frame producers: synthetic test-pattern generators and PPM file playback.

Synthetic frames carry a machine-readable signature block in the top-left
64x16 pixels: the first 64x8 strip encodes the sequence number as 32 binary
cells of 2x8 pixels (white=1, black=0, most significant bit first), and the
second 64x8 strip encodes the channel id the same way. The block survives
nearest-neighbor rescaling, which makes every composited tile verifiable
end to end: decode the block, compare against the frame's provenance.
"""

from __future__ import annotations

import colorsys
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import DimensionsTooSmall, FileUnreadable, UndecodableRegion
from .timebase import Timebase

SIG_W = 64  # signature block width in source pixels
SIG_H = 16  # two 8-px strips: seq on top, channel below
SIG_BITS = 32
CELL_W = SIG_W // SIG_BITS

WHITE_MIN = 192  # per-pixel luma thresholds for bit classification
BLACK_MAX = 64


@dataclass(frozen=True)
class Frame:
    """One captured image from one channel. Pixels are packed RGB8, row-major."""

    channel: int
    seq: int
    capture_ts: int  # microseconds since stream epoch
    width: int
    height: int
    pixels: bytes

    def as_array(self) -> np.ndarray:
        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(
            self.height, self.width, 3
        )


@dataclass(frozen=True)
class SourceSpec:
    channel: int
    kind: str = "synthetic"  # "synthetic" | "file"
    frame_rate: float = 30.0
    width: int = 320
    height: int = 240
    path: str | None = None
    # Fractional clock skew relative to the host clock. Real capture devices
    # run on their own oscillators, so their frame cadence is never phase
    # locked to the compositor tick; benches rely on this to decorrelate
    # sampling phase. 0.02 means the device runs 2% fast.
    clock_skew: float = 0.0

    def __post_init__(self) -> None:
        if self.frame_rate <= 0:
            raise ValueError(f"frame_rate {self.frame_rate} must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"dimensions {self.width}x{self.height} must be positive")
        if self.kind not in ("synthetic", "file"):
            raise ValueError(f"unknown source kind {self.kind!r}")


def channel_background(channel: int) -> tuple[int, int, int]:
    """Mid-tone background color, hue spread by golden-ratio steps per channel."""
    hue = (channel * 0.381966) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.55, 0.45)
    return int(r * 255), int(g * 255), int(b * 255)


_BIT_SHIFTS = np.arange(SIG_BITS - 1, -1, -1, dtype=np.uint32)


def _write_bits(canvas: np.ndarray, row0: int, value: int) -> None:
    bits = ((value >> _BIT_SHIFTS) & 1).astype(np.uint8) * 255
    canvas[row0 : row0 + 8, :SIG_W] = np.repeat(bits, CELL_W)[None, :, None]


def synthetic_frame(channel: int, seq: int, width: int, height: int) -> Frame:
    """Deterministic test frame; pure function of (channel, seq, width, height).

    capture_ts is left at 0 here; the running source stamps it at emission.
    """
    if width < SIG_W or height < SIG_H:
        raise DimensionsTooSmall(
            f"{width}x{height} below signature minimum {SIG_W}x{SIG_H}"
        )
    canvas = np.empty((height, width, 3), dtype=np.uint8)
    canvas[:, :] = channel_background(channel)
    _write_bits(canvas, 0, seq & 0xFFFFFFFF)
    _write_bits(canvas, 8, channel & 0xFFFFFFFF)
    return Frame(
        channel=channel,
        seq=seq,
        capture_ts=0,
        width=width,
        height=height,
        pixels=canvas.tobytes(),
    )


def _decode_strip(strip: np.ndarray) -> int:
    """Majority-vote bit decoding over proportional cells of one strip."""
    h, w = strip.shape[:2]
    luma = strip.astype(np.uint16).sum(axis=2) // 3
    value = 0
    for i in range(SIG_BITS):
        x0 = i * w // SIG_BITS
        x1 = max((i + 1) * w // SIG_BITS, x0 + 1)
        cell = luma[:, x0:x1]
        whites = int((cell >= WHITE_MIN).sum())
        blacks = int((cell <= BLACK_MAX).sum())
        if whites + blacks < cell.size // 2 or whites == blacks:
            raise UndecodableRegion(f"bit cell {i} not saturated black/white")
        value = (value << 1) | (1 if whites > blacks else 0)
    return value


def decode_signature(region: np.ndarray) -> tuple[int, int]:
    """Recover (channel, seq) from a signature block.

    The region must be the 64x16 block, possibly rescaled; each bit is
    majority-voted over its proportional cell, so integer upscales and
    aligned box-filter downscales both decode exactly.
    """
    if region.ndim != 3 or region.shape[2] != 3:
        raise UndecodableRegion("expected an RGB region")
    h, w = region.shape[:2]
    if h < 2 or w < SIG_BITS:
        raise UndecodableRegion(f"region {w}x{h} too small for {SIG_BITS} bit cells")
    seq = _decode_strip(region[: h // 2])
    channel = _decode_strip(region[h // 2 : 2 * (h // 2)])
    return channel, seq


def decode_scaled_tile(
    tile: np.ndarray, src_width: int, src_height: int
) -> tuple[int, int]:
    """Decode the signature from a tile nearest-neighbor-scaled from src dims.

    Used by verifying clients: the tile is a whole source frame rescaled to a
    board rectangle, so the signature occupies the top-left portion mapped
    through the same integer sampling the compositor uses.
    """
    th, tw = tile.shape[:2]
    # Destination extent whose source samples fall inside the signature block.
    sig_w = sum(1 for x in range(tw) if x * src_width // tw < SIG_W)
    sig_h = sum(1 for y in range(th) if y * src_height // th < SIG_H)
    if sig_w < SIG_BITS or sig_h < 2:
        raise UndecodableRegion(
            f"scaled signature {sig_w}x{sig_h} too coarse to carry {SIG_BITS} bits"
        )
    region = tile[:sig_h, :sig_w]
    h = region.shape[0]
    luma = region.astype(np.uint16).sum(axis=2) // 3
    # Rows whose source row lands in the top (seq) vs bottom (channel) strip.
    src_rows = np.arange(sig_h) * src_height // th
    seq_rows = luma[src_rows < 8]
    chan_rows = luma[(src_rows >= 8) & (src_rows < SIG_H)]
    src_cols = np.arange(sig_w) * src_width // tw

    def vote(rows: np.ndarray) -> int:
        if rows.size == 0:
            raise UndecodableRegion("strip vanished under scaling")
        value = 0
        for i in range(SIG_BITS):
            cell = rows[:, (src_cols // CELL_W) == i]
            whites = int((cell >= WHITE_MIN).sum())
            blacks = int((cell <= BLACK_MAX).sum())
            if whites + blacks == 0 or whites == blacks:
                raise UndecodableRegion(f"bit cell {i} empty after scaling")
            value = (value << 1) | (1 if whites > blacks else 0)
        return value

    return vote(chan_rows), vote(seq_rows)


# ---------------------------------------------------------------------------
# PPM (P6) file sources


def load_ppm(path: str | Path) -> tuple[int, int, bytes]:
    """Parse a binary P6 PPM with 8-bit samples. Returns (width, height, rgb)."""
    data = Path(path).read_bytes()
    # Header: magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments allowed between them.
    pos = 0
    tokens: list[bytes] = []
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*([^\s#]+)").match(data, pos)
        if not m:
            raise FileUnreadable(f"{path}: truncated PPM header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != b"P6":
        raise FileUnreadable(f"{path}: not a binary P6 PPM")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FileUnreadable(f"{path}: only 8-bit PPMs supported (maxval {maxval})")
    pos += 1  # single whitespace byte after maxval
    raster = data[pos : pos + width * height * 3]
    if len(raster) != width * height * 3:
        raise FileUnreadable(f"{path}: raster shorter than {width}x{height}x3")
    return width, height, raster


def write_ppm(path: str | Path, width: int, height: int, pixels: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (width, height))
        fh.write(pixels)


def load_frame_dir(path: str | Path) -> list[tuple[int, int, bytes]]:
    """Numbered .ppm files in a directory, sorted numerically then lexically."""
    directory = Path(path)
    if not directory.is_dir():
        raise FileUnreadable(f"{directory} is not a directory")

    def sort_key(p: Path) -> tuple[int, str]:
        m = re.search(r"(\d+)", p.stem)
        return (int(m.group(1)) if m else 0, p.name)

    files = sorted(directory.glob("*.ppm"), key=sort_key)
    if not files:
        raise FileUnreadable(f"no .ppm files in {directory}")
    return [load_ppm(f) for f in files]


# ---------------------------------------------------------------------------
# Running sources


class SourceHandle:
    """Stop/join handle for one running source thread."""

    def __init__(self, thread: threading.Thread, stop_event: threading.Event):
        self._thread = thread
        self._stop = stop_event

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=5.0)

    @property
    def running(self) -> bool:
        return self._thread.is_alive()


def run_source(
    spec: SourceSpec,
    sink: Callable[[Frame], None],
    timebase: Timebase,
    *,
    name: str | None = None,
) -> SourceHandle:
    """Emit frames at spec.frame_rate until stopped.

    Emission uses absolute deadlines on the monotonic clock so cadence does
    not drift; capture_ts is stamped at emission time. File sources loop
    their frame list. Exceptions from the sink stop the source cleanly.
    """
    frames: list[tuple[int, int, bytes]] | None = None
    if spec.kind == "file":
        frames = load_frame_dir(spec.path or "")

    stop = threading.Event()
    period = 1.0 / (spec.frame_rate * (1.0 + spec.clock_skew))

    def pump() -> None:
        start = time.monotonic()
        seq = 0
        while not stop.is_set():
            deadline = start + seq * period
            delay = deadline - time.monotonic()
            if delay > 0 and stop.wait(delay):
                break
            ts = timebase.now_us()
            if frames is not None:
                w, h, rgb = frames[seq % len(frames)]
                frame = Frame(spec.channel, seq, ts, w, h, rgb)
            else:
                base = synthetic_frame(spec.channel, seq, spec.width, spec.height)
                frame = Frame(spec.channel, seq, ts, base.width, base.height, base.pixels)
            try:
                sink(frame)
            except Exception:
                break  # sink closed; stop quietly
            seq += 1

    thread = threading.Thread(
        target=pump, name=name or f"source-{spec.channel}", daemon=True
    )
    thread.start()
    return SourceHandle(thread, stop)


def parse_sources_arg(text: str) -> list[SourceSpec]:
    """CLI shorthand: ``synthetic:<count>`` or ``file:<dir>@<fps>``.

    Multiple clauses may be comma-separated; file sources are assigned
    channel ids after any synthetic block.
    """
    specs: list[SourceSpec] = []
    next_channel = 0
    for clause in text.split(","):
        clause = clause.strip()
        if clause.startswith("synthetic:"):
            count = int(clause.split(":", 1)[1])
            for _ in range(count):
                specs.append(SourceSpec(channel=next_channel, kind="synthetic"))
                next_channel += 1
        elif clause.startswith("file:"):
            rest = clause.split(":", 1)[1]
            fps = 30.0
            if "@" in rest:
                rest, fps_text = rest.rsplit("@", 1)
                fps = float(fps_text)
            specs.append(
                SourceSpec(channel=next_channel, kind="file", path=rest, frame_rate=fps)
            )
            next_channel += 1
        else:
            raise ValueError(f"unrecognized sources clause {clause!r}")
    return specs
