"""Canvas compositing: fuse every channel's latest frame into one image.

The compositor keeps one last-value register per channel (sample latest,
never queue), and at each tick produces a FusedFrame: the video region
holds every visible board's frame scaled nearest-neighbor into its
rectangle, and a status strip along the bottom renders the interaction
overlay (selection highlight, staleness markers, channel indices).

Compositing is a single precomputed gather: register frames live in one
slot buffer, and a flat index array maps every output pixel of the video
region to its source pixel. The index is rebuilt only when the layout,
liveness, or source dimensions change, so per-tick cost is proportional
to canvas pixels and independent of the channel count.
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .errors import InvalidLayout, UnknownChannel
from .scene import SceneConfig
from .source import Frame
from .timebase import Timebase

Rect = tuple[int, int, int, int]  # x, y, w, h in canvas pixels

BG_COLOR = (16, 16, 20)
PLACEHOLDER_COLOR = (34, 34, 40)
OVERLAY_BG = (28, 28, 32)
CELL_FILL = (48, 48, 54)
CELL_HIDDEN = (38, 38, 42)
CELL_BORDER = (90, 90, 96)
SELECTED_FILL = (70, 130, 220)
STALE_MARK = (204, 60, 60)

DEFAULT_STALL_TIMEOUT_S = 5.0


def grid_layout(n: int, canvas_w: int, canvas_h: int, overlay_height: int) -> list[Rect]:
    """Tile rectangles for n boards in the video region.

    cols = ceil(sqrt(n)), rows = ceil(n/cols); tiles fill left-to-right,
    top-to-bottom; each tile is floor(canvas_w/cols) x floor(region_h/rows).
    """
    if n <= 0:
        return []
    region_h = canvas_h - overlay_height
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    tw = canvas_w // cols
    th = region_h // rows
    return [((i % cols) * tw, (i // cols) * th, tw, th) for i in range(n)]


@dataclass(frozen=True)
class DisplayBoard:
    channel: int
    rect: Rect
    visible: bool = True


@dataclass(frozen=True)
class ControlGroup:
    channel: int
    selected: bool = False
    stale: bool = False


@dataclass(frozen=True)
class CanvasLayout:
    """Board arrangement for the video region.

    In focus mode exactly one visible board covers the full region; in grid
    mode every shown board gets a tile.
    """

    mode: str  # "grid" | "focus"
    boards: tuple[DisplayBoard, ...]
    overlay_height: int
    focus_channel: int | None = None


@dataclass(frozen=True)
class ChannelProvenance:
    channel: int
    source_seq: int
    capture_ts: int
    rect: Rect
    src_width: int
    src_height: int


@dataclass(frozen=True)
class FusedFrame:
    """One composited output image plus per-channel provenance."""

    frame_seq: int
    composite_ts: int
    width: int
    height: int
    pixels: bytes
    channels: tuple[ChannelProvenance, ...]

    def as_array(self) -> np.ndarray:
        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(
            self.height, self.width, 3
        )


class _Register:
    """Last-value register for one channel. Pixel data lives in the slot buffer."""

    __slots__ = ("slot", "seq", "capture_ts", "width", "height", "period_us", "has_data")

    def __init__(self, slot: int):
        self.slot = slot
        self.seq = -1
        self.capture_ts = 0
        self.width = 0
        self.height = 0
        self.period_us = 0.0
        self.has_data = False


class Compositor:
    """Ingest frames per channel; capture them into FusedFrames at tick time.

    ingest() may be called concurrently from many producer threads; capture()
    and layout changes are serialized on one internal lock. Layout changes
    requested between ticks take effect at the next capture.
    """

    def __init__(
        self,
        scene: SceneConfig,
        timebase: Timebase,
        *,
        stall_timeout_s: float = DEFAULT_STALL_TIMEOUT_S,
    ):
        self.scene = scene
        self.timebase = timebase
        self.stall_timeout_us = int(stall_timeout_s * 1e6)
        self.width = scene.canvas_width
        self.height = scene.canvas_height
        self.overlay_height = scene.overlay_height
        self.region_h = self.height - self.overlay_height

        self._lock = threading.Lock()
        self._channels = scene.board_channels()
        self._registers = {cid: _Register(slot) for slot, cid in enumerate(self._channels)}
        self._visible = {cid: True for cid in self._channels}
        self._group_channels = scene.group_channels()
        self._mode = "grid"
        self._focus: int | None = None
        self._selected: int | None = None
        self._pending: list[tuple[str, Any]] = []
        self._next_seq = 0
        self._unknown_drops = 0

        # Slot buffer: one slot per channel plus background and placeholder.
        self._slot_h = 1
        self._slot_w = 1
        self._bg_slot = len(self._channels)
        self._ph_slot = len(self._channels) + 1
        self._buf = np.zeros((len(self._channels) + 2, 1, 1, 3), np.uint8)
        self._buf[self._bg_slot] = BG_COLOR
        self._buf[self._ph_slot] = PLACEHOLDER_COLOR

        self._canvas = np.empty((self.height, self.width, 3), np.uint8)
        self._idx: np.ndarray | None = None
        self._idx_key: tuple | None = None
        self._overlay: np.ndarray | None = None
        self._overlay_key: tuple | None = None

        self._latest: FusedFrame | None = None
        self._composite_ns_total = 0
        self._composite_count = 0

    # -- ingest ------------------------------------------------------------

    def ingest(self, frame: Frame) -> None:
        """Store the frame in its channel register if newer; drop otherwise."""
        with self._lock:
            reg = self._registers.get(frame.channel)
            if reg is None:
                self._unknown_drops += 1
                raise UnknownChannel(f"no board for channel {frame.channel}")
            if frame.seq <= reg.seq:
                return
            if frame.height > self._slot_h or frame.width > self._slot_w:
                self._grow_slots(frame.height, frame.width)
            self._buf[reg.slot, : frame.height, : frame.width] = frame.as_array()
            if reg.has_data:
                delta = frame.capture_ts - reg.capture_ts
                reg.period_us = delta if reg.period_us == 0 else 0.7 * reg.period_us + 0.3 * delta
            reg.seq = frame.seq
            reg.capture_ts = frame.capture_ts
            reg.width = frame.width
            reg.height = frame.height
            reg.has_data = True

    def _grow_slots(self, min_h: int, min_w: int) -> None:
        new_h = max(self._slot_h, min_h)
        new_w = max(self._slot_w, min_w)
        buf = np.zeros((self._buf.shape[0], new_h, new_w, 3), np.uint8)
        buf[self._bg_slot] = BG_COLOR
        buf[self._ph_slot] = PLACEHOLDER_COLOR
        for reg in self._registers.values():
            if reg.has_data:
                buf[reg.slot, : reg.height, : reg.width] = self._buf[
                    reg.slot, : reg.height, : reg.width
                ]
        self._buf = buf
        self._slot_h, self._slot_w = new_h, new_w
        self._idx_key = None

    @property
    def unknown_drops(self) -> int:
        return self._unknown_drops

    def register_view(self, channel: int) -> tuple[int, int] | None:
        """(seq, capture_ts) of a channel's register, or None if empty."""
        with self._lock:
            reg = self._registers.get(channel)
            if reg is None or not reg.has_data:
                return None
            return reg.seq, reg.capture_ts

    # -- layout / control ---------------------------------------------------

    def current_layout(self) -> CanvasLayout:
        with self._lock:
            return self._layout_locked()

    def _layout_locked(self) -> CanvasLayout:
        if self._mode == "focus" and self._focus is not None:
            boards = (
                DisplayBoard(self._focus, (0, 0, self.width, self.region_h), True),
            )
            return CanvasLayout("focus", boards, self.overlay_height, self._focus)
        shown = [cid for cid in self._channels if self._visible[cid]]
        rects = grid_layout(len(shown), self.width, self.height, self.overlay_height)
        boards = tuple(
            DisplayBoard(cid, rect, True) for cid, rect in zip(shown, rects)
        )
        return CanvasLayout("grid", boards, self.overlay_height)

    def apply_layout(self, layout: CanvasLayout) -> int:
        """Queue a layout for the next tick; returns the first reflecting frame_seq."""
        if layout.mode == "focus":
            if layout.focus_channel is None or layout.focus_channel not in self._registers:
                raise InvalidLayout(f"focus channel {layout.focus_channel} has no board")
        elif layout.mode != "grid":
            raise InvalidLayout(f"unknown layout mode {layout.mode!r}")
        with self._lock:
            self._pending.append(("layout", layout))
            return self._next_seq

    def set_focus(self, channel: int) -> int:
        if channel not in self._registers:
            raise UnknownChannel(f"no board for channel {channel}")
        with self._lock:
            self._pending.append(("focus", channel))
            return self._next_seq

    def set_grid(self) -> int:
        with self._lock:
            self._pending.append(("grid", None))
            return self._next_seq

    def select(self, channel: int) -> int:
        """Mark the channel selected and focus it."""
        if channel not in self._registers:
            raise UnknownChannel(f"no board for channel {channel}")
        with self._lock:
            self._pending.append(("select", channel))
            return self._next_seq

    def toggle_visibility(self, channel: int) -> int:
        if channel not in self._registers:
            raise UnknownChannel(f"no board for channel {channel}")
        with self._lock:
            self._pending.append(("toggle", channel))
            return self._next_seq

    def _apply_pending_locked(self) -> None:
        for op, arg in self._pending:
            if op == "focus" or op == "select":
                self._mode = "focus"
                self._focus = arg
                if op == "select":
                    self._selected = arg
            elif op == "grid":
                self._mode = "grid"
                self._focus = None
            elif op == "toggle":
                self._visible[arg] = not self._visible[arg]
                if self._mode == "focus" and self._focus == arg and not self._visible[arg]:
                    self._mode = "grid"  # focused board hidden: degrade to grid
                    self._focus = None
            elif op == "layout":
                layout: CanvasLayout = arg
                self._mode = layout.mode
                self._focus = layout.focus_channel if layout.mode == "focus" else None
        self._pending.clear()

    # -- capture -------------------------------------------------------------

    def capture(self, tick_ts: int | None = None) -> FusedFrame:
        """Compose the current registers into a FusedFrame.

        Never blocks on sources: empty or stalled registers render the
        placeholder and are left out of the provenance list.
        """
        # Thread CPU time: composite cost excluding scheduler/GIL interference
        # from producer threads, which scales with source count and would
        # otherwise masquerade as compositing work.
        t0 = time.thread_time_ns()
        with self._lock:
            seq = self._next_seq
            self._next_seq += 1
            self._apply_pending_locked()
            layout = self._layout_locked()
            now = self.timebase.now_us()
            composite_ts = now if tick_ts is None else max(tick_ts, now)

            provenance: list[ChannelProvenance] = []
            board_states: list[tuple[DisplayBoard, _Register, bool]] = []
            stale_set: set[int] = set()
            for board in layout.boards:
                reg = self._registers[board.channel]
                age = now - reg.capture_ts
                live = reg.has_data and age <= self.stall_timeout_us
                if reg.has_data and reg.period_us > 0 and age > 2 * reg.period_us:
                    stale_set.add(board.channel)
                board_states.append((board, reg, live))
                if live:
                    provenance.append(
                        ChannelProvenance(
                            channel=board.channel,
                            source_seq=reg.seq,
                            capture_ts=reg.capture_ts,
                            rect=board.rect,
                            src_width=reg.width,
                            src_height=reg.height,
                        )
                    )

            self._compose_region(board_states)
            self._compose_overlay(stale_set)

            frame = FusedFrame(
                frame_seq=seq,
                composite_ts=composite_ts,
                width=self.width,
                height=self.height,
                pixels=self._canvas.tobytes(),
                channels=tuple(provenance),
            )
            self._latest = frame
        self._composite_ns_total += time.thread_time_ns() - t0
        self._composite_count += 1
        return frame

    def _compose_region(self, board_states: list[tuple[DisplayBoard, _Register, bool]]) -> None:
        if self.region_h <= 0:
            return
        key = (
            self._slot_h,
            self._slot_w,
            tuple(
                (b.channel, b.rect, live, reg.width, reg.height)
                for b, reg, live in board_states
            ),
        )
        if key != self._idx_key:
            self._idx = self._build_index(board_states)
            self._idx_key = key
        np.take(self._buf.reshape(-1, 3), self._idx, axis=0, out=self._canvas[: self.region_h])

    def _build_index(
        self, board_states: list[tuple[DisplayBoard, _Register, bool]]
    ) -> np.ndarray:
        sh, sw = self._slot_h, self._slot_w
        idx = np.full(
            (self.region_h, self.width), self._bg_slot * sh * sw, dtype=np.intp
        )
        for board, reg, live in board_states:
            x, y, tw, th = board.rect
            if tw <= 0 or th <= 0:
                continue
            if not live:
                idx[y : y + th, x : x + tw] = self._ph_slot * sh * sw
                continue
            yi = np.arange(th, dtype=np.intp) * reg.height // th
            xi = np.arange(tw, dtype=np.intp) * reg.width // tw
            idx[y : y + th, x : x + tw] = (reg.slot * sh + yi[:, None]) * sw + xi[None, :]
        return idx

    def _compose_overlay(self, stale_set: set[int]) -> None:
        ov = self.overlay_height
        if ov <= 0:
            return
        key = (
            tuple(self._group_channels),
            self._selected,
            tuple(sorted(stale_set)),
            tuple(sorted(c for c in self._channels if not self._visible[c])),
        )
        if key != self._overlay_key:
            self._overlay = self._render_overlay(stale_set)
            self._overlay_key = key
        self._canvas[self.region_h :] = self._overlay

    def _render_overlay(self, stale_set: set[int]) -> np.ndarray:
        ov = self.overlay_height
        strip = np.empty((ov, self.width, 3), np.uint8)
        strip[:, :] = OVERLAY_BG
        groups = self._group_channels
        if not groups:
            return strip
        cell_w = min(96, self.width // len(groups))
        if cell_w < 4:
            return strip
        pad = 2 if ov >= 8 else 0
        for i, cid in enumerate(groups):
            x0 = i * cell_w
            cell = strip[pad : ov - pad, x0 + pad : x0 + cell_w - pad]
            if self._selected == cid:
                cell[:, :] = SELECTED_FILL
            elif not self._visible.get(cid, True):
                cell[:, :] = CELL_HIDDEN
            else:
                cell[:, :] = CELL_FILL
            cell[0, :] = CELL_BORDER
            cell[-1, :] = CELL_BORDER
            cell[:, 0] = CELL_BORDER
            cell[:, -1] = CELL_BORDER
            ch, cw = cell.shape[:2]
            if cid in stale_set and ch >= 6 and cw >= 6:
                m = min(8, ch // 3, cw // 3)
                cell[1 : 1 + m, cw - 1 - m : cw - 1] = STALE_MARK
            # Channel index as an 8-bit strip along the cell bottom.
            if ch >= 10 and cw >= 18:
                bit_w = (cw - 2) // 8
                bit_h = min(4, ch // 4)
                for b in range(8):
                    on = (cid >> (7 - b)) & 1
                    cell[ch - 1 - bit_h : ch - 1, 1 + b * bit_w : 1 + (b + 1) * bit_w] = (
                        255 if on else 0
                    )
        return strip

    # -- introspection -------------------------------------------------------

    @property
    def next_frame_seq(self) -> int:
        with self._lock:
            return self._next_seq

    @property
    def latest_frame(self) -> FusedFrame | None:
        return self._latest

    def status(self) -> dict[str, Any]:
        """Mode/selection/staleness snapshot for /meta and logs."""
        with self._lock:
            now = self.timebase.now_us()
            stale = []
            for cid in self._channels:
                reg = self._registers[cid]
                if reg.has_data and reg.period_us > 0 and (now - reg.capture_ts) > 2 * reg.period_us:
                    stale.append(cid)
            return {
                "mode": self._mode,
                "focus": self._focus,
                "selected": self._selected,
                "hidden": sorted(c for c in self._channels if not self._visible[c]),
                "stale": stale,
            }

    def composite_stats(self, reset: bool = False) -> tuple[int, float]:
        """(tick count, mean composite time in microseconds) since last reset."""
        count = self._composite_count
        mean_us = (self._composite_ns_total / count / 1000.0) if count else 0.0
        if reset:
            self._composite_count = 0
            self._composite_ns_total = 0
        return count, mean_us


class CompositorLoop:
    """Drives capture() at the scene tick rate and hands frames to a consumer."""

    def __init__(
        self,
        compositor: Compositor,
        consumer: Callable[[FusedFrame], None],
        tick_rate: float | None = None,
    ):
        self.compositor = compositor
        self.consumer = consumer
        self.tick_rate = tick_rate or compositor.scene.tick_rate
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self.tick_count = 0
        self.late_ticks = 0

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, name="compositor-tick", daemon=True)
        self._thread.start()

    def _run(self) -> None:
        period = 1.0 / self.tick_rate
        start = time.monotonic()
        k = 0
        while not self._stop.is_set():
            deadline = start + k * period
            delay = deadline - time.monotonic()
            if delay > 0:
                if self._stop.wait(delay):
                    break
            elif delay < -period:
                self.late_ticks += 1
            frame = self.compositor.capture(self.compositor.timebase.now_us())
            self.tick_count += 1
            try:
                self.consumer(frame)
            except Exception:
                break
            k += 1

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5.0)
