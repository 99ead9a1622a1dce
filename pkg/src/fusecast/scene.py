"""Channel accounting and scene configuration.

A scene pairs display boards (one per input channel, shown on the video
canvas) with optional interactive control groups (shown on the interaction
overlay). Channel counts follow the additive model: the fused output
carries the sum of board channels and control channels, all captured into
one stream, and a single host supports at most 256 input devices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .errors import (
    BadDimensions,
    CapacityExceeded,
    DanglingControlGroup,
    DuplicateChannel,
)

MAX_CHANNELS = 256  # USB device bound: channel ids 0..255

DEFAULT_CANVAS_W = 1280
DEFAULT_CANVAS_H = 720
DEFAULT_TICK_RATE = 30.0
DEFAULT_OVERLAY_HEIGHT = 72


@dataclass(frozen=True)
class DisplayBoardSpec:
    """One channel's slot on the video canvas."""

    channel_id: int
    enabled: bool = True


@dataclass(frozen=True)
class ControlGroupSpec:
    """Interactive counterpart paired with a board of the same channel."""

    channel_id: int
    enabled: bool = True


@dataclass(frozen=True)
class ChannelCount:
    non_interactive: int
    interactive: int
    total: int


@dataclass(frozen=True)
class SceneConfig:
    """Validated scene description. Immutable; safe to share across threads."""

    boards: tuple[DisplayBoardSpec, ...]
    control_groups: tuple[ControlGroupSpec, ...]
    canvas_width: int = DEFAULT_CANVAS_W
    canvas_height: int = DEFAULT_CANVAS_H
    tick_rate: float = DEFAULT_TICK_RATE
    overlay_height: int = DEFAULT_OVERLAY_HEIGHT

    def board_channels(self) -> list[int]:
        return sorted(b.channel_id for b in self.boards if b.enabled)

    def group_channels(self) -> list[int]:
        return sorted(g.channel_id for g in self.control_groups if g.enabled)


def count_noninteractive(config: SceneConfig) -> int:
    """Number of enabled display boards (each device contributes 0 or 1)."""
    return sum(1 for b in config.boards if b.enabled)


def count_interactive(config: SceneConfig) -> int:
    return sum(1 for g in config.control_groups if g.enabled)


def count_total_channels(config: SceneConfig) -> ChannelCount:
    """Board channels plus control channels, as captured into the fused stream.

    The main capture step wraps both canvas sums and contributes no count
    of its own.
    """
    rho = count_noninteractive(config)
    beta = count_interactive(config)
    return ChannelCount(non_interactive=rho, interactive=beta, total=rho + beta)


def validate_config(raw: dict[str, Any]) -> SceneConfig:
    """Build a SceneConfig from an untrusted scene description.

    Expected shape::

        {"canvas": {"width": 1280, "height": 720},
         "tick_rate": 30,
         "overlay_height": 72,
         "channels": [{"id": 0, "board": true, "control_group": true}, ...]}

    Raises CapacityExceeded, DanglingControlGroup, DuplicateChannel or
    BadDimensions. A control group whose channel has no board entry is
    rejected even if that board is disabled: toggling must not renumber
    channels, so the pairing is by declared slot, not current visibility.
    """
    canvas = raw.get("canvas", {})
    width = int(canvas.get("width", DEFAULT_CANVAS_W))
    height = int(canvas.get("height", DEFAULT_CANVAS_H))
    tick_rate = float(raw.get("tick_rate", DEFAULT_TICK_RATE))
    overlay_height = int(raw.get("overlay_height", DEFAULT_OVERLAY_HEIGHT))
    if width <= 0 or height <= 0:
        raise BadDimensions(f"canvas {width}x{height} must be positive")
    if tick_rate <= 0:
        raise BadDimensions(f"tick_rate {tick_rate} must be positive")
    if not 0 <= overlay_height < height:
        raise BadDimensions(
            f"overlay_height {overlay_height} must fit inside canvas height {height}"
        )

    boards: list[DisplayBoardSpec] = []
    groups: list[ControlGroupSpec] = []
    seen: set[int] = set()
    for entry in raw.get("channels", []):
        cid = int(entry["id"])
        if not 0 <= cid < MAX_CHANNELS:
            raise CapacityExceeded(f"channel id {cid} outside [0, {MAX_CHANNELS - 1}]")
        if cid in seen:
            raise DuplicateChannel(f"channel {cid} declared twice")
        seen.add(cid)
        if entry.get("board", True):
            boards.append(DisplayBoardSpec(cid, enabled=bool(entry.get("enabled", True))))
        if entry.get("control_group", False):
            groups.append(ControlGroupSpec(cid, enabled=bool(entry.get("enabled", True))))

    if len(boards) > MAX_CHANNELS:
        raise CapacityExceeded(f"{len(boards)} boards exceed the {MAX_CHANNELS}-device bound")

    board_ids = {b.channel_id for b in boards}
    for g in groups:
        if g.channel_id not in board_ids:
            raise DanglingControlGroup(
                f"control group for channel {g.channel_id} has no paired board"
            )

    return SceneConfig(
        boards=tuple(boards),
        control_groups=tuple(groups),
        canvas_width=width,
        canvas_height=height,
        tick_rate=tick_rate,
        overlay_height=overlay_height,
    )


def scene_to_dict(config: SceneConfig) -> dict[str, Any]:
    """Serialize back to the JSON scene-file shape (validate round-trips)."""
    group_ids = {g.channel_id for g in config.control_groups}
    channels = []
    for b in sorted(config.boards, key=lambda b: b.channel_id):
        channels.append(
            {
                "id": b.channel_id,
                "board": True,
                "control_group": b.channel_id in group_ids,
                "enabled": b.enabled,
            }
        )
    return {
        "canvas": {"width": config.canvas_width, "height": config.canvas_height},
        "tick_rate": config.tick_rate,
        "overlay_height": config.overlay_height,
        "channels": channels,
    }


def load_scene_file(path: str | Path) -> SceneConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return validate_config(json.load(fh))


def simple_scene(
    channel_ids: Iterable[int],
    *,
    canvas_width: int = DEFAULT_CANVAS_W,
    canvas_height: int = DEFAULT_CANVAS_H,
    tick_rate: float = DEFAULT_TICK_RATE,
    overlay_height: int = DEFAULT_OVERLAY_HEIGHT,
    control_groups: bool = True,
) -> SceneConfig:
    """Scene with one board (and optionally one control group) per channel."""
    return validate_config(
        {
            "canvas": {"width": canvas_width, "height": canvas_height},
            "tick_rate": tick_rate,
            "overlay_height": overlay_height,
            "channels": [
                {"id": cid, "board": True, "control_group": control_groups}
                for cid in channel_ids
            ],
        }
    )
