"""Interaction command handling.

Commands arrive as JSON objects (over a FUSE/1 control session, the HTTP
bridge, or in-process), are applied to the compositor at the next tick,
and are acknowledged with the frame sequence number of the first fused
frame that reflects them plus the server-side apply timestamp. Response
time is measured entirely on the client clock: input timestamp to the
arrival of that first reflecting frame.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Any

from .compositor import Compositor
from .errors import MalformedCommand, Unauthorized, UnknownChannel
from .timebase import Timebase

log = logging.getLogger("fusecast.control")

COMMAND_KINDS = ("select", "layout", "toggle_visibility")


@dataclass(frozen=True)
class ControlCommand:
    kind: str
    command_id: str
    client_input_ts: int
    channel: int | None = None
    mode: str | None = None


@dataclass(frozen=True)
class ControlAck:
    command_id: str
    applied_frame_seq: int
    server_apply_ts: int


def parse_command(msg: dict[str, Any]) -> ControlCommand:
    kind = msg.get("type")
    if kind not in COMMAND_KINDS:
        raise MalformedCommand(f"unknown command type {kind!r}")
    command_id = msg.get("id")
    if not isinstance(command_id, str) or not command_id:
        raise MalformedCommand("missing command id")
    channel = msg.get("channel")
    mode = msg.get("mode")
    if kind in ("select", "toggle_visibility"):
        if not isinstance(channel, int):
            raise MalformedCommand(f"{kind} requires an integer channel")
    elif kind == "layout":
        if mode not in ("grid", "focus"):
            raise MalformedCommand("layout mode must be grid or focus")
        if mode == "focus" and not isinstance(channel, int):
            raise MalformedCommand("focus layout requires a channel")
    return ControlCommand(
        kind=kind,
        command_id=command_id,
        client_input_ts=int(msg.get("client_ts_us", 0)),
        channel=channel,
        mode=mode,
    )


class ControlPlane:
    """Applies interaction commands; total order is server receive order."""

    def __init__(self, compositor: Compositor, timebase: Timebase, token: str | None = None):
        self.compositor = compositor
        self.timebase = timebase
        self.token = token
        self._lock = threading.Lock()
        self.commands_handled = 0
        self.acks = 0
        self.errors = 0

    def handle(self, msg: dict[str, Any], session: dict[str, Any]) -> dict[str, Any]:
        """Dispatch one JSON message; returns the JSON-ready response."""
        msg_type = msg.get("type")
        msg_id = msg.get("id")
        if msg_type == "hello":
            if self.token is not None and msg.get("token") != self.token:
                return self._error(msg_id, "Unauthorized")
            session["authenticated"] = True
            return {"type": "hello_ack", "id": msg_id}
        if self.token is not None and not session.get("authenticated"):
            return self._error(msg_id, "Unauthorized")
        if msg_type == "ping":
            return {"type": "pong", "id": msg_id, "server_ts_us": self.timebase.now_us()}
        try:
            cmd = parse_command(msg)
        except MalformedCommand as exc:
            return self._error(msg_id, "MalformedCommand", str(exc))
        seen: set = session.setdefault("seen_ids", set())
        if cmd.command_id in seen:
            return self._error(msg_id, "MalformedCommand", "duplicate command id")
        seen.add(cmd.command_id)
        try:
            ack = self.apply(cmd)
        except UnknownChannel:
            return self._error(msg_id, "UnknownChannel")
        except Unauthorized:
            return self._error(msg_id, "Unauthorized")
        return {
            "type": "ack",
            "id": ack.command_id,
            "applied_frame_seq": ack.applied_frame_seq,
            "server_ts_us": ack.server_apply_ts,
        }

    def apply(self, cmd: ControlCommand) -> ControlAck:
        """Apply a parsed command; serialized so arrival order is total order."""
        with self._lock:
            self.commands_handled += 1
            if cmd.kind == "select":
                applied = self.compositor.select(cmd.channel)
            elif cmd.kind == "toggle_visibility":
                applied = self.compositor.toggle_visibility(cmd.channel)
            elif cmd.kind == "layout" and cmd.mode == "focus":
                applied = self.compositor.set_focus(cmd.channel)
            else:
                applied = self.compositor.set_grid()
            ack = ControlAck(
                command_id=cmd.command_id,
                applied_frame_seq=applied,
                server_apply_ts=self.timebase.now_us(),
            )
            self.acks += 1
            log.info(
                "ack id=%s kind=%s applied_frame_seq=%d",
                cmd.command_id,
                cmd.kind,
                ack.applied_frame_seq,
            )
            return ack

    def _error(self, msg_id: Any, code: str, detail: str = "") -> dict[str, Any]:
        self.errors += 1
        out = {"type": "error", "id": msg_id, "code": code}
        if detail:
            out["detail"] = detail
        return out

    def stats(self) -> dict[str, int]:
        return {
            "commands_handled": self.commands_handled,
            "acks": self.acks,
            "errors": self.errors,
        }


def measure_response(
    client_input_ts: int,
    applied_frame_seq: int,
    frame_arrivals: list[tuple[int, int]],
) -> int | None:
    """Client-clock response time: input to first reflecting frame arrival.

    frame_arrivals is (frame_seq, arrival_ts) in arrival order; the first
    entry with seq >= applied_frame_seq closes the measurement.
    """
    for seq, arrival_ts in frame_arrivals:
        if seq >= applied_frame_seq:
            return max(0, arrival_ts - client_input_ts)
    return None
