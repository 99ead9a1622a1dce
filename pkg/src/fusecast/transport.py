"""Stream delivery: frame fan-out, the FUSE/1 TCP server, and the HTTP bridge.

One producer (the compositor loop) feeds a FrameBus; any number of
subscriber sessions consume it independently. A slow subscriber never
blocks the producer or its peers: each subscription holds a two-deep
drop-oldest queue. Every subscriber gets exactly one video connection
regardless of how many channels the fused stream carries.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import mimetypes
import socket
import struct
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable

from .compositor import FusedFrame
from .errors import BindFailure
from .shaping import ShapedLink, SharedShaper
from . import wire

log = logging.getLogger("fusecast.transport")

SUBSCRIBER_QUEUE_DEPTH = 2


class Subscription:
    """Drop-oldest frame queue for one consumer."""

    def __init__(self, bus: "FrameBus", depth: int = SUBSCRIBER_QUEUE_DEPTH):
        self._bus = bus
        self._depth = depth
        self._frames: list[FusedFrame] = []
        self._cond = threading.Condition()
        self._closed = False
        self.delivered = 0
        self.dropped = 0

    def _offer(self, frame: FusedFrame) -> None:
        with self._cond:
            if self._closed:
                return
            if len(self._frames) >= self._depth:
                self._frames.pop(0)
                self.dropped += 1
            self._frames.append(frame)
            self._cond.notify()

    def next(self, timeout: float | None = None) -> FusedFrame | None:
        """Oldest queued frame, or None on timeout/close."""
        with self._cond:
            if not self._frames:
                self._cond.wait(timeout)
            if not self._frames:
                return None
            frame = self._frames.pop(0)
            self.delivered += 1
            return frame

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._frames.clear()
            self._cond.notify_all()
        self._bus._drop(self)


class FrameBus:
    """Single-producer, many-consumer fused-frame fan-out."""

    def __init__(self) -> None:
        self._subs: list[Subscription] = []
        self._lock = threading.Lock()

    def subscribe(self, depth: int = SUBSCRIBER_QUEUE_DEPTH) -> Subscription:
        sub = Subscription(self, depth)
        with self._lock:
            self._subs.append(sub)
        return sub

    def _drop(self, sub: Subscription) -> None:
        with self._lock:
            if sub in self._subs:
                self._subs.remove(sub)

    def publish(self, frame: FusedFrame) -> None:
        """Non-blocking: offers the frame to every live subscription."""
        with self._lock:
            subs = list(self._subs)
        for sub in subs:
            sub._offer(frame)

    def close(self) -> None:
        with self._lock:
            subs = list(self._subs)
        for sub in subs:
            sub.close()

    @property
    def subscriber_count(self) -> int:
        with self._lock:
            return len(self._subs)


# ---------------------------------------------------------------------------
# FUSE/1 TCP server


class Fuse1Server:
    """Framed TCP transport: video subscriptions and NDJSON control sessions.

    A connecting client declares its role with the first message: a
    subscribe message starts a one-way frame stream (server replies with a
    stream hello carrying the clock epoch), a control preamble switches the
    connection to newline-delimited JSON handled by the control plane.
    """

    def __init__(
        self,
        host: str,
        port: int,
        bus: FrameBus,
        *,
        epoch_us: int,
        canvas: tuple[int, int],
        tick_rate: float,
        control_handler: Callable[[dict, dict], dict] | None = None,
        link: ShapedLink | None = None,
        jpeg_quality: int = 80,
    ):
        self.bus = bus
        self.epoch_us = epoch_us
        self.canvas = canvas
        self.tick_rate = tick_rate
        self.control_handler = control_handler
        self.jpeg_quality = jpeg_quality
        self._shaper: SharedShaper | None = None
        if link is not None:
            default_burst = 2 * (canvas[0] * canvas[1] * 3 + wire.header_len(64))
            self._shaper = SharedShaper(link, default_burst)
        self._stop = threading.Event()
        self._sessions: set[socket.socket] = set()
        self._sessions_lock = threading.Lock()
        try:
            self._listener = socket.create_server((host, port), reuse_port=False)
        except OSError as exc:
            raise BindFailure(f"cannot bind {host}:{port}: {exc}") from exc
        self._listener.settimeout(0.25)
        self.port = self._listener.getsockname()[1]
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="fuse1-accept", daemon=True
        )

    def start(self) -> "Fuse1Server":
        self._accept_thread.start()
        return self

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, addr = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            with self._sessions_lock:
                self._sessions.add(conn)
            threading.Thread(
                target=self._session, args=(conn, addr), daemon=True,
                name=f"fuse1-session-{addr[1]}",
            ).start()

    def _session(self, conn: socket.socket, addr) -> None:
        try:
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            rfile = conn.makefile("rb")
            msg_type = wire.read_preamble(rfile)
            if msg_type == wire.MSG_SUBSCRIBE:
                pixel_format = wire.read_exact(rfile, 1)[0]
                self._stream_session(conn, pixel_format)
            elif msg_type == wire.MSG_CONTROL:
                self._control_session(conn, rfile)
            else:
                log.warning("session %s opened with unexpected type 0x%02x", addr, msg_type)
        except Exception as exc:
            if not self._stop.is_set():
                log.debug("session %s ended: %s", addr, exc)
        finally:
            with self._sessions_lock:
                self._sessions.discard(conn)
            try:
                conn.close()
            except OSError:
                pass

    def _stream_session(self, conn: socket.socket, pixel_format: int) -> None:
        conn.sendall(
            wire.encode_hello(self.epoch_us, self.canvas[0], self.canvas[1], self.tick_rate)
        )
        sub = self.bus.subscribe()
        try:
            while not self._stop.is_set():
                frame = sub.next(timeout=0.5)
                if frame is None:
                    continue
                data = wire.encode_frame(frame, pixel_format, self.jpeg_quality)
                if self._shaper is not None:
                    self._shaper.send_frame(conn, data)
                else:
                    conn.sendall(data)
        finally:
            sub.close()

    def _control_session(self, conn: socket.socket, rfile) -> None:
        if self.control_handler is None:
            return
        session_state: dict = {}
        wfile = conn.makefile("wb")
        for line in rfile:
            line = line.strip()
            if not line:
                continue
            try:
                msg = json.loads(line)
            except json.JSONDecodeError:
                response = {"type": "error", "code": "MalformedCommand"}
            else:
                response = self.control_handler(msg, session_state)
            wfile.write(json.dumps(response).encode() + b"\n")
            wfile.flush()
            if self._stop.is_set():
                break

    def stop(self) -> None:
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._sessions_lock:
            sessions = list(self._sessions)
        for conn in sessions:
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                conn.close()
            except OSError:
                pass
        self._accept_thread.join(timeout=5.0)


def serve_stream(
    address: tuple[str, int],
    bus: FrameBus,
    *,
    epoch_us: int,
    canvas: tuple[int, int],
    tick_rate: float,
    control_handler: Callable[[dict, dict], dict] | None = None,
    link: ShapedLink | None = None,
) -> Fuse1Server:
    """Bind and start a FUSE/1 server; returns the running handle."""
    server = Fuse1Server(
        address[0],
        address[1],
        bus,
        epoch_us=epoch_us,
        canvas=canvas,
        tick_rate=tick_rate,
        control_handler=control_handler,
        link=link,
    )
    return server.start()


# ---------------------------------------------------------------------------
# MJPEG-over-HTTP bridge

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"
_BOUNDARY = "fusecastframe"


class _BridgeHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: "MjpegBridge"

    def log_message(self, fmt, *args):  # route through logging, not stderr
        log.debug("bridge: " + fmt, *args)

    def _cors(self) -> None:
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")

    def _send_json(self, obj: Any, status: int = 200) -> None:
        body = json.dumps(obj).encode()
        self.send_response(status)
        self._cors()
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_OPTIONS(self) -> None:
        self.send_response(204)
        self._cors()
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Content-Length", "0")
        self.end_headers()

    def do_GET(self) -> None:
        path = self.path.split("?", 1)[0]
        if path == "/stream":
            self._stream()
        elif path == "/meta":
            self._send_json(self.server.meta_provider())
        elif path == "/control" and self.headers.get("Upgrade", "").lower() == "websocket":
            self._websocket()
        elif self.server.static_root is not None:
            self._static(path)
        else:
            self._send_json({"error": "not found"}, status=404)

    def do_POST(self) -> None:
        if self.path.split("?", 1)[0] != "/control":
            self._send_json({"error": "not found"}, status=404)
            return
        length = int(self.headers.get("Content-Length", "0"))
        body = self.rfile.read(length) if length else b"{}"
        try:
            msg = json.loads(body)
        except json.JSONDecodeError:
            self._send_json({"type": "error", "code": "MalformedCommand"}, status=400)
            return
        session = self._post_session()
        self._send_json(self.server.control_handler(msg, session))

    def _post_session(self) -> dict:
        # POST requests are stateless; keep one logical session per client
        # address so hello/token state survives across commands.
        key = self.client_address[0]
        return self.server.post_sessions.setdefault(key, {})

    # -- multipart stream -------------------------------------------------

    def _stream(self) -> None:
        self.send_response(200)
        self._cors()
        self.send_header("Cache-Control", "no-cache, private")
        self.send_header("Connection", "close")
        self.send_header(
            "Content-Type", f"multipart/x-mixed-replace; boundary={_BOUNDARY}"
        )
        self.end_headers()
        sub = self.server.bus.subscribe()
        try:
            while not self.server.stopping.is_set():
                frame = sub.next(timeout=0.5)
                if frame is None:
                    continue
                jpeg = wire.jpeg_encode(
                    frame.width, frame.height, frame.pixels, self.server.jpeg_quality
                )
                part = (
                    f"--{_BOUNDARY}\r\n"
                    f"Content-Type: image/jpeg\r\n"
                    f"Content-Length: {len(jpeg)}\r\n"
                    f"X-Frame-Seq: {frame.frame_seq}\r\n\r\n"
                ).encode() + jpeg + b"\r\n"
                self.wfile.write(part)
        except (BrokenPipeError, ConnectionResetError):
            pass
        finally:
            sub.close()
            self.close_connection = True

    # -- static files ------------------------------------------------------

    def _static(self, path: str) -> None:
        root = self.server.static_root
        assert root is not None
        rel = path.lstrip("/") or "index.html"
        target = (root / rel).resolve()
        if not str(target).startswith(str(root.resolve())) or not target.is_file():
            self._send_json({"error": "not found"}, status=404)
            return
        body = target.read_bytes()
        ctype = mimetypes.guess_type(target.name)[0] or "application/octet-stream"
        self.send_response(200)
        self._cors()
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    # -- websocket control --------------------------------------------------

    def _websocket(self) -> None:
        key = self.headers.get("Sec-WebSocket-Key", "")
        accept = base64.b64encode(
            hashlib.sha1((key + _WS_GUID).encode()).digest()
        ).decode()
        self.send_response(101, "Switching Protocols")
        self.send_header("Upgrade", "websocket")
        self.send_header("Connection", "Upgrade")
        self.send_header("Sec-WebSocket-Accept", accept)
        self.end_headers()
        session: dict = {}
        try:
            while not self.server.stopping.is_set():
                msg = self._ws_read()
                if msg is None:
                    break
                opcode, payload = msg
                if opcode == 0x8:  # close
                    self._ws_write(0x8, b"")
                    break
                if opcode == 0x9:  # ping
                    self._ws_write(0xA, payload)
                    continue
                if opcode != 0x1:
                    continue
                try:
                    command = json.loads(payload)
                except json.JSONDecodeError:
                    response = {"type": "error", "code": "MalformedCommand"}
                else:
                    response = self.server.control_handler(command, session)
                self._ws_write(0x1, json.dumps(response).encode())
        except (BrokenPipeError, ConnectionResetError, OSError):
            pass
        finally:
            self.close_connection = True

    def _ws_read(self) -> tuple[int, bytes] | None:
        head = self.rfile.read(2)
        if len(head) < 2:
            return None
        opcode = head[0] & 0x0F
        masked = bool(head[1] & 0x80)
        length = head[1] & 0x7F
        if length == 126:
            length = struct.unpack(">H", self.rfile.read(2))[0]
        elif length == 127:
            length = struct.unpack(">Q", self.rfile.read(8))[0]
        mask = self.rfile.read(4) if masked else b"\x00" * 4
        payload = self.rfile.read(length)
        if masked:
            payload = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
        return opcode, payload

    def _ws_write(self, opcode: int, payload: bytes) -> None:
        header = bytes([0x80 | opcode])
        n = len(payload)
        if n < 126:
            header += bytes([n])
        elif n < 65536:
            header += bytes([126]) + struct.pack(">H", n)
        else:
            header += bytes([127]) + struct.pack(">Q", n)
        self.wfile.write(header + payload)
        self.wfile.flush()


class MjpegBridge(ThreadingHTTPServer):
    """HTTP bridge: /stream (MJPEG), /meta (provenance JSON), /control (WS or POST)."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(
        self,
        host: str,
        port: int,
        bus: FrameBus,
        *,
        meta_provider: Callable[[], dict],
        control_handler: Callable[[dict, dict], dict],
        jpeg_quality: int = 80,
        static_root: str | Path | None = None,
    ):
        self.bus = bus
        self.meta_provider = meta_provider
        self.control_handler = control_handler
        self.jpeg_quality = jpeg_quality
        self.static_root = Path(static_root) if static_root else None
        self.stopping = threading.Event()
        self.post_sessions: dict[str, dict] = {}
        try:
            super().__init__((host, port), _BridgeHandler)
        except OSError as exc:
            raise BindFailure(f"cannot bind http {host}:{port}: {exc}") from exc
        self._thread = threading.Thread(
            target=self.serve_forever, kwargs={"poll_interval": 0.25},
            name="mjpeg-bridge", daemon=True,
        )

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start(self) -> "MjpegBridge":
        self._thread.start()
        return self

    def stop(self) -> None:
        # The bus belongs to the orchestrator; stream handlers notice the
        # stopping flag on their next queue-poll timeout.
        self.stopping.set()
        self.shutdown()
        self.server_close()
        self._thread.join(timeout=5.0)


def serve_mjpeg_bridge(
    address: tuple[str, int],
    bus: FrameBus,
    *,
    meta_provider: Callable[[], dict],
    control_handler: Callable[[dict, dict], dict],
    jpeg_quality: int = 80,
    static_root: str | Path | None = None,
) -> MjpegBridge:
    bridge = MjpegBridge(
        address[0],
        address[1],
        bus,
        meta_provider=meta_provider,
        control_handler=control_handler,
        jpeg_quality=jpeg_quality,
        static_root=static_root,
    )
    return bridge.start()
