import base64
import hashlib
import http.client
import json
import socket
import struct
import threading
import time

import pytest

from fusecast import wire
from fusecast.client import ControlChannel, StreamSubscriber
from fusecast.compositor import ChannelProvenance, FusedFrame
from fusecast.errors import BindFailure
from fusecast.scene import simple_scene
from fusecast.server import StreamServer
from fusecast.source import SourceSpec
from fusecast.transport import FrameBus, Fuse1Server, MjpegBridge


def make_fused(seq, width=16, height=8, ts=None):
    return FusedFrame(
        frame_seq=seq,
        composite_ts=ts if ts is not None else seq * 1000,
        width=width,
        height=height,
        pixels=bytes((seq + i) % 256 for i in range(width * height * 3)),
        channels=(
            ChannelProvenance(0, seq, seq * 1000, (0, 0, width, height), width, height),
        ),
    )


class TestFrameBus:
    def test_fan_out(self):
        bus = FrameBus()
        a, b = bus.subscribe(), bus.subscribe()
        bus.publish(make_fused(1))
        assert a.next(0.1).frame_seq == 1
        assert b.next(0.1).frame_seq == 1

    def test_drop_oldest_depth_two(self):
        bus = FrameBus()
        sub = bus.subscribe()
        for seq in range(5):
            bus.publish(make_fused(seq))
        # Queue keeps only the newest two: 3 then 4.
        assert sub.next(0.1).frame_seq == 3
        assert sub.next(0.1).frame_seq == 4
        assert sub.next(0.05) is None
        assert sub.dropped == 3

    def test_publish_never_blocks_on_stalled_subscriber(self):
        bus = FrameBus()
        bus.subscribe()  # never drained
        t0 = time.perf_counter()
        for seq in range(1000):
            bus.publish(make_fused(seq))
        assert time.perf_counter() - t0 < 1.0

    def test_close_wakes_waiters(self):
        bus = FrameBus()
        sub = bus.subscribe()
        waker = threading.Timer(0.05, bus.close)
        waker.start()
        assert sub.next(2.0) is None
        waker.join()

    def test_subscriber_isolation(self):
        bus = FrameBus()
        fast, slow = bus.subscribe(), bus.subscribe()
        for seq in range(10):
            bus.publish(make_fused(seq))
            got = fast.next(0.1)
            assert got is not None
        assert fast.delivered == 10
        assert slow.dropped == 8


@pytest.fixture
def fuse1():
    bus = FrameBus()
    server = Fuse1Server(
        "127.0.0.1", 0, bus, epoch_us=1000, canvas=(16, 8), tick_rate=30.0
    ).start()
    yield server, bus
    server.stop()


class TestFuse1:
    def test_subscriber_receives_ordered_suffix(self, fuse1):
        server, bus = fuse1
        stop = threading.Event()

        def publisher():
            seq = 0
            while not stop.is_set():
                bus.publish(make_fused(seq))
                seq += 1
                time.sleep(0.005)

        thread = threading.Thread(target=publisher, daemon=True)
        thread.start()
        try:
            subs = [StreamSubscriber("127.0.0.1", server.port) for _ in range(3)]
            received = {i: [] for i in range(3)}
            for i, sub in enumerate(subs):
                for _ in range(20):
                    received[i].append(sub.read_frame().frame.frame_seq)
            for seqs in received.values():
                assert all(b > a for a, b in zip(seqs, seqs[1:]))
            for sub in subs:
                sub.close()
        finally:
            stop.set()
            thread.join()

    def test_hello_carries_epoch_and_canvas(self, fuse1):
        server, bus = fuse1
        sub = StreamSubscriber("127.0.0.1", server.port)
        assert sub.hello.epoch_us == 1000
        assert (sub.hello.width, sub.hello.height) == (16, 8)
        assert sub.hello.tick_rate == 30.0
        sub.close()

    def test_jpeg_subscription(self, fuse1):
        server, bus = fuse1
        sub = StreamSubscriber("127.0.0.1", server.port, pixel_format=wire.PIXEL_JPEG)
        bus.publish(make_fused(0, width=64, height=32))
        received = sub.read_frame()
        assert received.frame.pixel_format == wire.PIXEL_JPEG
        w, h, _ = wire.jpeg_decode(received.frame.payload)
        assert (w, h) == (64, 32)
        sub.close()

    def test_stop_releases_port(self):
        bus = FrameBus()
        server = Fuse1Server(
            "127.0.0.1", 0, bus, epoch_us=0, canvas=(16, 8), tick_rate=30.0
        ).start()
        port = server.port
        server.stop()
        with pytest.raises(OSError):
            socket.create_connection(("127.0.0.1", port), timeout=0.5)

    def test_bind_failure(self, fuse1):
        server, bus = fuse1
        with pytest.raises(BindFailure):
            Fuse1Server(
                "127.0.0.1", server.port, bus, epoch_us=0, canvas=(16, 8), tick_rate=30.0
            )

    def test_slow_subscriber_does_not_stall_publisher(self, fuse1):
        server, bus = fuse1
        # Connect but never read: server-side queue must drop, publisher cadence hold.
        lazy = socket.create_connection(("127.0.0.1", server.port))
        lazy.sendall(wire.encode_subscribe(wire.PIXEL_RAW))
        intervals = []
        last = time.perf_counter()
        for seq in range(100):
            bus.publish(make_fused(seq, width=64, height=64))
            now = time.perf_counter()
            intervals.append(now - last)
            last = now
            time.sleep(0.002)
        lazy.close()
        assert max(intervals) < 0.1  # publish stayed non-blocking


class TestControlSession:
    def test_ndjson_select_round_trip(self):
        scene = simple_scene([0, 1, 2], canvas_width=640, canvas_height=480)
        server = StreamServer(
            scene,
            [SourceSpec(channel=i, width=64, height=16) for i in range(3)],
            fuse1_port=0,
        ).start()
        try:
            control = ControlChannel("127.0.0.1", server.fuse1_port)
            response = control.request({"type": "select", "channel": 1})
            assert response["type"] == "ack"
            assert response["applied_frame_seq"] >= 0
            assert "server_ts_us" in response
            bad = control.request({"type": "select", "channel": 9})
            assert bad == {"type": "error", "id": bad["id"], "code": "UnknownChannel"}
            control.close()
        finally:
            server.stop()

    def test_token_required(self):
        scene = simple_scene([0], canvas_width=640, canvas_height=480)
        server = StreamServer(
            scene, [SourceSpec(channel=0, width=64, height=16)],
            fuse1_port=0, token="sesame",
        ).start()
        try:
            anon = ControlChannel("127.0.0.1", server.fuse1_port)
            denied = anon.request({"type": "select", "channel": 0})
            assert denied["code"] == "Unauthorized"
            anon.close()

            authed = ControlChannel("127.0.0.1", server.fuse1_port, token="sesame")
            ok = authed.request({"type": "select", "channel": 0})
            assert ok["type"] == "ack"
            authed.close()

            wrong = socket.create_connection(("127.0.0.1", server.fuse1_port))
            wrong.sendall(wire.encode_control_preamble())
            wrong.sendall(b'{"type":"hello","token":"nope","id":"h1"}\n')
            line = wrong.makefile("rb").readline()
            assert json.loads(line)["code"] == "Unauthorized"
            wrong.close()
        finally:
            server.stop()

    def test_malformed_json_line(self):
        scene = simple_scene([0], canvas_width=640, canvas_height=480)
        server = StreamServer(
            scene, [SourceSpec(channel=0, width=64, height=16)], fuse1_port=0
        ).start()
        try:
            conn = socket.create_connection(("127.0.0.1", server.fuse1_port))
            conn.sendall(wire.encode_control_preamble())
            conn.sendall(b"this is not json\n")
            line = conn.makefile("rb").readline()
            assert json.loads(line)["code"] == "MalformedCommand"
            conn.close()
        finally:
            server.stop()


@pytest.fixture
def bridge_server():
    scene = simple_scene([0, 1, 2], canvas_width=320, canvas_height=240, overlay_height=24)
    server = StreamServer(
        scene,
        [SourceSpec(channel=i, width=64, height=16, frame_rate=30) for i in range(3)],
        http_port=0,
    ).start()
    time.sleep(0.4)  # let a few frames through
    yield server
    server.stop()


class TestMjpegBridge:
    def test_meta_lists_channels(self, bridge_server):
        conn = http.client.HTTPConnection("127.0.0.1", bridge_server.http_port, timeout=5)
        conn.request("GET", "/meta")
        response = conn.getresponse()
        assert response.status == 200
        meta = json.loads(response.read())
        assert meta["width"] == 320
        assert len(meta["channels"]) == 3
        for desc in meta["channels"]:
            assert set(desc) >= {"channel", "source_seq", "capture_ts_us", "rect"}
        conn.close()

    def test_stream_multipart_parts(self, bridge_server):
        conn = http.client.HTTPConnection("127.0.0.1", bridge_server.http_port, timeout=5)
        conn.request("GET", "/stream")
        response = conn.getresponse()
        assert response.status == 200
        ctype = response.getheader("Content-Type")
        assert ctype.startswith("multipart/x-mixed-replace")
        raw = response.fp
        boundary_line = raw.readline().strip()
        assert boundary_line == b"--fusecastframe"
        headers = {}
        while True:
            line = raw.readline().strip()
            if not line:
                break
            key, _, value = line.decode().partition(":")
            headers[key.strip().lower()] = value.strip()
        assert headers["content-type"] == "image/jpeg"
        jpeg = raw.read(int(headers["content-length"]))
        assert jpeg[:2] == b"\xff\xd8"  # JPEG SOI marker
        conn.close()

    def test_control_post(self, bridge_server):
        conn = http.client.HTTPConnection("127.0.0.1", bridge_server.http_port, timeout=5)
        body = json.dumps({"type": "select", "channel": 2, "id": "p-1"})
        conn.request("POST", "/control", body, {"Content-Type": "application/json"})
        ack = json.loads(conn.getresponse().read())
        assert ack["type"] == "ack"
        # Reflected in /meta once the next tick lands.
        deadline = time.time() + 2
        while time.time() < deadline:
            conn.request("GET", "/meta")
            meta = json.loads(conn.getresponse().read())
            if meta["mode"] == "focus" and meta["focus"] == 2:
                break
            time.sleep(0.05)
        assert meta["mode"] == "focus"
        assert meta["focus"] == 2
        conn.close()

    def test_websocket_control(self, bridge_server):
        sock = socket.create_connection(("127.0.0.1", bridge_server.http_port), timeout=5)
        key = base64.b64encode(b"0123456789abcdef").decode()
        request = (
            f"GET /control HTTP/1.1\r\nHost: test\r\nUpgrade: websocket\r\n"
            f"Connection: Upgrade\r\nSec-WebSocket-Key: {key}\r\n"
            f"Sec-WebSocket-Version: 13\r\n\r\n"
        )
        sock.sendall(request.encode())
        reader = sock.makefile("rb")
        status = reader.readline()
        assert b"101" in status
        accept_expected = base64.b64encode(
            hashlib.sha1((key + "258EAFA5-E914-47DA-95CA-C5AB0DC85B11").encode()).digest()
        ).decode()
        headers = {}
        while True:
            line = reader.readline().strip()
            if not line:
                break
            k, _, v = line.decode().partition(":")
            headers[k.strip().lower()] = v.strip()
        assert headers["sec-websocket-accept"] == accept_expected

        payload = json.dumps({"type": "select", "channel": 1, "id": "ws-1"}).encode()
        mask = b"\x01\x02\x03\x04"
        masked = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
        frame = bytes([0x81, 0x80 | len(payload)]) + mask + masked
        sock.sendall(frame)

        head = reader.read(2)
        assert head[0] == 0x81
        length = head[1] & 0x7F
        if length == 126:
            length = struct.unpack(">H", reader.read(2))[0]
        ack = json.loads(reader.read(length))
        assert ack["type"] == "ack"
        assert ack["id"] == "ws-1"
        sock.close()

    def test_404(self, bridge_server):
        conn = http.client.HTTPConnection("127.0.0.1", bridge_server.http_port, timeout=5)
        conn.request("GET", "/nope")
        assert conn.getresponse().status == 404
        conn.close()

    def test_cors_preflight(self, bridge_server):
        conn = http.client.HTTPConnection("127.0.0.1", bridge_server.http_port, timeout=5)
        conn.request("OPTIONS", "/control")
        response = conn.getresponse()
        assert response.status == 204
        assert response.getheader("Access-Control-Allow-Origin") == "*"
        response.read()
        conn.close()
