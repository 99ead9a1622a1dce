"""Benchmark drivers: fused pipeline, naive per-channel baseline, response time.

The fused bench runs the real server (sources, compositor, FUSE/1) against
an in-process measuring client on the loopback clock domain. The naive
baseline transmits every channel separately at full canvas resolution
through the same shared shaped link, which is the premise the fused design
is compared against: its aggregate demand grows with the channel count
while the fused stream's stays constant.

Bench sources carry a small clock skew (cameras free-run on their own
oscillators), so source cadence sweeps across the compositor tick phase
instead of locking to it; per-channel mean staleness then converges to half
a source period for every run instead of depending on arbitrary phase.
"""

from __future__ import annotations

import socket
import threading
import time
from collections import deque
from typing import Iterable, Sequence

import numpy as np

from . import wire
from .client import ControlChannel, StreamSubscriber
from .compositor import ChannelProvenance, FusedFrame
from .errors import AckTimeout, SetupFailure
from .metrics import (
    LatencyRecord,
    LatencyReport,
    LoadSample,
    ProcessLoadProbe,
    ResponseReport,
    ResponseSample,
    SyncRecord,
    gaussian_smooth,
)
from .scene import simple_scene
from .server import StreamServer
from .shaping import ShapedLink, SharedShaper
from .source import Frame, SourceSpec, run_source
from .timebase import Timebase, monotonic_us
from .transport import FrameBus

__all__ = [
    "run_fused_bench",
    "run_naive_bench",
    "response_bench",
    "gaussian_smooth",
    "BENCH_SOURCE_SKEW",
    "stream_demand_bytes_per_s",
]

BENCH_SOURCE_SKEW = 0.02
LOAD_SAMPLE_PERIOD_S = 0.5


def bench_sources(
    n: int,
    width: int,
    height: int,
    rate: float,
    skew: float = BENCH_SOURCE_SKEW,
) -> list[SourceSpec]:
    return [
        SourceSpec(channel=i, kind="synthetic", frame_rate=rate,
                   width=width, height=height, clock_skew=skew)
        for i in range(n)
    ]


def stream_demand_bytes_per_s(canvas_w: int, canvas_h: int, rate: float) -> float:
    """Wire demand of one full-canvas raw stream."""
    return (canvas_w * canvas_h * 3 + wire.frame_wire_len(1, 0)) * rate


class _LoadMonitor:
    """Samples process CPU share and compositor composite time periodically."""

    def __init__(self, server: StreamServer, period_s: float = LOAD_SAMPLE_PERIOD_S):
        self.server = server
        self.period_s = period_s
        self.samples: list[LoadSample] = []
        self._probe = ProcessLoadProbe()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="load-monitor", daemon=True)
        self._t0 = time.monotonic()

    def start(self) -> "_LoadMonitor":
        self.server.compositor.composite_stats(reset=True)
        self._thread.start()
        return self

    def _run(self) -> None:
        while not self._stop.wait(self.period_s):
            cpu = self._probe.sample()
            _, composite_us = self.server.compositor.composite_stats(reset=True)
            self.samples.append(
                LoadSample(
                    t=time.monotonic() - self._t0,
                    cpu_fraction=cpu,
                    composite_time_us=composite_us,
                )
            )

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=5.0)


def run_fused_bench(
    n: int,
    duration_s: float,
    link: ShapedLink | None = None,
    *,
    canvas: tuple[int, int] = (640, 480),
    source_size: tuple[int, int] = (320, 240),
    source_rate: float = 30.0,
    tick_rate: float = 30.0,
    overlay_height: int = 48,
    skew: float = BENCH_SOURCE_SKEW,
) -> LatencyReport:
    """Full fused pipeline against a measuring loopback client."""
    if not 1 <= n <= 256:
        raise SetupFailure(f"channel count {n} outside [1, 256]")
    config = {
        "mode": "fused",
        "n": n,
        "duration_s": duration_s,
        "canvas_w": canvas[0],
        "canvas_h": canvas[1],
        "source_w": source_size[0],
        "source_h": source_size[1],
        "source_rate": source_rate,
        "tick_rate": tick_rate,
        "source_skew": skew,
        "link_bandwidth_bytes_per_s": link.bandwidth_bytes_per_s if link else None,
        "link_base_delay_ms": link.base_delay_ms if link else None,
    }
    scene = simple_scene(
        range(n),
        canvas_width=canvas[0],
        canvas_height=canvas[1],
        tick_rate=tick_rate,
        overlay_height=overlay_height,
    )
    sources = bench_sources(n, source_size[0], source_size[1], source_rate, skew)
    try:
        server = StreamServer(scene, sources, fuse1_port=0, link=link).start()
    except Exception as exc:
        raise SetupFailure(f"server assembly failed: {exc}") from exc

    report = LatencyReport(config=config)
    monitor = _LoadMonitor(server).start()
    try:
        sub = StreamSubscriber("127.0.0.1", server.fuse1_port)
        deadline = time.monotonic() + duration_s
        # Skip the warm-up: first frames may predate all sources being live.
        warmup_until = time.monotonic() + min(1.0, duration_s / 10)
        while time.monotonic() < deadline:
            received = sub.read_frame()
            if time.monotonic() < warmup_until:
                continue
            frame = received.frame
            for desc in frame.channels:
                report.latency.append(
                    LatencyRecord(
                        channel=desc.channel,
                        capture_ts=desc.capture_ts,
                        client_render_ts=received.arrival_ts,
                    )
                )
            if frame.channels:
                ts = [desc.capture_ts for desc in frame.channels]
                report.sync.append(
                    SyncRecord(frame_seq=frame.frame_seq, spread_us=max(ts) - min(ts))
                )
        sub.close()
    finally:
        monitor.stop()
        report.load = monitor.samples
        server.stop()
    return report


# ---------------------------------------------------------------------------
# Naive per-channel baseline


class NaiveStreamServer:
    """Baseline: one connection per channel, full canvas resolution each.

    All per-channel senders share one shaped link. Subscribers are assigned
    channels in connection order; each receives that channel's frames as
    single-descriptor fused frames.
    """

    def __init__(
        self,
        n: int,
        *,
        canvas: tuple[int, int],
        source_size: tuple[int, int],
        source_rate: float,
        link: ShapedLink | None,
        skew: float = BENCH_SOURCE_SKEW,
    ):
        self.n = n
        self.canvas = canvas
        self.timebase = Timebase.start()
        self._buses = [FrameBus() for _ in range(n)]
        self._next_session = 0
        self._session_lock = threading.Lock()
        self._stop = threading.Event()
        self._scale_cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
        self._shaper: SharedShaper | None = None
        if link is not None:
            burst = 2 * (canvas[0] * canvas[1] * 3 + wire.header_len(1))
            self._shaper = SharedShaper(link, burst)
        self._sources = [
            run_source(spec, self._make_sink(spec.channel), self.timebase)
            for spec in bench_sources(
                n, source_size[0], source_size[1], source_rate, skew
            )
        ]
        self._listener = socket.create_server(("127.0.0.1", 0))
        self._listener.settimeout(0.25)
        self.port = self._listener.getsockname()[1]
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="naive-accept", daemon=True
        )
        self._accept_thread.start()

    def _make_sink(self, channel: int):
        def sink(frame: Frame) -> None:
            fused = self._wrap(frame)
            self._buses[channel].publish(fused)

        return sink

    def _wrap(self, frame: Frame) -> FusedFrame:
        cw, ch = self.canvas
        if (frame.width, frame.height) == (cw, ch):
            pixels = frame.pixels
        else:
            key = (frame.width, frame.height)
            maps = self._scale_cache.get(key)
            if maps is None:
                yi = np.arange(ch, dtype=np.intp) * frame.height // ch
                xi = np.arange(cw, dtype=np.intp) * frame.width // cw
                maps = (yi, xi)
                self._scale_cache[key] = maps
            arr = frame.as_array()[maps[0]][:, maps[1]]
            pixels = arr.tobytes()
        prov = ChannelProvenance(
            channel=frame.channel,
            source_seq=frame.seq,
            capture_ts=frame.capture_ts,
            rect=(0, 0, cw, ch),
            src_width=cw,
            src_height=ch,
        )
        return FusedFrame(
            frame_seq=frame.seq,
            composite_ts=frame.capture_ts,
            width=cw,
            height=ch,
            pixels=pixels,
            channels=(prov,),
        )

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            with self._session_lock:
                channel = self._next_session % self.n
                self._next_session += 1
            threading.Thread(
                target=self._session,
                args=(conn, channel),
                name=f"naive-session-{channel}",
                daemon=True,
            ).start()

    def _session(self, conn: socket.socket, channel: int) -> None:
        sub = self._buses[channel].subscribe()
        try:
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            rfile = conn.makefile("rb")
            msg_type = wire.read_preamble(rfile)
            if msg_type != wire.MSG_SUBSCRIBE:
                return
            wire.read_exact(rfile, 1)
            conn.sendall(
                wire.encode_hello(
                    self.timebase.epoch_us, self.canvas[0], self.canvas[1], 0.0
                )
            )
            while not self._stop.is_set():
                frame = sub.next(timeout=0.5)
                if frame is None:
                    continue
                data = wire.encode_frame(frame, wire.PIXEL_RAW)
                if self._shaper is not None:
                    self._shaper.send_frame(conn, data)
                else:
                    conn.sendall(data)
        except OSError:
            pass
        finally:
            sub.close()
            try:
                conn.close()
            except OSError:
                pass

    def stop(self) -> None:
        self._stop.set()
        for handle in self._sources:
            handle.stop()
        try:
            self._listener.close()
        except OSError:
            pass
        for bus in self._buses:
            bus.close()


def run_naive_bench(
    n: int,
    duration_s: float,
    link: ShapedLink | None,
    *,
    canvas: tuple[int, int] = (320, 240),
    source_size: tuple[int, int] = (320, 240),
    source_rate: float = 30.0,
    skew: float = BENCH_SOURCE_SKEW,
) -> LatencyReport:
    """Per-channel independent transmission through one shared link."""
    if not 1 <= n <= 256:
        raise SetupFailure(f"channel count {n} outside [1, 256]")
    config = {
        "mode": "naive",
        "n": n,
        "duration_s": duration_s,
        "canvas_w": canvas[0],
        "canvas_h": canvas[1],
        "source_w": source_size[0],
        "source_h": source_size[1],
        "source_rate": source_rate,
        "source_skew": skew,
        "link_bandwidth_bytes_per_s": link.bandwidth_bytes_per_s if link else None,
        "link_base_delay_ms": link.base_delay_ms if link else None,
    }
    try:
        server = NaiveStreamServer(
            n,
            canvas=canvas,
            source_size=source_size,
            source_rate=source_rate,
            link=link,
            skew=skew,
        )
    except Exception as exc:
        raise SetupFailure(f"naive server assembly failed: {exc}") from exc

    report = LatencyReport(config=config)
    records_lock = threading.Lock()
    stop = threading.Event()

    def reader(channel: int) -> None:
        try:
            sub = StreamSubscriber("127.0.0.1", server.port)
        except OSError:
            return
        warmup_until = time.monotonic() + min(1.0, duration_s / 10)
        try:
            while not stop.is_set():
                received = sub.read_frame()
                if time.monotonic() < warmup_until:
                    continue
                for desc in received.frame.channels:
                    with records_lock:
                        report.latency.append(
                            LatencyRecord(
                                channel=desc.channel,
                                capture_ts=desc.capture_ts,
                                client_render_ts=received.arrival_ts,
                            )
                        )
        except Exception:
            pass
        finally:
            sub.close()

    threads = [
        threading.Thread(target=reader, args=(i,), daemon=True, name=f"naive-reader-{i}")
        for i in range(n)
    ]
    try:
        for t in threads:
            t.start()
        time.sleep(duration_s)
    finally:
        stop.set()
        server.stop()
        for t in threads:
            t.join(timeout=5.0)
    return report


# ---------------------------------------------------------------------------
# Response time


class _FrameWatcher:
    """Tracks (frame_seq, arrival_ts) so waiters can find reflecting frames."""

    def __init__(self, history: int = 256):
        self._cond = threading.Condition()
        self._history: deque[tuple[int, int]] = deque(maxlen=history)
        self._closed = False

    def record(self, seq: int, arrival_ts: int) -> None:
        with self._cond:
            self._history.append((seq, arrival_ts))
            self._cond.notify_all()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def wait_for(self, target_seq: int, timeout_s: float) -> int | None:
        """Arrival timestamp of the first frame with seq >= target_seq."""
        deadline = time.monotonic() + timeout_s
        with self._cond:
            while True:
                for seq, arrival in self._history:
                    if seq >= target_seq:
                        return arrival
                if self._closed:
                    return None
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return None
                self._cond.wait(remaining)


def response_bench(
    host: str,
    port: int,
    script: Sequence[str] = ("select",),
    count: int = 500,
    *,
    channels: Sequence[int] = (0,),
    token: str | None = None,
    ack_timeout_s: float = 5.0,
) -> ResponseReport:
    """Replay interaction commands; measure client-clock response times.

    Response time for one command is the interval from just before it is
    sent to the arrival of the first fused frame whose sequence number is
    at or past the acknowledged apply point.
    """
    config = {
        "mode": "response",
        "count": count,
        "script": ",".join(script),
        "channels": ",".join(str(c) for c in channels),
    }
    report = ResponseReport(config=config)
    if count <= 0 or not script:
        return report

    control = ControlChannel(host, port, token=token)
    sub = StreamSubscriber(host, port)
    watcher = _FrameWatcher()

    def pump() -> None:
        try:
            for received in sub.frames():
                watcher.record(received.frame.frame_seq, received.arrival_ts)
        finally:
            watcher.close()

    pump_thread = threading.Thread(target=pump, name="response-pump", daemon=True)
    pump_thread.start()
    report.rtt_us = control.ping_rtt_us()

    toggle_restore: deque[int] = deque()
    try:
        for i in range(count):
            kind = script[i % len(script)]
            channel = channels[i % len(channels)]
            if kind == "select":
                msg = {"type": "select", "channel": channel}
            elif kind == "layout":
                mode = "grid" if i % 2 == 0 else "focus"
                msg = {"type": "layout", "mode": mode}
                if mode == "focus":
                    msg["channel"] = channel
            elif kind == "toggle_visibility":
                # Toggle back next time so the scene never drifts away.
                if toggle_restore:
                    channel = toggle_restore.popleft()
                else:
                    toggle_restore.append(channel)
                msg = {"type": "toggle_visibility", "channel": channel}
            else:
                raise ValueError(f"unknown scripted kind {kind!r}")
            t_input = monotonic_us()
            msg["client_ts_us"] = t_input
            try:
                response = control.request(msg, timeout=ack_timeout_s)
            except (AckTimeout, OSError):
                report.samples.append(ResponseSample(kind, 0, timed_out=True))
                continue
            if response.get("type") != "ack":
                report.samples.append(ResponseSample(kind, 0, timed_out=True))
                continue
            applied = int(response["applied_frame_seq"])
            arrival_stream = watcher.wait_for(applied, ack_timeout_s)
            if arrival_stream is None:
                report.samples.append(ResponseSample(kind, 0, timed_out=True))
                continue
            arrival_mono = arrival_stream + sub.hello.epoch_us
            report.samples.append(
                ResponseSample(kind, max(0, arrival_mono - t_input))
            )
    finally:
        control.close()
        sub.close()
        watcher.close()
    return report
