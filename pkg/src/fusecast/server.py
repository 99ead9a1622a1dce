"""Server assembly: scene, sources, compositor loop, transports, control.

Build order mirrors the streaming-side setup: validate the scene, lay out
the video canvas and its boards, attach the interaction overlay and control
groups, start the fusion loop, then open the transports.
"""

from __future__ import annotations

import logging
from typing import Any

from .compositor import Compositor, CompositorLoop
from .control import ControlPlane
from .errors import UnknownChannel
from .scene import SceneConfig
from .shaping import ShapedLink
from .source import SourceSpec, run_source
from .timebase import Timebase
from .transport import FrameBus, Fuse1Server, MjpegBridge

log = logging.getLogger("fusecast.server")


class StreamServer:
    """Owns every moving part of one streaming session."""

    def __init__(
        self,
        scene: SceneConfig,
        sources: list[SourceSpec],
        *,
        host: str = "127.0.0.1",
        fuse1_port: int | None = None,
        http_port: int | None = None,
        token: str | None = None,
        link: ShapedLink | None = None,
        static_root: str | None = None,
        jpeg_quality: int = 80,
    ):
        self.scene = scene
        self.source_specs = sources
        self.host = host
        self._fuse1_port = fuse1_port
        self._http_port = http_port
        self.token = token
        self.link = link
        self.static_root = static_root
        self.jpeg_quality = jpeg_quality

        self.timebase = Timebase.start()
        self.compositor = Compositor(scene, self.timebase)
        self.bus = FrameBus()
        self.loop = CompositorLoop(self.compositor, self.bus.publish)
        self.control = ControlPlane(self.compositor, self.timebase, token=token)
        self.fuse1: Fuse1Server | None = None
        self.bridge: MjpegBridge | None = None
        self._source_handles = []
        self._started = False

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> "StreamServer":
        if self._fuse1_port is not None:
            self.fuse1 = Fuse1Server(
                self.host,
                self._fuse1_port,
                self.bus,
                epoch_us=self.timebase.epoch_us,
                canvas=(self.scene.canvas_width, self.scene.canvas_height),
                tick_rate=self.scene.tick_rate,
                control_handler=self.control.handle,
                link=self.link,
                jpeg_quality=self.jpeg_quality,
            ).start()
        if self._http_port is not None:
            self.bridge = MjpegBridge(
                self.host,
                self._http_port,
                self.bus,
                meta_provider=self.meta,
                control_handler=self.control.handle,
                jpeg_quality=self.jpeg_quality,
                static_root=self.static_root,
            ).start()
        self.loop.start()
        for spec in self.source_specs:
            self._source_handles.append(
                run_source(spec, self._ingest, self.timebase)
            )
        self._started = True
        log.info(
            "serving %d sources, canvas %dx%d @ %g Hz (fuse1=%s http=%s)",
            len(self.source_specs),
            self.scene.canvas_width,
            self.scene.canvas_height,
            self.scene.tick_rate,
            self.fuse1.port if self.fuse1 else "-",
            self.bridge.port if self.bridge else "-",
        )
        return self

    def _ingest(self, frame) -> None:
        try:
            self.compositor.ingest(frame)
        except UnknownChannel:
            pass  # counted by the compositor; source keeps running

    def stop(self) -> None:
        for handle in self._source_handles:
            handle.stop()
        self._source_handles.clear()
        self.loop.stop()
        if self.fuse1 is not None:
            self.fuse1.stop()
        if self.bridge is not None:
            self.bridge.stop()
        self.bus.close()
        self._started = False
        log.info("server stopped")

    def __enter__(self) -> "StreamServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    # -- introspection --------------------------------------------------------

    @property
    def fuse1_port(self) -> int | None:
        return self.fuse1.port if self.fuse1 else None

    @property
    def http_port(self) -> int | None:
        return self.bridge.port if self.bridge else None

    def meta(self) -> dict[str, Any]:
        """Latest frame provenance plus scene state, for /meta."""
        frame = self.compositor.latest_frame
        status = self.compositor.status()
        channels = []
        if frame is not None:
            for ch in frame.channels:
                channels.append(
                    {
                        "channel": ch.channel,
                        "source_seq": ch.source_seq,
                        "capture_ts_us": ch.capture_ts,
                        "rect": list(ch.rect),
                        "src_width": ch.src_width,
                        "src_height": ch.src_height,
                    }
                )
        return {
            "frame_seq": frame.frame_seq if frame else None,
            "composite_ts_us": frame.composite_ts if frame else None,
            "width": self.scene.canvas_width,
            "height": self.scene.canvas_height,
            "overlay_height": self.scene.overlay_height,
            "tick_rate": self.scene.tick_rate,
            "channels": channels,
            "control": self.control.stats(),
            **status,
        }
