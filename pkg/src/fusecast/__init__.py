"""fusecast: fuse N live video channels into one low-latency stream.

The server samples every channel's latest frame at a fixed tick, composites
them onto a single canvas together with an interaction overlay, and ships
the result as one stream per subscriber regardless of channel count. The
bench harness measures latency, synchronization spread, scalability, and
interaction response time against a naive per-channel baseline on a shaped
link.
"""

from .compositor import (
    CanvasLayout,
    ChannelProvenance,
    Compositor,
    CompositorLoop,
    DisplayBoard,
    FusedFrame,
    grid_layout,
)
from .control import ControlAck, ControlCommand, ControlPlane, measure_response
from .metrics import LatencyReport, ResponseReport, gaussian_smooth, write_report
from .scene import (
    ChannelCount,
    SceneConfig,
    count_noninteractive,
    count_total_channels,
    simple_scene,
    validate_config,
)
from .server import StreamServer
from .shaping import ShapedLink, TokenBucket
from .source import Frame, SourceSpec, decode_signature, run_source, synthetic_frame
from .timebase import Timebase, monotonic_us
from .transport import FrameBus, Fuse1Server, MjpegBridge

__version__ = "0.1.0"

__all__ = [
    "CanvasLayout",
    "ChannelCount",
    "ChannelProvenance",
    "Compositor",
    "CompositorLoop",
    "ControlAck",
    "ControlCommand",
    "ControlPlane",
    "DisplayBoard",
    "Frame",
    "FrameBus",
    "FusedFrame",
    "Fuse1Server",
    "LatencyReport",
    "MjpegBridge",
    "ResponseReport",
    "SceneConfig",
    "ShapedLink",
    "SourceSpec",
    "StreamServer",
    "Timebase",
    "TokenBucket",
    "count_noninteractive",
    "count_total_channels",
    "decode_signature",
    "gaussian_smooth",
    "grid_layout",
    "measure_response",
    "monotonic_us",
    "run_source",
    "simple_scene",
    "synthetic_frame",
    "validate_config",
    "write_report",
]
