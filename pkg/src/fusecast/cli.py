"""Operator entry points: serve, client, bench."""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import signal
import sys
import threading
import time
from pathlib import Path

from . import bench as benchmod
from .client import StreamSubscriber, VerifyResult, verify_frame
from .errors import BindFailure, ConfigError, FusecastError, SetupFailure
from .metrics import LatencyReport, write_report
from .scene import load_scene_file, simple_scene
from .server import StreamServer
from .shaping import ShapedLink
from .source import parse_sources_arg

log = logging.getLogger("fusecast.cli")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BIND = 3
EXIT_CONNECT = 4
EXIT_VERIFY = 5


def parse_size(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)x(\d+)", text.strip().lower())
    if not m:
        raise ValueError(f"size must look like 1280x720, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def parse_duration(text: str) -> float:
    m = re.fullmatch(r"(\d+(?:\.\d+)?)(ms|s|m)?", text.strip().lower())
    if not m:
        raise ValueError(f"duration must look like 30s or 2m, got {text!r}")
    value = float(m.group(1))
    unit = m.group(2) or "s"
    return value * {"ms": 0.001, "s": 1.0, "m": 60.0}[unit]


def parse_bandwidth(text: str) -> float:
    """Bytes per second from '50mbps', '800kbps', or a raw bytes/s number."""
    m = re.fullmatch(r"(\d+(?:\.\d+)?)(mbps|kbps|bps)?", text.strip().lower())
    if not m:
        raise ValueError(f"bandwidth must look like 50mbps, got {text!r}")
    value = float(m.group(1))
    unit = m.group(2)
    if unit == "mbps":
        return value * 1_000_000 / 8
    if unit == "kbps":
        return value * 1_000 / 8
    if unit == "bps":
        return value / 8
    return value  # bare number: bytes per second


def parse_transport(text: str) -> tuple[str, int]:
    m = re.fullmatch(r"(fuse1):(\d+)", text.strip().lower())
    if not m:
        raise ValueError(f"transport must look like fuse1:9000, got {text!r}")
    return m.group(1), int(m.group(2))


def _parse_channel_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip()]


# ---------------------------------------------------------------------------


def cmd_serve(args: argparse.Namespace) -> int:
    try:
        if args.scene:
            scene = load_scene_file(args.scene)
            sources = parse_sources_arg(args.sources) if args.sources else []
        else:
            if not args.sources:
                raise ConfigError("either --scene or --sources is required")
            sources = parse_sources_arg(args.sources)
            width, height = parse_size(args.size)
            scene = simple_scene(
                [s.channel for s in sources],
                canvas_width=width,
                canvas_height=height,
                tick_rate=args.tick,
                overlay_height=args.overlay,
            )
        fuse1_port = parse_transport(args.transport)[1] if args.transport else None
        token = args.token or os.environ.get("FUSECAST_TOKEN") or None
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc.__class__.__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        server = StreamServer(
            scene,
            sources,
            host=args.host,
            fuse1_port=fuse1_port,
            http_port=args.http,
            token=token,
            static_root=args.console_root,
            jpeg_quality=args.quality,
        ).start()
    except BindFailure as exc:
        print(f"bind error: {exc}", file=sys.stderr)
        return EXIT_BIND
    except ConfigError as exc:
        print(f"config error: {exc.__class__.__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    print(
        f"serving: fuse1={server.fuse1_port or '-'} http={server.http_port or '-'} "
        f"channels={len(sources)}",
        flush=True,
    )
    stop_event = threading.Event()

    def on_signal(signum, frame):
        stop_event.set()

    signal.signal(signal.SIGINT, on_signal)
    signal.signal(signal.SIGTERM, on_signal)
    try:
        while not stop_event.wait(0.5):
            pass
    finally:
        if args.metrics:
            Path(args.metrics).parent.mkdir(parents=True, exist_ok=True)
            with open(args.metrics, "w", encoding="utf-8") as fh:
                json.dump(server.meta(), fh, indent=2, sort_keys=True)
                fh.write("\n")
        server.stop()
    return EXIT_OK


def cmd_client(args: argparse.Namespace) -> int:
    host, _, port_text = args.connect.partition(":")
    try:
        sub = StreamSubscriber(host or "127.0.0.1", int(port_text))
    except (OSError, ValueError) as exc:
        print(f"connect failed: {exc}", file=sys.stderr)
        return EXIT_CONNECT

    duration_s = parse_duration(args.duration)
    verify = VerifyResult()
    latencies: list[int] = []
    max_spread = 0
    frames = 0
    deadline = time.monotonic() + duration_s
    try:
        while time.monotonic() < deadline:
            received = sub.read_frame()
            frames += 1
            frame = received.frame
            for desc in frame.channels:
                latencies.append(received.arrival_ts - desc.capture_ts)
            if len(frame.channels) >= 2:
                ts = [d.capture_ts for d in frame.channels]
                max_spread = max(max_spread, max(ts) - min(ts))
            if args.verify:
                verify_frame(frame, verify)
    except FusecastError as exc:
        print(f"stream ended: {exc}", file=sys.stderr)
    finally:
        sub.close()

    mean_ms = (sum(latencies) / len(latencies) / 1000.0) if latencies else float("nan")
    print(f"frames received: {frames}")
    print(f"mean latency: {mean_ms:.2f} ms over {len(latencies)} samples")
    print(f"max sync spread: {max_spread / 1000.0:.2f} ms")
    if args.verify:
        print(
            f"verified tiles: {verify.tiles_ok}/{verify.tiles_checked} "
            f"across {verify.frames_checked} frames"
        )
        for line in verify.mismatches[:10]:
            print(f"  mismatch: {line}", file=sys.stderr)
        if not verify.ok:
            return EXIT_VERIFY
    return EXIT_OK


def _print_latency_table(results: dict[int, LatencyReport], label: str) -> None:
    print(f"\n{label} latency by channel count:")
    print(f"  {'n':>4}  {'mean ms':>9}  {'p50 ms':>9}  {'p99 ms':>9}  {'samples':>8}")
    for n in sorted(results):
        stats = results[n].summary()["latency_us"]
        print(
            f"  {n:>4}  {stats['mean'] / 1000:>9.2f}  {stats['p50'] / 1000:>9.2f}  "
            f"{stats['p99'] / 1000:>9.2f}  {stats['count']:>8}"
        )
    if len(results) > 1:
        means = {n: results[n].summary()["latency_us"]["mean"] for n in results}
        base = means[min(means)]
        worst = max(means.values())
        print(f"  flatness max(L(n))/L(n_min): {worst / base:.3f}")


def cmd_bench(args: argparse.Namespace) -> int:
    try:
        modes = [m.strip() for m in args.mode.split(",") if m.strip()]
        channels = _parse_channel_list(args.channels)
        duration_s = parse_duration(args.duration)
        canvas = parse_size(args.canvas)
        source_size = parse_size(args.source_size)
        link = None
        if args.bandwidth:
            link = ShapedLink(parse_bandwidth(args.bandwidth), args.base_delay)
        for mode in modes:
            if mode not in ("fused", "naive", "response"):
                raise ValueError(f"unknown mode {mode!r}")
        if not channels and ("fused" in modes or "naive" in modes):
            raise ValueError("--channels required for fused/naive modes")
    except ValueError as exc:
        print(f"bad parameters: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = Path(args.out) if args.out else None
    fused_results: dict[int, LatencyReport] = {}
    naive_results: dict[int, LatencyReport] = {}

    try:
        if "fused" in modes:
            for n in channels:
                print(f"fused bench: n={n}, {duration_s:.0f}s ...", flush=True)
                fused_results[n] = benchmod.run_fused_bench(
                    n, duration_s, link, canvas=canvas, source_size=source_size
                )
            _print_latency_table(fused_results, "fused")
        if "naive" in modes:
            for n in channels:
                print(f"naive bench: n={n}, {duration_s:.0f}s ...", flush=True)
                naive_results[n] = benchmod.run_naive_bench(
                    n, duration_s, link, canvas=canvas, source_size=source_size
                )
            _print_latency_table(naive_results, "naive")
        if "response" in modes:
            report = _run_response(args, duration_s)
            stats = report.summary()
            print("\nresponse time:")
            overall = stats["response_us"]
            print(
                f"  overall: mean {overall['mean'] / 1000:.1f} ms, "
                f"p95 {overall['p95'] / 1000:.1f} ms over {overall['count']} samples; "
                f"timeouts {stats['timeouts']}"
            )
            for kind, ks in stats["response_us_per_kind"].items():
                print(f"  {kind}: mean {ks['mean'] / 1000:.1f} ms, p95 {ks['p95'] / 1000:.1f} ms")
            if out_dir:
                write_report(report, out_dir / f"response.{args.format}", args.format)
    except SetupFailure as exc:
        print(f"bench setup failed: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if fused_results and naive_results:
        shared = sorted(set(fused_results) & set(naive_results))
        if shared:
            print("\nfused vs naive (mean ms):")
            for n in shared:
                f = fused_results[n].summary()["latency_us"]["mean"] / 1000
                nv = naive_results[n].summary()["latency_us"]["mean"] / 1000
                print(f"  n={n}: fused {f:.2f}  naive {nv:.2f}")

    if out_dir:
        for n, report in fused_results.items():
            write_report(report, out_dir / f"fused_n{n}.{args.format}", args.format)
        for n, report in naive_results.items():
            write_report(report, out_dir / f"naive_n{n}.{args.format}", args.format)
        print(f"\nreports written to {out_dir}")
    return EXIT_OK


def _run_response(args: argparse.Namespace, duration_s: float):
    if args.connect:
        host, _, port_text = args.connect.partition(":")
        return benchmod.response_bench(
            host or "127.0.0.1",
            int(port_text),
            script=("select",),
            count=args.count,
            channels=_parse_channel_list(args.channels) or [0],
        )
    # Self-hosted loopback target.
    n = 4
    scene = simple_scene(range(n), canvas_width=640, canvas_height=480, overlay_height=48)
    sources = benchmod.bench_sources(n, 320, 240, 30.0)
    with StreamServer(scene, sources, fuse1_port=0) as server:
        time.sleep(0.5)
        return benchmod.response_bench(
            "127.0.0.1",
            server.fuse1_port,
            script=("select",),
            count=args.count,
            channels=list(range(n)),
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusecast",
        description="Multi-channel stream fusion server, verifying client, and benchmarks",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_serve = sub.add_parser("serve", help="run the fusion server")
    p_serve.add_argument("--sources", help="synthetic:<count> or file:<dir>@<fps>, comma separated")
    p_serve.add_argument("--scene", help="scene JSON file (overrides --size/--tick)")
    p_serve.add_argument("--size", default="1280x720", help="canvas WxH (default 1280x720)")
    p_serve.add_argument("--tick", type=float, default=30.0, help="compositor tick rate Hz")
    p_serve.add_argument("--overlay", type=int, default=72, help="overlay strip height px")
    p_serve.add_argument("--transport", help="video transport, e.g. fuse1:9000")
    p_serve.add_argument("--http", type=int, help="MJPEG/console bridge port")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--token", help="control token (or FUSECAST_TOKEN env)")
    p_serve.add_argument("--metrics", help="write server stats JSON here on shutdown")
    p_serve.add_argument("--quality", type=int, default=80, help="bridge JPEG quality")
    p_serve.add_argument("--console-root", help="serve static console files from this dir")
    p_serve.set_defaults(func=cmd_serve)

    p_client = sub.add_parser("client", help="subscribe and report latency/sync stats")
    p_client.add_argument("--connect", required=True, help="host:port of a FUSE/1 server")
    p_client.add_argument("--duration", default="10s")
    p_client.add_argument("--verify", action="store_true",
                          help="decode tile signatures against provenance")
    p_client.set_defaults(func=cmd_client)

    p_bench = sub.add_parser("bench", help="run latency/response benchmarks")
    p_bench.add_argument("--mode", default="fused", help="fused,naive,response (comma list)")
    p_bench.add_argument("--channels", default="1,5,10", help="channel counts, comma separated")
    p_bench.add_argument("--duration", default="30s")
    p_bench.add_argument("--bandwidth", help="shaped link rate, e.g. 50mbps")
    p_bench.add_argument("--base-delay", type=float, default=0.0, help="link delay ms")
    p_bench.add_argument("--canvas", default="640x480")
    p_bench.add_argument("--source-size", default="320x240")
    p_bench.add_argument("--count", type=int, default=500, help="response-mode repetitions")
    p_bench.add_argument("--connect", help="response mode: use this running server")
    p_bench.add_argument("--out", help="directory for report files")
    p_bench.add_argument("--format", default="json", choices=("json", "csv"))
    p_bench.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
