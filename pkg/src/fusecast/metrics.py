"""Measurement records, report assembly, smoothing, and report I/O.

Latency is render time minus capture time on a single clock; the sync
spread of a fused frame is the max-minus-min capture timestamp across its
channels; load samples pair the process CPU share with the compositor's
per-tick composite time, which stands in for render-side cost. Reports
embed their configuration echo so a run can be reproduced from its output.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .errors import EmptySeries

# Reported figures from the published system this harness compares against,
# carried in reports as context only; desk-scale runs assert ratio and bound
# properties, never these absolute milliseconds.
PUBLISHED_REFERENCE = {
    "latency_ms_by_channels": {"1": 230, "5": 231, "10": 235},
    "mean_latency_ms": 230.29,
    "response_time_ms": {"min": 50, "max": 1300, "mean": 600},
}


@dataclass(frozen=True)
class LatencyRecord:
    channel: int
    capture_ts: int
    client_render_ts: int

    @property
    def latency_us(self) -> int:
        return self.client_render_ts - self.capture_ts


@dataclass(frozen=True)
class SyncRecord:
    frame_seq: int
    spread_us: int


@dataclass(frozen=True)
class LoadSample:
    t: float  # seconds since bench start
    cpu_fraction: float  # process CPU share of the whole machine, [0, 1]
    composite_time_us: float  # mean capture() cost per tick in the window


@dataclass(frozen=True)
class ResponseSample:
    kind: str
    response_us: int
    timed_out: bool = False


def percentile(values: list[float], q: float) -> float:
    """Nearest-rank percentile; q in [0, 100]."""
    if not values:
        return math.nan
    ordered = sorted(values)
    rank = max(1, math.ceil(q / 100.0 * len(ordered)))
    return ordered[rank - 1]


def summarize(values: list[float]) -> dict[str, float]:
    if not values:
        return {"count": 0, "mean": math.nan, "p50": math.nan, "p99": math.nan,
                "min": math.nan, "max": math.nan}
    return {
        "count": len(values),
        "mean": sum(values) / len(values),
        "p50": percentile(values, 50),
        "p99": percentile(values, 99),
        "min": min(values),
        "max": max(values),
    }


def least_squares_slope(xs: list[float], ys: list[float]) -> float:
    """Slope of the least-squares line through (xs, ys)."""
    n = len(xs)
    if n < 2:
        return 0.0
    mx = sum(xs) / n
    my = sum(ys) / n
    denom = sum((x - mx) ** 2 for x in xs)
    if denom == 0:
        return 0.0
    return sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / denom


class ProcessLoadProbe:
    """CPU share of this process since the previous sample, normalized to [0,1]."""

    def __init__(self) -> None:
        self._ncpu = os.cpu_count() or 1
        self._last_cpu = self._cpu_seconds()
        self._last_wall = time.monotonic()

    @staticmethod
    def _cpu_seconds() -> float:
        t = os.times()
        return t.user + t.system

    def sample(self) -> float:
        now_cpu = self._cpu_seconds()
        now_wall = time.monotonic()
        d_wall = now_wall - self._last_wall
        frac = 0.0
        if d_wall > 0:
            frac = (now_cpu - self._last_cpu) / (d_wall * self._ncpu)
        self._last_cpu = now_cpu
        self._last_wall = now_wall
        return min(1.0, max(0.0, frac))


@dataclass
class LatencyReport:
    """One benchmark run's results plus its configuration echo."""

    config: dict[str, Any]
    latency: list[LatencyRecord] = field(default_factory=list)
    sync: list[SyncRecord] = field(default_factory=list)
    load: list[LoadSample] = field(default_factory=list)
    clock_note: str = "single monotonic clock domain (loopback)"

    def latency_values(self, channel: int | None = None) -> list[float]:
        return [
            float(r.latency_us)
            for r in self.latency
            if channel is None or r.channel == channel
        ]

    def channels(self) -> list[int]:
        return sorted({r.channel for r in self.latency})

    def summary(self) -> dict[str, Any]:
        per_channel = {
            str(ch): summarize(self.latency_values(ch)) for ch in self.channels()
        }
        spreads = [float(s.spread_us) for s in self.sync]
        cpu = [s.cpu_fraction for s in self.load]
        ts = [s.t for s in self.load]
        return {
            "latency_us": summarize(self.latency_values()),
            "latency_us_per_channel": per_channel,
            "sync_spread_us": summarize(spreads),
            "load": {
                "samples": len(self.load),
                "cpu_fraction_mean": (sum(cpu) / len(cpu)) if cpu else math.nan,
                "cpu_fraction_slope_per_s": least_squares_slope(ts, cpu),
                "composite_time_us_mean": (
                    sum(s.composite_time_us for s in self.load) / len(self.load)
                    if self.load
                    else math.nan
                ),
            },
            "published_reference": PUBLISHED_REFERENCE,
        }

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": self.config,
            "clock_note": self.clock_note,
            "summary": self.summary(),
            "records": {
                "latency": [asdict(r) for r in self.latency],
                "sync": [asdict(r) for r in self.sync],
                "load": [asdict(r) for r in self.load],
            },
        }


@dataclass
class ResponseReport:
    config: dict[str, Any]
    samples: list[ResponseSample] = field(default_factory=list)
    rtt_us: int = 0

    def kinds(self) -> list[str]:
        return sorted({s.kind for s in self.samples})

    def summary(self) -> dict[str, Any]:
        ok = [s for s in self.samples if not s.timed_out]
        per_kind = {}
        for kind in self.kinds():
            vals = [float(s.response_us) for s in ok if s.kind == kind]
            stats = summarize(vals)
            stats["p95"] = percentile(vals, 95)
            per_kind[kind] = stats
        overall = summarize([float(s.response_us) for s in ok])
        overall["p95"] = percentile([float(s.response_us) for s in ok], 95)
        return {
            "response_us": overall,
            "response_us_per_kind": per_kind,
            "timeouts": sum(1 for s in self.samples if s.timed_out),
            "control_rtt_us": self.rtt_us,
            "published_reference": PUBLISHED_REFERENCE["response_time_ms"],
        }

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": self.config,
            "summary": self.summary(),
            "records": [asdict(s) for s in self.samples],
        }


def gaussian_smooth(series: list[float], sigma: float = 1.0) -> list[float]:
    """Discrete Gaussian smoothing, radius ceil(3*sigma), length-preserving.

    The kernel is truncated at the series boundaries and renormalized over
    the in-range taps, so constant series pass through unchanged everywhere
    and interior points of an affine ramp are unchanged by symmetry.
    """
    if not series:
        raise EmptySeries("cannot smooth an empty series")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    radius = math.ceil(3 * sigma)
    kernel = [math.exp(-(k * k) / (2 * sigma * sigma)) for k in range(-radius, radius + 1)]
    n = len(series)
    out = []
    for i in range(n):
        acc = 0.0
        norm = 0.0
        for k in range(-radius, radius + 1):
            j = i + k
            if 0 <= j < n:
                w = kernel[k + radius]
                acc += w * series[j]
                norm += w
        out.append(acc / norm)
    return out


CSV_HEADER = ["t_us", "channel", "metric", "value"]


def _report_rows(report: LatencyReport | ResponseReport) -> Iterable[list[Any]]:
    for key, value in sorted(report.config.items()):
        yield [0, -1, f"config.{key}", value]
    if isinstance(report, LatencyReport):
        for r in report.latency:
            yield [r.client_render_ts, r.channel, "latency_us", r.latency_us]
        for s in report.sync:
            yield [0, -1, "sync_spread_us", s.spread_us]
        for l in report.load:
            yield [int(l.t * 1e6), -1, "cpu_fraction", l.cpu_fraction]
            yield [int(l.t * 1e6), -1, "composite_time_us", l.composite_time_us]
    else:
        for s in report.samples:
            yield [0, -1, f"response_us.{s.kind}", s.response_us]


def write_report(
    report: LatencyReport | ResponseReport, path: str | Path, fmt: str = "json"
) -> None:
    """Write a report as structured JSON or long-format CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    elif fmt == "csv":
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for row in _report_rows(report):
                writer.writerow(row)
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def read_report_json(path: str | Path) -> dict[str, Any]:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
