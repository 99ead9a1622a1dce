import math
import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fusecast.compositor import (
    BG_COLOR,
    PLACEHOLDER_COLOR,
    SELECTED_FILL,
    CanvasLayout,
    Compositor,
    DisplayBoard,
    grid_layout,
)
from fusecast.errors import InvalidLayout, UnknownChannel
from fusecast.scene import simple_scene
from fusecast.source import Frame, decode_scaled_tile, synthetic_frame
from fusecast.timebase import Timebase


def reference_grid(n, w, h, overlay):
    """Independent oracle for the tiling formula."""
    if n == 0:
        return []
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    tw, th = w // cols, (h - overlay) // rows
    out = []
    for i in range(n):
        out.append(((i % cols) * tw, (i // cols) * th, tw, th))
    return out


class TestGridLayout:
    def test_single_tile_fills_region(self):
        assert grid_layout(1, 1280, 720, 72) == [(0, 0, 1280, 648)]

    def test_four_tiles(self):
        rects = grid_layout(4, 1280, 720, 72)
        assert rects == [
            (0, 0, 640, 324),
            (640, 0, 640, 324),
            (0, 324, 640, 324),
            (640, 324, 640, 324),
        ]

    def test_three_tiles_leaves_empty_cell(self):
        rects = grid_layout(3, 1280, 720, 72)
        assert [(r[0], r[1]) for r in rects] == [(0, 0), (640, 0), (0, 324)]
        assert all(r[2] == 640 and r[3] == 324 for r in rects)

    def test_zero(self):
        assert grid_layout(0, 1280, 720, 72) == []

    @given(
        n=st.integers(min_value=0, max_value=256),
        w=st.integers(min_value=64, max_value=4096),
        h=st.integers(min_value=64, max_value=4096),
        overlay=st.integers(min_value=0, max_value=63),
    )
    @settings(max_examples=200, deadline=None)
    def test_matches_reference_and_stays_in_bounds(self, n, w, h, overlay):
        rects = grid_layout(n, w, h, overlay)
        assert rects == reference_grid(n, w, h, overlay)
        for x, y, tw, th in rects:
            assert x + tw <= w
            assert y + th <= h - overlay
        # Pairwise non-overlap.
        for i, a in enumerate(rects):
            for b in rects[i + 1 :]:
                no_overlap = (
                    a[0] + a[2] <= b[0]
                    or b[0] + b[2] <= a[0]
                    or a[1] + a[3] <= b[1]
                    or b[1] + b[3] <= a[1]
                )
                assert no_overlap or a[2] == 0 or a[3] == 0


def make_compositor(n=3, *, canvas=(1280, 720), overlay=72, src=(320, 240)):
    scene = simple_scene(
        range(n),
        canvas_width=canvas[0],
        canvas_height=canvas[1],
        overlay_height=overlay,
    )
    tb = Timebase.start()
    comp = Compositor(scene, tb)
    return comp, tb, src


def feed(comp, tb, channel, seq, src=(320, 240), ts=None):
    base = synthetic_frame(channel, seq, src[0], src[1])
    frame = Frame(
        channel=channel,
        seq=seq,
        capture_ts=tb.now_us() if ts is None else ts,
        width=base.width,
        height=base.height,
        pixels=base.pixels,
    )
    comp.ingest(frame)
    return frame


class TestIngest:
    def test_monotone_register(self):
        comp, tb, src = make_compositor()
        feed(comp, tb, 0, 5)
        feed(comp, tb, 0, 4)
        assert comp.register_view(0)[0] == 5

    def test_empty_register_fills(self):
        comp, tb, src = make_compositor()
        assert comp.register_view(0) is None
        feed(comp, tb, 0, 1)
        assert comp.register_view(0)[0] == 1

    def test_unknown_channel_counted(self):
        comp, tb, src = make_compositor(n=2)
        with pytest.raises(UnknownChannel):
            feed(comp, tb, 9, 0)
        assert comp.unknown_drops == 1

    def test_racing_producers_last_seq_wins(self):
        comp, tb, src = make_compositor(n=1, canvas=(640, 480), src=(64, 16))
        barrier = threading.Barrier(2)

        def worker(seq):
            barrier.wait()
            feed(comp, tb, 0, seq, src=(64, 16))

        for trial in range(20):
            threads = [
                threading.Thread(target=worker, args=(2 * trial + 1,)),
                threading.Thread(target=worker, args=(2 * trial + 2,)),
            ]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            # Linearizable max-seq oracle: highest seq wins regardless of order.
            assert comp.register_view(0)[0] == 2 * trial + 2


class TestCapture:
    def test_pixel_oracle_three_channels(self):
        comp, tb, src = make_compositor(3)
        for ch, seq in ((0, 10), (1, 20), (2, 30)):
            feed(comp, tb, ch, seq)
        fused = comp.capture(tb.now_us())
        assert len(fused.channels) == 3
        image = fused.as_array()
        for desc in fused.channels:
            x, y, w, h = desc.rect
            tile = image[y : y + h, x : x + w]
            assert decode_scaled_tile(tile, desc.src_width, desc.src_height) == (
                desc.channel,
                desc.source_seq,
            )

    def test_zero_channels(self):
        comp, tb, _ = make_compositor(0)
        fused = comp.capture(tb.now_us())
        assert fused.channels == ()
        image = fused.as_array()
        region = image[: comp.region_h]
        assert (region == np.array(BG_COLOR, np.uint8)).all()

    def test_stalled_channel_placeholder_and_omitted(self):
        comp, tb, src = make_compositor(2)
        feed(comp, tb, 0, 1, ts=tb.now_us() - 6_000_000)  # stalled 6 s ago
        feed(comp, tb, 1, 7)
        fused = comp.capture(tb.now_us())
        assert [d.channel for d in fused.channels] == [1]
        image = fused.as_array()
        layout = comp.current_layout()
        stalled_rect = next(b.rect for b in layout.boards if b.channel == 0)
        x, y, w, h = stalled_rect
        tile = image[y : y + h, x : x + w]
        assert (tile == np.array(PLACEHOLDER_COLOR, np.uint8)).all()
        live_rect = next(d.rect for d in fused.channels if d.channel == 1)
        x, y, w, h = live_rect
        assert decode_scaled_tile(image[y : y + h, x : x + w], 320, 240) == (1, 7)

    def test_empty_register_placeholder(self):
        comp, tb, src = make_compositor(2)
        feed(comp, tb, 0, 1)
        fused = comp.capture(tb.now_us())
        assert [d.channel for d in fused.channels] == [0]

    def test_composite_ts_covers_capture_ts(self):
        comp, tb, src = make_compositor(2)
        feed(comp, tb, 0, 1)
        feed(comp, tb, 1, 2)
        fused = comp.capture(tb.now_us())
        for desc in fused.channels:
            assert fused.composite_ts >= desc.capture_ts

    def test_capture_never_blocks_when_empty(self):
        comp, tb, src = make_compositor(8)
        t0 = time.perf_counter()
        comp.capture(tb.now_us())
        assert time.perf_counter() - t0 < 1.0 / 30.0

    def test_fixed_output_size_across_n(self):
        sizes = {}
        for n in (1, 4, 16):
            comp, tb, src = make_compositor(n)
            for ch in range(n):
                feed(comp, tb, ch, ch + 1)
            fused = comp.capture(tb.now_us())
            sizes[n] = len(fused.pixels)
        assert len(set(sizes.values())) == 1

    def test_tile_area_formula_exact(self):
        # c1 region 1280x648 divides evenly for 1, 4 and 16 tiles.
        for n in (1, 4, 16):
            rects = grid_layout(n, 1280, 720, 72)
            cols = math.ceil(math.sqrt(n))
            rows = math.ceil(n / cols)
            for _, _, tw, th in rects:
                assert tw * th * cols * rows == 1280 * 648

    def test_frame_seq_monotone(self):
        comp, tb, src = make_compositor(1)
        seqs = [comp.capture(tb.now_us()).frame_seq for _ in range(5)]
        assert seqs == list(range(5))


class TestLayoutChanges:
    def test_select_focus_provenance(self):
        comp, tb, src = make_compositor(4)
        for ch in range(4):
            feed(comp, tb, ch, ch + 1)
        comp.capture(tb.now_us())
        applied = comp.select(2)
        assert applied == comp.next_frame_seq
        fused = comp.capture(tb.now_us())
        assert fused.frame_seq == applied
        assert [d.channel for d in fused.channels] == [2]
        assert fused.channels[0].rect == (0, 0, 1280, 648)

    def test_grid_restores_all(self):
        comp, tb, src = make_compositor(4)
        for ch in range(4):
            feed(comp, tb, ch, ch + 1)
        comp.select(1)
        comp.capture(tb.now_us())
        comp.set_grid()
        fused = comp.capture(tb.now_us())
        assert [d.channel for d in fused.channels] == [0, 1, 2, 3]

    def test_focus_unknown_channel(self):
        comp, tb, src = make_compositor(4)
        with pytest.raises(UnknownChannel):
            comp.set_focus(99)
        layout = CanvasLayout("focus", (), 72, focus_channel=99)
        with pytest.raises(InvalidLayout):
            comp.apply_layout(layout)

    def test_toggle_visibility_involution(self):
        comp, tb, src = make_compositor(3)
        for ch in range(3):
            feed(comp, tb, ch, 1)
        before = [d.channel for d in comp.capture(tb.now_us()).channels]
        comp.toggle_visibility(1)
        mid = [d.channel for d in comp.capture(tb.now_us()).channels]
        assert mid == [0, 2]
        comp.toggle_visibility(1)
        after = [d.channel for d in comp.capture(tb.now_us()).channels]
        assert after == before

    def test_layout_applies_at_next_tick_only(self):
        comp, tb, src = make_compositor(4)
        for ch in range(4):
            feed(comp, tb, ch, 1)
        first = comp.capture(tb.now_us())
        assert len(first.channels) == 4
        applied = comp.set_focus(0)
        # The already-captured frame is unaffected; the next one reflects it.
        assert applied == first.frame_seq + 1
        second = comp.capture(tb.now_us())
        assert len(second.channels) == 1

    def test_apply_layout_roundtrip(self):
        comp, tb, src = make_compositor(2)
        feed(comp, tb, 0, 1)
        feed(comp, tb, 1, 1)
        layout = CanvasLayout("focus", (), 72, focus_channel=1)
        applied = comp.apply_layout(layout)
        fused = comp.capture(tb.now_us())
        assert fused.frame_seq == applied
        assert [d.channel for d in fused.channels] == [1]


class TestOverlay:
    def test_selected_cell_highlight(self):
        comp, tb, src = make_compositor(3)
        for ch in range(3):
            feed(comp, tb, ch, 1)
        comp.select(1)
        fused = comp.capture(tb.now_us())
        image = fused.as_array()
        strip = image[comp.region_h :]
        cell_w = min(96, 1280 // 3)
        selected_cell = strip[10, cell_w + 10]
        unselected_cell = strip[10, 10]
        assert tuple(selected_cell) == SELECTED_FILL
        assert tuple(unselected_cell) != SELECTED_FILL

    def test_overlay_constant_between_state_changes(self):
        comp, tb, src = make_compositor(2)
        feed(comp, tb, 0, 1)
        a = comp.capture(tb.now_us()).as_array()[comp.region_h :]
        b = comp.capture(tb.now_us()).as_array()[comp.region_h :]
        assert (a == b).all()

    def test_no_overlay_when_zero_height(self):
        scene = simple_scene([0], canvas_width=640, canvas_height=480, overlay_height=0)
        comp = Compositor(scene, Timebase.start())
        fused = comp.capture(comp.timebase.now_us())
        assert fused.height == 480
        assert comp.region_h == 480


class TestSyncSpread:
    def test_spread_bound_within_frame(self):
        comp, tb, src = make_compositor(3)
        now = tb.now_us()
        for ch in range(3):
            feed(comp, tb, ch, 1, ts=now - ch * 10_000)
        fused = comp.capture(tb.now_us())
        ts = [d.capture_ts for d in fused.channels]
        assert max(ts) - min(ts) == 20_000
