import pytest
from hypothesis import given, strategies as st

from fusecast.errors import (
    BadDimensions,
    CapacityExceeded,
    DanglingControlGroup,
    DuplicateChannel,
)
from fusecast.scene import (
    ChannelCount,
    count_noninteractive,
    count_total_channels,
    scene_to_dict,
    simple_scene,
    validate_config,
)


def make_raw(n, control_groups=True, width=1280, height=720, tick=30):
    return {
        "canvas": {"width": width, "height": height},
        "tick_rate": tick,
        "channels": [
            {"id": i, "board": True, "control_group": control_groups} for i in range(n)
        ],
    }


class TestCounts:
    def test_zero_boards(self):
        config = validate_config(make_raw(0))
        assert count_noninteractive(config) == 0

    def test_three_boards(self):
        config = validate_config(make_raw(3, control_groups=False))
        assert count_noninteractive(config) == 3

    def test_256_boards(self):
        # Oracle: count of enabled entries, the full device bound.
        config = validate_config(make_raw(256, control_groups=False))
        assert count_noninteractive(config) == len([b for b in config.boards if b.enabled])
        assert count_noninteractive(config) == 256

    def test_three_paired(self):
        config = validate_config(make_raw(3))
        assert count_total_channels(config) == ChannelCount(3, 3, 6)

    def test_board_without_group(self):
        config = validate_config(make_raw(1, control_groups=False))
        assert count_total_channels(config) == ChannelCount(1, 0, 1)

    def test_255_paired(self):
        config = validate_config(make_raw(255))
        counts = count_total_channels(config)
        # Oracle: two list lengths summed.
        assert counts.non_interactive == len(config.boards)
        assert counts.interactive == len(config.control_groups)
        assert counts == ChannelCount(255, 255, 510)

    @given(st.integers(min_value=0, max_value=256))
    def test_paired_scene_totals_2n(self, n):
        config = validate_config(make_raw(n))
        assert count_total_channels(config).total == 2 * n

    @given(st.lists(st.integers(min_value=0, max_value=255), unique=True, max_size=64))
    def test_permutation_invariance(self, ids):
        raw = {
            "canvas": {"width": 640, "height": 480},
            "tick_rate": 30,
            "channels": [{"id": i, "board": True, "control_group": True} for i in ids],
        }
        raw_rev = {**raw, "channels": list(reversed(raw["channels"]))}
        assert count_total_channels(validate_config(raw)) == count_total_channels(
            validate_config(raw_rev)
        )

    def test_counts_invariant(self):
        config = validate_config(make_raw(7))
        counts = count_total_channels(config)
        assert counts.total == counts.non_interactive + counts.interactive

    def test_disabled_boards_count_zero_but_keep_slot(self):
        raw = make_raw(4)
        raw["channels"][2]["enabled"] = False
        config = validate_config(raw)
        assert count_noninteractive(config) == 3
        assert len(config.boards) == 4  # slot retained for re-enabling


class TestValidation:
    def test_257_boards_rejected(self):
        with pytest.raises(CapacityExceeded):
            validate_config(make_raw(257, control_groups=False))

    def test_dangling_group(self):
        raw = {
            "canvas": {"width": 640, "height": 480},
            "tick_rate": 30,
            "channels": [
                {"id": 0, "board": True, "control_group": True},
                {"id": 7, "board": False, "control_group": True},
            ],
        }
        with pytest.raises(DanglingControlGroup):
            validate_config(raw)

    def test_duplicate_channel(self):
        raw = make_raw(2)
        raw["channels"].append({"id": 1, "board": True})
        with pytest.raises(DuplicateChannel):
            validate_config(raw)

    def test_bad_dimensions(self):
        with pytest.raises(BadDimensions):
            validate_config(make_raw(1, width=0))
        with pytest.raises(BadDimensions):
            validate_config(make_raw(1, tick=0))

    def test_overlay_must_fit(self):
        raw = make_raw(1, height=50)
        raw["overlay_height"] = 50
        with pytest.raises(BadDimensions):
            validate_config(raw)

    def test_valid_ten_channel_scene(self):
        config = validate_config(make_raw(10))
        assert config.canvas_width == 1280
        assert config.canvas_height == 720
        assert config.tick_rate == 30
        assert len(config.boards) == 10
        assert len(config.control_groups) == 10

    def test_serialize_validate_idempotent(self):
        config = validate_config(make_raw(5))
        again = validate_config(scene_to_dict(config))
        assert again == config
        assert scene_to_dict(again) == scene_to_dict(config)

    def test_simple_scene_helper(self):
        config = simple_scene([0, 3, 9], control_groups=False)
        assert config.board_channels() == [0, 3, 9]
        assert config.group_channels() == []
