"""World model construction and the text world format."""

import math

import pytest

from deskdrive.errors import WorldFormatError
from deskdrive.geometry import Pose2D
from deskdrive.world import WorldModel, dump_world, parse_world


def test_add_wall_rejects_zero_length():
    w = WorldModel()
    with pytest.raises(ValueError):
        w.add_wall(1.0, 1.0, 1.0, 1.0)


def test_box_expands_to_four_edges():
    w = WorldModel()
    w.add_box(0.0, 0.0, 2.0, 1.0)
    assert len(w.segments) == 4
    xs = [c for seg in w.segments for c in (seg[0], seg[2])]
    ys = [c for seg in w.segments for c in (seg[1], seg[3])]
    assert min(xs) == pytest.approx(-1.0)
    assert max(xs) == pytest.approx(1.0)
    assert min(ys) == pytest.approx(-0.5)
    assert max(ys) == pytest.approx(0.5)


def test_rotated_box_corners():
    w = WorldModel()
    w.add_box(0.0, 0.0, 2.0, 2.0, yaw=math.pi / 4)
    xs = [c for seg in w.segments for c in (seg[0], seg[2])]
    assert max(xs) == pytest.approx(math.sqrt(2.0))


def test_parse_world_round_trip():
    text = """
    # test arena
    wall 0 0 4 0
    box 2.0 1.0 0.6 0.3 0.785
    start 0.5 0.5 0
    goal 3.5 1.5 1.5708
    """
    w = parse_world(text)
    assert len(w.segments) == 1 + 4
    assert w.start_pose == Pose2D(0.5, 0.5, 0.0)
    assert w.goal_pose is not None
    assert w.goal_pose.yaw == pytest.approx(1.5708)

    again = parse_world(dump_world(w))
    assert len(again.segments) == len(w.segments)
    for a, b in zip(again.segments, w.segments):
        assert a == pytest.approx(b)


def test_parse_world_reports_line_numbers():
    with pytest.raises(WorldFormatError) as err:
        parse_world("wall 0 0 4 0\nwall 1 2 three 4\n")
    assert "line 2" in str(err.value)


def test_parse_world_rejects_unknown_directive():
    with pytest.raises(WorldFormatError):
        parse_world("pillar 1 2 3\n")
