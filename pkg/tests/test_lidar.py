"""Ray casting and scan geometry."""

import math

import numpy as np
import pytest

from deskdrive.errors import ConfigError
from deskdrive.geometry import Pose2D
from deskdrive.lidar import LaserScan, LidarSpec, cast_scan
from deskdrive.world import WorldModel


def beam_index(spec, angle):
    return int(np.argmin(np.abs(spec.beam_angles() - angle)))


def test_spec_validation():
    with pytest.raises(ConfigError):
        LidarSpec(beam_count=1)
    with pytest.raises(ConfigError):
        LidarSpec(range_min=2.0, range_max=1.0)


def test_empty_world_all_inf():
    scan = cast_scan(WorldModel(), Pose2D(), LidarSpec())
    assert np.all(np.isinf(scan.ranges))
    assert not scan.valid_mask().any()


def test_perpendicular_wall_one_meter():
    w = WorldModel()
    w.add_wall(1.0, -5.0, 1.0, 5.0)
    spec = LidarSpec()
    scan = cast_scan(w, Pose2D(), spec)
    assert scan.ranges[beam_index(spec, 0.0)] == pytest.approx(1.0, abs=1e-9)
    # oblique beam at 45 degrees sees the wall at sqrt(2)
    assert scan.ranges[beam_index(spec, math.pi / 4)] == pytest.approx(
        math.sqrt(2.0), abs=1e-9
    )
    # beams facing away see nothing
    assert math.isinf(scan.ranges[beam_index(spec, math.pi)])


def test_wall_below_min_range_is_inf():
    w = WorldModel()
    w.add_wall(0.10, -5.0, 0.10, 5.0)
    spec = LidarSpec()
    scan = cast_scan(w, Pose2D(), spec)
    assert math.isinf(scan.ranges[beam_index(spec, 0.0)])


def test_nearest_of_stacked_walls_wins():
    w = WorldModel()
    w.add_wall(2.0, -5.0, 2.0, 5.0)
    w.add_wall(1.0, -5.0, 1.0, 5.0)
    spec = LidarSpec()
    scan = cast_scan(w, Pose2D(), spec)
    assert scan.ranges[beam_index(spec, 0.0)] == pytest.approx(1.0, abs=1e-9)


def test_pose_rotation_shifts_beams():
    w = WorldModel()
    w.add_wall(1.0, -5.0, 1.0, 5.0)
    spec = LidarSpec()
    scan = cast_scan(w, Pose2D(0, 0, math.pi / 2), spec)
    # with the sensor rotated +90 deg the wall sits at relative angle -90
    assert scan.ranges[beam_index(spec, -math.pi / 2)] == pytest.approx(1.0, abs=1e-9)


def test_scan_determinism():
    w = WorldModel()
    w.add_box(0.0, 0.0, 4.0, 4.0)
    a = cast_scan(w, Pose2D(0.3, -0.2, 0.7), LidarSpec())
    b = cast_scan(w, Pose2D(0.3, -0.2, 0.7), LidarSpec())
    assert np.array_equal(a.ranges, b.ranges)


def test_noise_reproducible_and_windowed():
    w = WorldModel()
    w.add_box(0.0, 0.0, 4.0, 4.0)
    a = cast_scan(w, Pose2D(), LidarSpec(), rng=np.random.default_rng(7), noise_sigma=0.005)
    b = cast_scan(w, Pose2D(), LidarSpec(), rng=np.random.default_rng(7), noise_sigma=0.005)
    assert np.array_equal(a.ranges, b.ranges)
    clean = cast_scan(w, Pose2D(), LidarSpec())
    assert not np.array_equal(a.ranges, clean.ranges)
    finite = a.ranges[np.isfinite(a.ranges)]
    assert np.all(finite >= LidarSpec().range_min)
    assert np.all(finite <= LidarSpec().range_max)


def test_noise_without_rng_rejected():
    w = WorldModel()
    w.add_box(0.0, 0.0, 4.0, 4.0)
    with pytest.raises(ValueError):
        cast_scan(w, Pose2D(), LidarSpec(), noise_sigma=0.01)


def test_points_reproject_onto_walls():
    w = WorldModel()
    w.add_box(0.0, 0.0, 4.0, 4.0)
    pose = Pose2D(0.5, -0.3, 0.4)
    scan = cast_scan(w, pose, LidarSpec())
    pts = scan.points(pose)
    # every echo point lies on one of the four box walls
    on_wall = (
        (np.abs(np.abs(pts[:, 0]) - 2.0) < 1e-9) | (np.abs(np.abs(pts[:, 1]) - 2.0) < 1e-9)
    )
    assert on_wall.all()


def test_scan_inside_box_sees_all_beams():
    w = WorldModel()
    w.add_box(0.0, 0.0, 4.0, 4.0)
    scan = cast_scan(w, Pose2D(), LidarSpec())
    assert scan.valid_mask().all()
