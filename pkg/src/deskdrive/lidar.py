"""Planar LIDAR simulation: beam geometry and ray casting against walls.

Beams are indexed counter-clockwise starting at `angle_min` relative to the
sensor heading. Returns outside the [range_min, range_max] window are
reported as +inf, matching the no-echo convention used throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from deskdrive.errors import ConfigError
from deskdrive.geometry import Pose2D
from deskdrive.world import WorldModel

_EPS = 1e-12


@dataclass(frozen=True)
class LidarSpec:
    beam_count: int = 360
    angle_min: float = -math.pi            # rad, relative to sensor heading
    angle_increment: float = 2.0 * math.pi / 360.0
    range_min: float = 0.15                # m
    range_max: float = 12.0                # m
    rate: float = 7.0                      # scans per second

    def __post_init__(self) -> None:
        if self.beam_count < 2:
            raise ConfigError("need at least two beams")
        if self.angle_increment <= 0.0:
            raise ConfigError("angle increment must be positive")
        if not 0.0 <= self.range_min < self.range_max:
            raise ConfigError("range window must satisfy 0 <= min < max")
        if self.rate <= 0.0:
            raise ConfigError("scan rate must be positive")

    def beam_angles(self) -> np.ndarray:
        """Sensor-frame angle of every beam."""
        return self.angle_min + np.arange(self.beam_count) * self.angle_increment


@dataclass
class LaserScan:
    """One sweep of ranges; +inf marks beams with no echo in the window."""

    stamp: float
    ranges: np.ndarray
    spec: LidarSpec = field(default_factory=LidarSpec)

    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.ranges)

    def points(self, pose: Pose2D | None = None) -> np.ndarray:
        """Cartesian (n, 2) echo points, sensor frame or transformed by pose."""
        mask = self.valid_mask()
        angles = self.spec.beam_angles()[mask]
        r = self.ranges[mask]
        pts = np.column_stack((r * np.cos(angles), r * np.sin(angles)))
        if pose is not None:
            c, s = math.cos(pose.yaw), math.sin(pose.yaw)
            rot = np.array([[c, -s], [s, c]])
            pts = pts @ rot.T + np.array([pose.x, pose.y])
        return pts


def cast_scan(
    world: WorldModel,
    pose: Pose2D,
    spec: LidarSpec,
    stamp: float = 0.0,
    rng: np.random.Generator | None = None,
    noise_sigma: float = 0.0,
) -> LaserScan:
    """Cast all beams from `pose` against the world's wall segments.

    Intersection is solved in batch over the beam x segment grid. Optional
    Gaussian range noise is applied before the range window, so a noisy
    return can still fall out of the window and become +inf.
    """
    angles = spec.beam_angles() + pose.yaw
    dirs = np.column_stack((np.cos(angles), np.sin(angles)))  # (B, 2)

    segs = world.segment_array()
    if segs.shape[0] == 0:
        ranges = np.full(spec.beam_count, np.inf)
        return LaserScan(stamp=stamp, ranges=ranges, spec=spec)

    p1 = segs[:, 0:2]                      # (S, 2)
    d = segs[:, 2:4] - p1                  # (S, 2)
    rel = p1 - np.array([pose.x, pose.y])  # (S, 2)

    # Beam o + t*u meets segment p1 + s*d where t = cross(rel, d) / cross(u, d).
    denom = dirs[:, 0:1] * d[:, 1] - dirs[:, 1:2] * d[:, 0]          # (B, S)
    cross_rel_d = rel[:, 0] * d[:, 1] - rel[:, 1] * d[:, 0]          # (S,)
    cross_rel_u = dirs[:, 0:1] * rel[:, 1] - dirs[:, 1:2] * rel[:, 0]  # (B, S)

    with np.errstate(divide="ignore", invalid="ignore"):
        t = cross_rel_d[None, :] / denom
        s = -cross_rel_u / denom
    hit = (np.abs(denom) > _EPS) & (t > _EPS) & (s >= 0.0) & (s <= 1.0)
    t = np.where(hit, t, np.inf)
    ranges = t.min(axis=1)

    if noise_sigma > 0.0:
        if rng is None:
            raise ValueError("range noise requires a random generator")
        finite = np.isfinite(ranges)
        ranges[finite] += rng.normal(0.0, noise_sigma, int(finite.sum()))

    ranges[(ranges < spec.range_min) | (ranges > spec.range_max)] = np.inf
    return LaserScan(stamp=stamp, ranges=ranges, spec=spec)
