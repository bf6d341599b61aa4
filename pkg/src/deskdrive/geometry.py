"""Planar rigid-body geometry: poses, twists and SE(2) group operations.

Convention: yaw is counter-clockwise positive and normalized to (-pi, pi].
A pose (x, y, yaw) is the transform taking body-frame points to the parent
frame (rotation by yaw, then translation by (x, y)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

# Below this rotation magnitude the closed-form twist integral switches to
# its series expansion to avoid dividing by a vanishing angle.
_SMALL_ANGLE = 1e-6


@dataclass
class Pose2D:
    """SE(2) pose: position in meters, yaw in radians."""

    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def normalized(self) -> "Pose2D":
        """Same pose with yaw wrapped to (-pi, pi]."""
        return Pose2D(self.x, self.y, wrap_angle(self.yaw))

    def to_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.yaw)


@dataclass
class Twist2D:
    """Planar body velocity: linear (m/s) and angular (rad/s) components."""

    vx: float = 0.0
    vy: float = 0.0
    omega: float = 0.0

    def norm(self) -> float:
        return math.sqrt(self.vx**2 + self.vy**2 + self.omega**2)


def wrap_angle(a: float) -> float:
    """Wrap an angle to the interval (-pi, pi].

    Raises ValueError on non-finite input.
    """
    if not math.isfinite(a):
        raise ValueError(f"non-finite angle: {a!r}")
    wrapped = math.fmod(a, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    elif wrapped > math.pi:
        wrapped -= 2.0 * math.pi
    return wrapped


def se2_exp(xi: Twist2D, dt: float) -> Pose2D:
    """Pose reached by holding a constant body twist for duration dt.

    Uses the closed-form integral of the rotating velocity; for near-zero
    rotation rates the series expansion is used instead so the result stays
    exact in the straight-line limit.
    """
    if dt < 0.0:
        raise ValueError(f"negative duration: {dt}")
    theta = xi.omega * dt
    if abs(theta) < _SMALL_ANGLE:
        # sin(t)/t ~ 1 - t^2/6, (1-cos(t))/t ~ t/2 to second order
        s = 1.0 - theta * theta / 6.0
        c = 0.5 * theta
        x = dt * (xi.vx * s - xi.vy * c)
        y = dt * (xi.vx * c + xi.vy * s)
    else:
        st = math.sin(theta)
        ct = math.cos(theta)
        x = (xi.vx * st - xi.vy * (1.0 - ct)) / xi.omega
        y = (xi.vx * (1.0 - ct) + xi.vy * st) / xi.omega
    return Pose2D(x, y, wrap_angle(theta))


def se2_log(pose: Pose2D) -> Twist2D:
    """Constant twist that reaches `pose` in unit time (inverse of se2_exp)."""
    theta = wrap_angle(pose.yaw)
    if abs(theta) < _SMALL_ANGLE:
        vx = pose.x + 0.5 * theta * pose.y
        vy = pose.y - 0.5 * theta * pose.x
    else:
        s = math.sin(theta)
        one_c = 1.0 - math.cos(theta)
        scale = theta / (2.0 * one_c)
        vx = scale * (s * pose.x + one_c * pose.y)
        vy = scale * (-one_c * pose.x + s * pose.y)
    return Twist2D(vx, vy, theta)


def compose(a: Pose2D, b: Pose2D) -> Pose2D:
    """Pose of frame b expressed through frame a (group product a*b)."""
    ca, sa = math.cos(a.yaw), math.sin(a.yaw)
    return Pose2D(
        a.x + ca * b.x - sa * b.y,
        a.y + sa * b.x + ca * b.y,
        wrap_angle(a.yaw + b.yaw),
    )


def inverse(a: Pose2D) -> Pose2D:
    """Group inverse: compose(a, inverse(a)) is the identity."""
    ca, sa = math.cos(a.yaw), math.sin(a.yaw)
    return Pose2D(
        -(ca * a.x + sa * a.y),
        -(-sa * a.x + ca * a.y),
        wrap_angle(-a.yaw),
    )


def transform_point(a: Pose2D, p: tuple[float, float]) -> tuple[float, float]:
    """Map a point from frame a into the parent frame."""
    ca, sa = math.cos(a.yaw), math.sin(a.yaw)
    return (a.x + ca * p[0] - sa * p[1], a.y + sa * p[0] + ca * p[1])


def relative_pose(a: Pose2D, b: Pose2D) -> Pose2D:
    """Pose of b expressed in frame a: compose(inverse(a), b)."""
    return compose(inverse(a), b)
