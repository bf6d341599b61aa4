"""Bundled benchmark scene and scripted drivers.

The parking-school scene is a 4 x 4 m walled lot with a parking bay on the
east wall and a square pillar breaking the room's symmetry. It comes in two
flavors: the mapped world (what the vehicle surveyed beforehand) and the
live world, which adds two box obstacles the map knows nothing about. The
split is what makes the navigation demo honest: the global planner works
from stale knowledge and the local planner has to discover the difference.

All wall coordinates sit on 0.05 m cell centers (offset 0.025) so the
ground-truth rasterization marks single-cell rows without aliasing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from deskdrive.geometry import Pose2D, wrap_angle
from deskdrive.vehicle import VehicleState
from deskdrive.world import WorldModel

# Scene extents: interior walls at +/- 1.975 m fit an 80-cell 0.05 m grid
# centered on the origin with one free border cell all around.
_HALF = 1.975

# Parking bay: two dividers jutting west from the east wall. The mouth is
# 0.65 m wide, which leaves a planner corridor after lethal dilation and
# 0.325 m of true clearance on the centerline, comfortably above the
# 0.2 m separation bound.
_BAY_LO = -0.325
_BAY_HI = 0.325
_BAY_X = 1.425

START = Pose2D(-1.0, -0.6, 0.0)
GOAL = Pose2D(1.575, 0.0, 0.0)

# Runtime-only boxes: one dead ahead of the start pose, one flanking the
# approach lane, so the vehicle has to weave before lining up with the bay.
RUNTIME_BOXES = (
    (-0.4, -0.6, 0.15, 0.15),
    (0.7, -0.45, 0.15, 0.15),
)


@dataclass(frozen=True)
class Scenario:
    """A scene split into surveyed and as-built versions."""

    name: str
    mapped: WorldModel   # what rasterization and the static planner see
    live: WorldModel     # what the simulator raycasts against


def _lot() -> WorldModel:
    w = WorldModel(start_pose=START, goal_pose=GOAL)
    w.add_wall(-_HALF, -_HALF, _HALF, -_HALF)
    w.add_wall(_HALF, -_HALF, _HALF, _HALF)
    w.add_wall(_HALF, _HALF, -_HALF, _HALF)
    w.add_wall(-_HALF, _HALF, -_HALF, -_HALF)
    w.add_wall(_BAY_X, _BAY_LO, _HALF, _BAY_LO)
    w.add_wall(_BAY_X, _BAY_HI, _HALF, _BAY_HI)
    # pillar in the northwest quadrant; breaks rotational symmetry
    w.add_box(-0.475, 0.725, 0.3, 0.3)
    return w


def parking_school() -> Scenario:
    mapped = _lot()
    live = _lot()
    for cx, cy, bw, bh in RUNTIME_BOXES:
        live.add_box(cx, cy, bw, bh)
    return Scenario(name="parking_school", mapped=mapped, live=live)


def parking_school_lap() -> list[tuple[float, float]]:
    """Counterclockwise survey lap, clear of the pillar and the bay mouth."""
    return [
        (0.5, -1.1),
        (1.05, -0.45),
        (1.05, 0.65),
        (0.35, 1.25),
        (-0.95, 1.25),
        (-1.45, 0.6),
        (-1.45, -0.7),
        (-0.85, -1.2),
        (-0.95, -0.8),
    ]


@dataclass
class WaypointDriver:
    """Deterministic teleop: steer at the next waypoint, throttle steady.

    This is a test driver, not a planner; it reads the true vehicle state
    the way a human watching the scene would. Steering is proportional to
    the bearing error and the throttle eases off in sharp turns so the
    Ackermann geometry can keep up.
    """

    waypoints: list[tuple[float, float]]
    throttle: float = 0.45
    arrive_radius: float = 0.25
    gain: float = 2.5
    _index: int = field(default=0, repr=False)

    @property
    def finished(self) -> bool:
        return self._index >= len(self.waypoints)

    def __call__(self, t: float, state: VehicleState) -> tuple[float, float]:
        pose = state.pose
        while not self.finished:
            wx, wy = self.waypoints[self._index]
            if math.hypot(wx - pose.x, wy - pose.y) >= self.arrive_radius:
                break
            self._index += 1
        if self.finished:
            return 0.0, 0.0
        wx, wy = self.waypoints[self._index]
        err = wrap_angle(math.atan2(wy - pose.y, wx - pose.x) - pose.yaw)
        steering = max(-1.0, min(1.0, self.gain * err))
        throttle = self.throttle if abs(err) < 1.2 else 0.6 * self.throttle
        return throttle, steering


def _seg_seg_dist(a: tuple[float, float], b: tuple[float, float],
                  c: tuple[float, float], d: tuple[float, float]) -> float:
    """Minimum distance between segments ab and cd."""

    def cross(ox, oy, ax, ay, bx, by):
        return (ax - ox) * (by - oy) - (ay - oy) * (bx - ox)

    d1 = cross(c[0], c[1], d[0], d[1], a[0], a[1])
    d2 = cross(c[0], c[1], d[0], d[1], b[0], b[1])
    d3 = cross(a[0], a[1], b[0], b[1], c[0], c[1])
    d4 = cross(a[0], a[1], b[0], b[1], d[0], d[1])
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)):
        return 0.0

    def pt_seg(px, py, sx, sy, ex, ey):
        vx, vy = ex - sx, ey - sy
        L2 = vx * vx + vy * vy
        if L2 <= 0.0:
            return math.hypot(px - sx, py - sy)
        u = max(0.0, min(1.0, ((px - sx) * vx + (py - sy) * vy) / L2))
        return math.hypot(px - (sx + u * vx), py - (sy + u * vy))

    return min(
        pt_seg(a[0], a[1], c[0], c[1], d[0], d[1]),
        pt_seg(b[0], b[1], c[0], c[1], d[0], d[1]),
        pt_seg(c[0], c[1], a[0], a[1], b[0], b[1]),
        pt_seg(d[0], d[1], a[0], a[1], b[0], b[1]),
    )


def body_clearance(pose: Pose2D, world: WorldModel,
                   wheelbase: float = 0.14154) -> float:
    """Distance from the axle-to-axle body line to the nearest wall."""
    rear = (pose.x, pose.y)
    front = (pose.x + wheelbase * math.cos(pose.yaw),
             pose.y + wheelbase * math.sin(pose.yaw))
    best = math.inf
    for x1, y1, x2, y2 in world.segments:
        best = min(best, _seg_seg_dist(rear, front, (x1, y1), (x2, y2)))
    return best
