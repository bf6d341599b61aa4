"""Polygonal world description: segment soup plus start/goal poses.

Worlds are flat collections of 2D line segments (walls and box edges).
The text format is one directive per line:

    wall x1 y1 x2 y2
    box  cx cy w h yaw
    start x y yaw
    goal  x y yaw

with '#' comments and blank lines ignored. Units are meters and radians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from deskdrive.errors import WorldFormatError
from deskdrive.geometry import Pose2D


@dataclass
class WorldModel:
    """Static scene: line segments, a start pose and an optional goal pose."""

    segments: list[tuple[float, float, float, float]] = field(default_factory=list)
    start_pose: Pose2D = field(default_factory=Pose2D)
    goal_pose: Pose2D | None = None

    def add_wall(self, x1: float, y1: float, x2: float, y2: float) -> None:
        if math.hypot(x2 - x1, y2 - y1) <= 0.0:
            raise ValueError(f"zero-length segment ({x1},{y1})-({x2},{y2})")
        self.segments.append((float(x1), float(y1), float(x2), float(y2)))

    def add_box(self, cx: float, cy: float, w: float, h: float, yaw: float = 0.0) -> None:
        """Append the four edges of an oriented rectangle."""
        if w <= 0.0 or h <= 0.0:
            raise WorldFormatError(f"box with non-positive extent {w}x{h}")
        c, s = math.cos(yaw), math.sin(yaw)
        corners = []
        for dx, dy in ((-w / 2, -h / 2), (w / 2, -h / 2), (w / 2, h / 2), (-w / 2, h / 2)):
            corners.append((cx + c * dx - s * dy, cy + s * dx + c * dy))
        for i in range(4):
            x1, y1 = corners[i]
            x2, y2 = corners[(i + 1) % 4]
            self.add_wall(x1, y1, x2, y2)

    def segment_array(self) -> np.ndarray:
        """Segments as an (n, 4) float array for vectorized ray casting."""
        if not self.segments:
            return np.zeros((0, 4))
        return np.asarray(self.segments, dtype=float)


def parse_world(text: str) -> WorldModel:
    """Parse the world text format; raises WorldFormatError with line numbers."""
    world = WorldModel()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind, args = parts[0].lower(), parts[1:]
        try:
            values = [float(v) for v in args]
        except ValueError as exc:
            raise WorldFormatError(f"line {lineno}: non-numeric argument in {raw!r}") from exc
        try:
            if kind == "wall" and len(values) == 4:
                world.add_wall(*values)
            elif kind == "box" and len(values) in (4, 5):
                world.add_box(*values)
            elif kind == "start" and len(values) == 3:
                world.start_pose = Pose2D(*values)
            elif kind == "goal" and len(values) == 3:
                world.goal_pose = Pose2D(*values)
            else:
                raise WorldFormatError(f"line {lineno}: unknown directive {raw!r}")
        except ValueError as exc:
            raise WorldFormatError(f"line {lineno}: {exc}") from None
    return world


def load_world(path: str) -> WorldModel:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_world(fh.read())


def dump_world(world: WorldModel) -> str:
    """Serialize a world back to the text format (walls only, boxes flattened)."""
    lines = ["# deskdrive world"]
    for x1, y1, x2, y2 in world.segments:
        lines.append(f"wall {x1!r} {y1!r} {x2!r} {y2!r}")
    sp = world.start_pose
    lines.append(f"start {sp.x!r} {sp.y!r} {sp.yaw!r}")
    if world.goal_pose is not None:
        gp = world.goal_pose
        lines.append(f"goal {gp.x!r} {gp.y!r} {gp.yaw!r}")
    return "\n".join(lines) + "\n"


def save_world(world: WorldModel, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_world(world))
