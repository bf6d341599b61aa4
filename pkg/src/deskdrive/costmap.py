"""Planning costmaps and the grid-level global planner.

A costmap reduces an occupancy grid to per-cell traversal costs:

    254  occupied (lethal)
    253  closer to an obstacle than the inflation radius
    0..252  exponential decay round(252*exp(-k*(d - r))) with distance
    255  unknown

The global planner is 4-connected A* with a Manhattan-distance heuristic.
Step cost is 1 + cell_cost/253, carried in integer arithmetic (scaled by
253) so path costs compare exactly against a brute-force shortest path.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import PlannerPreconditionError
from .geometry import Pose2D
from .slam import OCC_THRESHOLD, OccupancyGrid

COST_LETHAL = 254
COST_INSCRIBED = 253
COST_UNKNOWN = 255
COST_MAX_INFLATED = 252

# one step costs 1 + cell_cost/253; scaled by 253 it stays integral
_STEP_SCALE = 253


@dataclass(frozen=True)
class InflationParams:
    radius_inflation: float = 0.025      # m, cushion around lethal cells
    cost_scaling_factor: float = 10.0    # 1/m, decay rate
    range_obstacle: float = 3.0          # m, sensor range kept as obstacles
    range_raytrace: float = 3.5          # m, clearing range

    def __post_init__(self) -> None:
        if self.radius_inflation <= 0 or self.cost_scaling_factor <= 0:
            raise ValueError("inflation parameters must be positive")
        if self.range_obstacle <= 0 or self.range_raytrace <= 0:
            raise ValueError("sensor ranges must be positive")


@dataclass
class Costmap:
    width: int
    height: int
    resolution: float
    origin: Pose2D
    cost: np.ndarray = None  # type: ignore[assignment]
    params: InflationParams = field(default_factory=InflationParams)

    def __post_init__(self) -> None:
        if self.cost is None:
            self.cost = np.zeros((self.height, self.width), dtype=np.uint8)

    def world_to_cell(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        c, s = math.cos(self.origin.yaw), math.sin(self.origin.yaw)
        dx = np.asarray(x) - self.origin.x
        dy = np.asarray(y) - self.origin.y
        return ((c * dx + s * dy) / self.resolution,
                (-s * dx + c * dy) / self.resolution)

    def cell_center(self, col, row) -> tuple[np.ndarray, np.ndarray]:
        u = (np.asarray(col) + 0.5) * self.resolution
        v = (np.asarray(row) + 0.5) * self.resolution
        c, s = math.cos(self.origin.yaw), math.sin(self.origin.yaw)
        return self.origin.x + c * u - s * v, self.origin.y + s * u + c * v

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        col, row = self.world_to_cell(x, y)
        return int(math.floor(float(col))), int(math.floor(float(row)))

    def in_bounds(self, cell: tuple[int, int]) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height


def inflation_cost(d: float, params: InflationParams) -> int:
    """Cost of a free cell at obstacle distance d (meters)."""
    if d < params.radius_inflation:
        return COST_INSCRIBED
    c = round(COST_MAX_INFLATED
              * math.exp(-params.cost_scaling_factor * (d - params.radius_inflation)))
    return int(min(c, COST_MAX_INFLATED))


def build_costmap(grid: OccupancyGrid,
                  params: InflationParams | None = None) -> Costmap:
    """Lethal cells from occupancy, exponential inflation from the exact
    obstacle distance transform, unknowns passed through as 255."""
    params = params or InflationParams()
    occupied = grid.known & (grid.probability() >= OCC_THRESHOLD)
    cm = Costmap(width=grid.width, height=grid.height,
                 resolution=grid.resolution, origin=grid.origin, params=params)
    if occupied.any():
        d = ndimage.distance_transform_edt(~occupied, sampling=grid.resolution)
        decayed = np.rint(COST_MAX_INFLATED * np.exp(
            -params.cost_scaling_factor * (d - params.radius_inflation)))
        cost = np.minimum(decayed, COST_MAX_INFLATED).astype(np.uint8)
        cost[d < params.radius_inflation] = COST_INSCRIBED
        cost[occupied] = COST_LETHAL
    else:
        cost = np.zeros((grid.height, grid.width), dtype=np.uint8)
    cost[~grid.known] = COST_UNKNOWN
    cm.cost = cost
    return cm


def _check_endpoint(cm: Costmap, cell: tuple[int, int], label: str) -> None:
    if not cm.in_bounds(cell):
        raise PlannerPreconditionError(f"{label} cell {cell} is out of bounds")
    c = int(cm.cost[cell[1], cell[0]])
    if c == COST_LETHAL:
        raise PlannerPreconditionError(f"{label} cell {cell} is lethal")
    if c == COST_UNKNOWN:
        raise PlannerPreconditionError(f"{label} cell {cell} is unknown")


def plan_global(cm: Costmap, start: tuple[int, int],
                goal: tuple[int, int]) -> list[tuple[int, int]] | None:
    """4-connected A* from start to goal; None when no path exists.

    g accumulates integer step costs 253 + cell_cost, the heuristic is
    Manhattan distance times 253 (admissible: every step costs at least
    253), and f-ties prefer the deeper node.
    """
    _check_endpoint(cm, start, "start")
    _check_endpoint(cm, goal, "goal")
    if start == goal:
        return [start]

    cost = cm.cost
    w, h = cm.width, cm.height

    def hdist(c: tuple[int, int]) -> int:
        return (abs(c[0] - goal[0]) + abs(c[1] - goal[1])) * _STEP_SCALE

    best_g: dict[tuple[int, int], int] = {start: 0}
    parent: dict[tuple[int, int], tuple[int, int]] = {}
    counter = 0
    frontier: list[tuple[int, int, int, tuple[int, int]]] = [
        (hdist(start), 0, counter, start)]
    closed: set[tuple[int, int]] = set()

    while frontier:
        f, neg_g, _, cell = heapq.heappop(frontier)
        if cell in closed:
            continue
        if cell == goal:
            path = [cell]
            while cell != start:
                cell = parent[cell]
                path.append(cell)
            path.reverse()
            return path
        closed.add(cell)
        g = -neg_g
        cx, cy = cell
        for nx, ny in ((cx + 1, cy), (cx - 1, cy), (cx, cy + 1), (cx, cy - 1)):
            if not (0 <= nx < w and 0 <= ny < h):
                continue
            c = int(cost[ny, nx])
            if c >= COST_LETHAL:  # lethal and unknown are not traversable
                continue
            ng = g + _STEP_SCALE + c
            nb = (nx, ny)
            if nb in closed or best_g.get(nb, 1 << 62) <= ng:
                continue
            best_g[nb] = ng
            parent[nb] = cell
            counter += 1
            heapq.heappush(frontier, (ng + hdist(nb), -ng, counter, nb))
    return None


def path_cost(cm: Costmap, path: list[tuple[int, int]]) -> int:
    """Integer cost of a planned path (scaled by 253), for exact compares."""
    total = 0
    for cell in path[1:]:
        total += _STEP_SCALE + int(cm.cost[cell[1], cell[0]])
    return total
