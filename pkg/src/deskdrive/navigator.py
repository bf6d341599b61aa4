"""Goal-directed driving: rolling local costmap, grid planning, banded
local optimization, and arrival/stuck bookkeeping in one control step.

The band optimizer refuses trajectories that pass closer than its
separation bound to any observed obstacle, so the grid planner must not
propose corridors the band can never squeeze through. The planning
costmap therefore marks every cell within `plan_dilation` of an occupied
cell as lethal before the exponential inflation is applied on top; the
dilation includes a settle margin beyond the separation bound so freshly
seeded bands start outside the penalty activation zone.

The band itself is carried between cycles: trimmed behind the vehicle,
extended toward a carrot point that slides along the global path, and
re-seeded only when replanning actually changes the path. An infeasible
optimization keeps the rejected band as the next warm start, commands a
stop, and forces a global replan; five such cycles in a row raise the
stuck flag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .costmap import (
    COST_INSCRIBED,
    COST_LETHAL,
    COST_MAX_INFLATED,
    COST_UNKNOWN,
    Costmap,
    InflationParams,
    plan_global,
)
from .errors import GoalUnreachableError, InfeasiblePlanError, \
    PlannerPreconditionError
from .geometry import Pose2D, wrap_angle
from .lidar import LaserScan
from .slam import OCC_THRESHOLD, OccupancyGrid
from .teb import (
    TebConfig,
    Trajectory,
    _MIN_DT,
    blocking_violations,
    extract_controls,
    init_band,
    normalize_command,
    optimize_teb,
)

# warm-start runaway guard: a carried band longer than this is discarded
# and re-seeded from the global path
_BAND_POSE_CAP = 50


@dataclass(frozen=True)
class GoalTolerance:
    xy: float = 0.1    # m
    yaw: float = 0.1   # rad

    def __post_init__(self) -> None:
        if self.xy <= 0 or self.yaw <= 0:
            raise ValueError("goal tolerances must be positive")


@dataclass(frozen=True)
class NavigatorConfig:
    teb: TebConfig = field(default_factory=TebConfig)
    tolerance: GoalTolerance = field(default_factory=GoalTolerance)
    inflation: InflationParams = field(default_factory=InflationParams)
    local_costmap_size: float = 1.5   # m, side of the rolling window
    plan_horizon: float = 0.6         # m, band carrot distance along path
    carrot_clearance: float = 0.26    # m, preferred carrot separation
    plan_dilation: float = 0.25       # m, lethal dilation for planning
    stuck_cycles: int = 5
    control_rate: float = 10.0        # Hz
    band_spacing: float = 0.1         # m, band seed spacing
    replan_cooldown: int = 5          # cycles between blocked-path replans

    def __post_init__(self) -> None:
        if self.local_costmap_size <= 0 or self.plan_horizon <= 0:
            raise ValueError("window and horizon must be positive")
        # the band must stay inside the window where obstacles are known
        if self.plan_horizon > self.local_costmap_size / 2:
            raise ValueError("plan horizon exceeds local obstacle knowledge")
        if self.plan_dilation < self.teb.min_obstacle_dist:
            raise ValueError("plan dilation below band separation bound")
        if self.stuck_cycles < 1 or self.control_rate <= 0:
            raise ValueError("stuck threshold and control rate must be positive")
        if self.band_spacing <= 0:
            raise ValueError("band spacing must be positive")
        if self.replan_cooldown < 0:
            raise ValueError("replan cooldown must not be negative")


@dataclass
class NavigatorState:
    """Mutable bookkeeping carried across control cycles."""

    goal: Pose2D | None = None
    path: list[tuple[float, float]] | None = None
    band: Trajectory | None = None
    runtime_cells: set[tuple[int, int]] = field(default_factory=set)
    planning_costmap: Costmap | None = None
    infeasible_streak: int = 0
    arrived: bool = False
    stuck: bool = False
    replan_needed: bool = True
    cycles: int = 0
    last_replan: int = -(10 ** 9)


@dataclass
class NavDiagnostics:
    """Per-cycle snapshot serialized over the bridge for the cockpit."""

    command: tuple[float, float]
    arrived: bool
    stuck: bool
    feasible: bool
    replanned: bool
    goal: tuple[float, float, float]
    global_path: list[tuple[float, float]]
    band: list[tuple[float, float, float]]
    local_extent: tuple[float, float, float, float]
    obstacle_count: int
    infeasible_streak: int

    def to_dict(self) -> dict:
        return {
            "command": [float(self.command[0]), float(self.command[1])],
            "arrived": self.arrived,
            "stuck": self.stuck,
            "feasible": self.feasible,
            "replanned": self.replanned,
            "goal": [float(v) for v in self.goal],
            "global_path": [[float(x), float(y)] for x, y in self.global_path],
            "band": [[float(x), float(y), float(t)] for x, y, t in self.band],
            "local_extent": [float(v) for v in self.local_extent],
            "obstacle_count": int(self.obstacle_count),
            "infeasible_streak": int(self.infeasible_streak),
        }


def _inflate_occupied(occupied: np.ndarray, known: np.ndarray,
                      resolution: float, params: InflationParams) -> np.ndarray:
    """Per-cell costs from an occupancy mask: lethal on the mask, inscribed
    inside the cushion radius, exponential decay beyond, 255 where unknown."""
    if occupied.any():
        d = ndimage.distance_transform_edt(~occupied, sampling=resolution)
        decayed = np.rint(COST_MAX_INFLATED * np.exp(
            -params.cost_scaling_factor * (d - params.radius_inflation)))
        cost = np.minimum(decayed, COST_MAX_INFLATED).astype(np.uint8)
        cost[d < params.radius_inflation] = COST_INSCRIBED
        cost[occupied] = COST_LETHAL
    else:
        cost = np.zeros(occupied.shape, dtype=np.uint8)
    cost[~known] = COST_UNKNOWN
    return cost


def build_planning_costmap(static_map: OccupancyGrid,
                           runtime_cells: set[tuple[int, int]],
                           cfg: NavigatorConfig) -> Costmap:
    """Static occupancy plus runtime-observed cells, dilated by the band
    separation bound, then inflated with the standard exponential law."""
    occupied = static_map.known & (static_map.probability() >= OCC_THRESHOLD)
    occupied = occupied.copy()
    for col, row in runtime_cells:
        occupied[row, col] = True
    if occupied.any():
        d = ndimage.distance_transform_edt(
            ~occupied, sampling=static_map.resolution)
        occupied = d <= cfg.plan_dilation
    cost = _inflate_occupied(occupied, static_map.known,
                             static_map.resolution, cfg.inflation)
    cm = Costmap(width=static_map.width, height=static_map.height,
                 resolution=static_map.resolution, origin=static_map.origin,
                 params=cfg.inflation)
    cm.cost = cost
    return cm


def build_local_costmap(pose: Pose2D, scan: LaserScan, cfg: NavigatorConfig,
                        resolution: float) -> tuple[Costmap, list[tuple[float, float]]]:
    """Axis-aligned rolling window around the vehicle, populated from one
    scan. Returns the costmap and its lethal cell centers (the obstacle
    points handed to the band optimizer)."""
    half = cfg.local_costmap_size / 2.0
    n = max(int(round(cfg.local_costmap_size / resolution)), 1)
    origin = Pose2D(pose.x - half, pose.y - half, 0.0)
    cm = Costmap(width=n, height=n, resolution=resolution, origin=origin,
                 params=cfg.inflation)

    mask = scan.valid_mask() & (scan.ranges <= cfg.inflation.range_obstacle)
    angles = scan.spec.beam_angles()[mask] + pose.yaw
    r = scan.ranges[mask]
    px = pose.x + r * np.cos(angles)
    py = pose.y + r * np.sin(angles)

    occupied = np.zeros((n, n), dtype=bool)
    cols = np.floor((px - origin.x) / resolution).astype(int)
    rows = np.floor((py - origin.y) / resolution).astype(int)
    inside = (cols >= 0) & (cols < n) & (rows >= 0) & (rows < n)
    occupied[rows[inside], cols[inside]] = True

    cm.cost = _inflate_occupied(occupied, np.ones((n, n), dtype=bool),
                                resolution, cfg.inflation)
    rr, cc = np.nonzero(occupied)
    ox, oy = cm.cell_center(cc, rr)
    obstacles = list(zip(np.atleast_1d(ox).tolist(), np.atleast_1d(oy).tolist()))
    return cm, obstacles


def _update_runtime_layer(state: NavigatorState, static_map: OccupancyGrid,
                          obstacles: list[tuple[float, float]]) -> list[tuple[int, int]]:
    """Record observed obstacle cells absent from the static map; returns
    only the newly added cells."""
    if not obstacles:
        return []
    occ = static_map.known & (static_map.probability() >= OCC_THRESHOLD)
    pts = np.asarray(obstacles)
    cols, rows = static_map.world_to_cell(pts[:, 0], pts[:, 1])
    cols = np.floor(cols).astype(int)
    rows = np.floor(rows).astype(int)
    new: list[tuple[int, int]] = []
    for col, row in zip(cols.tolist(), rows.tolist()):
        if not (0 <= col < static_map.width and 0 <= row < static_map.height):
            continue
        if occ[row, col] or (col, row) in state.runtime_cells:
            continue
        state.runtime_cells.add((col, row))
        new.append((col, row))
    return new


def _clear_runtime_layer(state: NavigatorState, static_map: OccupancyGrid,
                         pose: Pose2D, scan: LaserScan) -> None:
    """Forget runtime cells the scan now sees through.

    A beam at the cell's bearing reaching well past the cell is evidence
    the cell was pose-estimate smear or the obstacle moved; occluded cells
    (beam stops short) are kept. Only meaningful for full-circle scans,
    where bearing-to-beam lookup wraps cleanly.
    """
    if not state.runtime_cells:
        return
    spec = scan.spec
    if abs(spec.beam_count * spec.angle_increment - 2.0 * math.pi) > 1e-6:
        return
    cells = np.array(sorted(state.runtime_cells), dtype=int)
    cx, cy = static_map.cell_center(cells[:, 0], cells[:, 1])
    dx = np.asarray(cx, dtype=float) - pose.x
    dy = np.asarray(cy, dtype=float) - pose.y
    dist = np.hypot(dx, dy)
    bearing = np.arctan2(dy, dx) - pose.yaw
    idx = np.rint((bearing - spec.angle_min) / spec.angle_increment).astype(int)
    idx %= spec.beam_count
    # margin below one cell so cells hugging a true face clear while the
    # face cell itself (beam stops within intra-cell offset) survives
    seen_past = (np.asarray(scan.ranges)[idx]
                 > dist + 0.75 * static_map.resolution)
    for col, row in cells[seen_past].tolist():
        state.runtime_cells.discard((int(col), int(row)))


def _path_blocked(path: list[tuple[float, float]],
                  new_cells: list[tuple[int, int]],
                  static_map: OccupancyGrid, threshold: float) -> bool:
    pts = np.asarray(path)
    for col, row in new_cells:
        cx, cy = static_map.cell_center(col, row)
        if np.hypot(pts[:, 0] - cx, pts[:, 1] - cy).min() < threshold:
            return True
    return False


def _line_clear(cm: Costmap, a: tuple[float, float],
                b: tuple[float, float]) -> bool:
    dist = math.hypot(b[0] - a[0], b[1] - a[1])
    steps = max(int(dist / (cm.resolution / 2.0)), 1)
    for i in range(steps + 1):
        t = i / steps
        col, row = cm.cell_of(a[0] + t * (b[0] - a[0]),
                              a[1] + t * (b[1] - a[1]))
        if not cm.in_bounds((col, row)):
            return False
        if cm.cost[row, col] >= COST_INSCRIBED:
            return False
    return True


def _shortcut(path: list[tuple[float, float]],
              cm: Costmap) -> list[tuple[float, float]]:
    """Greedy line-of-sight shortcutting, then re-densified at half the
    cell size so nearest-vertex math keeps working on the result."""
    out = [path[0]]
    i = 0
    while i < len(path) - 1:
        j = len(path) - 1
        while j > i + 1 and not _line_clear(cm, path[i], path[j]):
            j -= 1
        out.append(path[j])
        i = j

    dense: list[tuple[float, float]] = [out[0]]
    step = cm.resolution
    for (ax, ay), (bx, by) in zip(out, out[1:]):
        seg = math.hypot(bx - ax, by - ay)
        n = max(int(math.ceil(seg / step)), 1)
        for k in range(1, n + 1):
            t = k / n
            dense.append((ax + t * (bx - ax), ay + t * (by - ay)))
    return dense


def _replan(state: NavigatorState, static_map: OccupancyGrid, pose: Pose2D,
            goal: Pose2D, cfg: NavigatorConfig) -> bool:
    """Refresh the global path; returns True when the polyline changed
    (which invalidates the carried band)."""
    state.planning_costmap = build_planning_costmap(
        static_map, state.runtime_cells, cfg)
    cm = state.planning_costmap

    # The vehicle may legally stand inside the dilated ring (separation is
    # measured to obstacle cells, dilation adds a settle margin), which
    # would leave no lethal-free start cell. Free the pocket around the
    # pose, but never a truly occupied cell.
    occ = static_map.known & (static_map.probability() >= OCC_THRESHOLD)
    for col, row in state.runtime_cells:
        occ[row, col] = True
    c0, r0 = cm.cell_of(pose.x, pose.y)
    if cm.in_bounds((c0, r0)) and cm.cost[r0, c0] == COST_LETHAL:
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                c2, r2 = c0 + dc, r0 + dr
                if (cm.in_bounds((c2, r2)) and not occ[r2, c2]
                        and cm.cost[r2, c2] == COST_LETHAL):
                    cm.cost[r2, c2] = COST_MAX_INFLATED
    try:
        cells = plan_global(cm, cm.cell_of(pose.x, pose.y),
                            cm.cell_of(goal.x, goal.y))
    except PlannerPreconditionError as exc:
        raise GoalUnreachableError(f"global planning failed: {exc}") from exc
    if cells is None:
        raise GoalUnreachableError("no traversable path to the goal")
    cols = np.array([c for c, _ in cells])
    rows = np.array([r for _, r in cells])
    xs, ys = cm.cell_center(cols, rows)
    raw = list(zip(np.atleast_1d(xs).tolist(), np.atleast_1d(ys).tolist()))
    path = _shortcut(raw, cm)

    changed = (state.path is None or len(state.path) != len(path)
               or not np.allclose(np.asarray(state.path), np.asarray(path)))
    state.path = path
    if changed:
        state.band = None
    return changed


def _select_carrot(path: list[tuple[float, float]], pose: Pose2D,
                   goal: Pose2D, obstacles: list[tuple[float, float]],
                   cfg: NavigatorConfig) -> tuple[Pose2D, list[tuple[float, float]]]:
    """Pick the band goal: the point `plan_horizon` along the path from the
    vehicle, walked back to the last point with comfortable clearance, or
    the true goal once it falls inside the horizon."""
    pts = np.asarray(path)
    i0 = int(np.argmin(np.hypot(pts[:, 0] - pose.x, pts[:, 1] - pose.y)))
    tail = pts[i0:]
    if len(tail) == 1:
        return goal, [tuple(tail[0])]
    seg = np.hypot(np.diff(tail[:, 0]), np.diff(tail[:, 1]))
    arc = np.concatenate(([0.0], np.cumsum(seg)))
    if arc[-1] <= cfg.plan_horizon:
        return goal, [tuple(p) for p in tail]

    j = int(np.searchsorted(arc, cfg.plan_horizon))
    j = min(max(j, 1), len(tail) - 1)
    if obstacles:
        obs = np.asarray(obstacles)
        clear = np.hypot(tail[:, None, 0] - obs[None, :, 0],
                         tail[:, None, 1] - obs[None, :, 1]).min(axis=1)
        k = j
        while k > 1 and clear[k] < cfg.carrot_clearance:
            k -= 1
        if clear[k] < cfg.carrot_clearance:
            k = int(np.argmax(clear[1:j + 1])) + 1
    else:
        k = j
    after = tail[min(k + 1, len(tail) - 1)]
    before = tail[k - 1]
    yaw = math.atan2(after[1] - before[1], after[0] - before[0])
    carrot = Pose2D(float(tail[k][0]), float(tail[k][1]), yaw)
    return carrot, [tuple(p) for p in tail[:k + 1]]


def _advance_band(band: Trajectory, pose: Pose2D,
                  cfg: NavigatorConfig) -> Trajectory | None:
    """Trim band poses behind the vehicle and pin the start to the current
    pose; None when the band is fully consumed."""
    pts = np.array([[p.x, p.y] for p in band.poses])
    k = int(np.argmin(np.hypot(pts[:, 0] - pose.x, pts[:, 1] - pose.y)))
    if k >= len(band.poses) - 1:
        return None
    poses = [pose] + band.poses[k + 1:]
    dts = list(band.dts[k:])
    first = math.hypot(band.poses[k + 1].x - pose.x,
                       band.poses[k + 1].y - pose.y)
    dts[0] = max(first / cfg.teb.lin_vel_max, _MIN_DT)
    return Trajectory(poses=poses, dts=dts)


def _extend_band(band: Trajectory, carrot: Pose2D,
                 cfg: NavigatorConfig) -> Trajectory:
    """Slide the band end to the current carrot, appending chord waypoints
    when the carrot has moved more than one seed spacing ahead."""
    end = band.poses[-1]
    gap = math.hypot(carrot.x - end.x, carrot.y - end.y)
    poses = list(band.poses)
    dts = list(band.dts)
    if gap <= cfg.band_spacing:
        if gap > 1e-12 or abs(wrap_angle(carrot.yaw - end.yaw)) > 1e-12:
            poses[-1] = carrot
            prev = poses[-2]
            seg = math.hypot(carrot.x - prev.x, carrot.y - prev.y)
            dts[-1] = max(dts[-1], seg / cfg.teb.lin_vel_max, _MIN_DT)
        return Trajectory(poses=poses, dts=dts)

    yaw = math.atan2(carrot.y - end.y, carrot.x - end.x)
    n = max(int(gap // cfg.band_spacing), 1)
    seg = gap / n
    for i in range(1, n):
        t = i / n
        poses.append(Pose2D(end.x + t * (carrot.x - end.x),
                            end.y + t * (carrot.y - end.y), yaw))
        dts.append(max(seg / cfg.teb.lin_vel_max, _MIN_DT))
    poses.append(carrot)
    dts.append(max(seg / cfg.teb.lin_vel_max, _MIN_DT))
    return Trajectory(poses=poses, dts=dts)


def navigate_step(pose: Pose2D, scan: LaserScan, static_map: OccupancyGrid,
                  goal: Pose2D | None, state: NavigatorState,
                  cfg: NavigatorConfig | None = None,
                  ) -> tuple[tuple[float, float], NavDiagnostics]:
    """One control cycle; mutates `state` and returns the normalized
    command with a diagnostics snapshot.

    Raises when no goal is set and when global planning cannot reach the
    goal at all. Local infeasibility is handled by kind: clearance or
    timing violations stop the vehicle, while plain rate or radius
    breaches drive on (the actuators saturate at the real limits) so the
    scene keeps evolving instead of freezing the optimizer in place.
    Either way the streak escalates to the stuck flag and a recovery
    replan after `stuck_cycles` consecutive failures.
    """
    cfg = cfg or NavigatorConfig()
    if goal is None:
        raise PlannerPreconditionError("no navigation goal set")
    if state.goal != goal:
        state.goal = goal
        state.path = None
        state.band = None
        state.infeasible_streak = 0
        state.arrived = False
        state.stuck = False
        state.replan_needed = True
    state.cycles += 1

    local_cm, obstacles = build_local_costmap(
        pose, scan, cfg, static_map.resolution)
    extent = (local_cm.origin.x, local_cm.origin.y,
              local_cm.origin.x + cfg.local_costmap_size,
              local_cm.origin.y + cfg.local_costmap_size)
    new_cells = _update_runtime_layer(state, static_map, obstacles)
    _clear_runtime_layer(state, static_map, pose, scan)

    def _diag(cmd, feasible, replanned):
        return NavDiagnostics(
            command=cmd,
            arrived=state.arrived,
            stuck=state.stuck,
            feasible=feasible,
            replanned=replanned,
            goal=(goal.x, goal.y, goal.yaw),
            global_path=list(state.path or []),
            band=[(p.x, p.y, p.yaw) for p in state.band.poses]
            if state.band else [],
            local_extent=extent,
            obstacle_count=len(obstacles),
            infeasible_streak=state.infeasible_streak,
        )

    pos_err = math.hypot(goal.x - pose.x, goal.y - pose.y)
    yaw_err = abs(wrap_angle(goal.yaw - pose.yaw))
    if pos_err <= cfg.tolerance.xy and yaw_err <= cfg.tolerance.yaw:
        state.arrived = True
        state.infeasible_streak = 0
        state.stuck = False
        return (0.0, 0.0), _diag((0.0, 0.0), True, False)
    state.arrived = False

    if state.path is None or state.band is None:
        state.replan_needed = True
    elif new_cells and _path_blocked(state.path, new_cells, static_map,
                                     cfg.plan_dilation):
        state.replan_needed = True

    # rate-limit replans that merely react to newly seen cells: the band's
    # own obstacle terms handle the interim, and back-to-back replans flip
    # between near-tied detour sides while the obstacle is half revealed
    replanned = False
    if state.replan_needed and (
            state.path is None
            or state.cycles - state.last_replan >= cfg.replan_cooldown):
        _replan(state, static_map, pose, goal, cfg)
        state.replan_needed = False
        state.last_replan = state.cycles
        replanned = True

    carrot, tail = _select_carrot(state.path, pose, goal, obstacles, cfg)
    if state.band is None:
        band = init_band(tail, pose, carrot, cfg.teb,
                         spacing=cfg.band_spacing)
    else:
        carried = _advance_band(state.band, pose, cfg)
        # re-seed when the carrot left the band's reach (a replan flipped
        # the path to another homotopy) or the carry overgrew; extending
        # toward a jumped carrot zigzags and grows without bound
        if (carried is None or len(carried.poses) > _BAND_POSE_CAP
                or math.hypot(carrot.x - carried.poses[-1].x,
                              carrot.y - carried.poses[-1].y)
                > cfg.plan_horizon):
            band = init_band(tail, pose, carrot, cfg.teb,
                             spacing=cfg.band_spacing)
        else:
            band = _extend_band(carried, carrot, cfg)

    try:
        band = optimize_teb(band, obstacles, cfg.teb)
        state.band = band
        state.infeasible_streak = 0
        state.stuck = False
        v, delta = extract_controls(band, cfg.teb.wheelbase)
        cmd = normalize_command(v, delta, cfg.teb)
        return cmd, _diag(cmd, True, replanned)
    except InfeasiblePlanError as exc:
        state.band = exc.band if exc.band is not None else band
        state.infeasible_streak += 1
        # keep optimizing the carried band against the same path first: a
        # reflex replan can flip the detour side and discard the warm
        # start mid-convergence; replan as recovery once genuinely wedged
        if state.infeasible_streak >= cfg.stuck_cycles:
            state.stuck = True
            state.replan_needed = True
        # a band that only breaches rate or radius bounds still drives:
        # the actuators saturate at the real limits and the vehicle tracks
        # a slightly wider arc, whereas a zero command freezes the scene
        # and locks the optimizer into the same infeasible equilibrium.
        # Clearance or timing violations, or an unclassified failure,
        # stop the vehicle.
        if exc.violations and not blocking_violations(exc.violations):
            v, delta = extract_controls(state.band, cfg.teb.wheelbase)
            cmd = normalize_command(v, delta, cfg.teb)
            return cmd, _diag(cmd, False, replanned)
        return (0.0, 0.0), _diag((0.0, 0.0), False, replanned)
