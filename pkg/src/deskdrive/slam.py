"""Occupancy-grid SLAM: scan-to-map Gauss-Newton matching plus log-odds maps.

The map is a log-odds occupancy grid sampled bilinearly as a continuous
probability field M. Scan matching minimizes sum[1 - M(S_i(xi))]^2 over the
scan endpoints S_i placed by the pose, descending the Gauss-Newton normal
equations with per-iteration step clamping and backtracking. Mapping applies
saturated log-odds updates (hits at beam endpoints, misses along Bresenham
rays), gated by displacement thresholds, over a two-level resolution stack
matched coarse to fine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from deskdrive.errors import DegenerateMatchError, GridFormatError, InsufficientDataError
from deskdrive.geometry import Pose2D, wrap_angle
from deskdrive.lidar import LaserScan
from deskdrive.world import WorldModel

PROB_FREE_SAT = 0.4
PROB_OCC_SAT = 0.9
OCC_THRESHOLD = 0.65  # classification: occupied at or above, free at or below 0.35

_LOGIT_FREE = math.log(PROB_FREE_SAT / (1.0 - PROB_FREE_SAT))
_LOGIT_OCC = math.log(PROB_OCC_SAT / (1.0 - PROB_OCC_SAT))
_CONDITION_LIMIT = 1e8


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


@dataclass
class OccupancyGrid:
    """Axis-aligned log-odds grid; cell (0,0) corner sits at `origin`."""

    width: int
    height: int
    resolution: float
    origin: Pose2D
    log_odds: np.ndarray = None  # type: ignore[assignment]
    known: np.ndarray = None     # type: ignore[assignment]
    p_free_sat: float = PROB_FREE_SAT
    p_occ_sat: float = PROB_OCC_SAT

    def __post_init__(self) -> None:
        if self.log_odds is None:
            self.log_odds = np.zeros((self.height, self.width))
        if self.known is None:
            self.known = np.zeros((self.height, self.width), dtype=bool)

    @classmethod
    def create(cls, size_cells: int = 80, resolution: float = 0.05,
               center: tuple[float, float] = (0.0, 0.0)) -> "OccupancyGrid":
        """Square grid with the world point `center` at the grid middle."""
        half = size_cells * resolution / 2.0
        return cls(
            width=size_cells,
            height=size_cells,
            resolution=resolution,
            origin=Pose2D(center[0] - half, center[1] - half, 0.0),
        )

    def probability(self) -> np.ndarray:
        """Per-cell occupancy probability; unknown cells read 0.5."""
        p = 1.0 / (1.0 + np.exp(-self.log_odds))
        return np.where(self.known, p, 0.5)

    def world_to_cell(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """Continuous cell coordinates (col, row) of world points."""
        c, s = math.cos(self.origin.yaw), math.sin(self.origin.yaw)
        dx, dy = np.asarray(x) - self.origin.x, np.asarray(y) - self.origin.y
        return (c * dx + s * dy) / self.resolution, (-s * dx + c * dy) / self.resolution

    def cell_center(self, col, row) -> tuple[np.ndarray, np.ndarray]:
        u = (np.asarray(col) + 0.5) * self.resolution
        v = (np.asarray(row) + 0.5) * self.resolution
        c, s = math.cos(self.origin.yaw), math.sin(self.origin.yaw)
        return self.origin.x + c * u - s * v, self.origin.y + s * u + c * v


@dataclass(frozen=True)
class SlamConfig:
    levels: int = 2
    map_size_cells: int = 80
    map_resolution: float = 0.05
    linear_update_thresh: float = 0.4    # m
    angular_update_thresh: float = 0.06  # rad
    gn_max_iters_fine: int = 10
    gn_max_iters_coarse: int = 5
    gn_tol: float = 1e-4
    trajectory_update_rate: float = 4.0  # Hz

    def __post_init__(self) -> None:
        if self.levels < 1:
            raise ValueError("need at least one map level")


@dataclass
class SlamState:
    grids: list[OccupancyGrid]
    config: SlamConfig
    pose: Pose2D = field(default_factory=Pose2D)
    trajectory: list[tuple[float, Pose2D]] = field(default_factory=list)
    last_update_pose: Pose2D | None = None
    last_step_degenerate: bool = False
    scan_count: int = 0
    map_update_count: int = 0
    _next_traj_stamp: float = 0.0

    @classmethod
    def create(cls, config: SlamConfig | None = None,
               center: tuple[float, float] = (0.0, 0.0)) -> "SlamState":
        cfg = config or SlamConfig()
        # each coarser level halves the resolution over the same extent
        grids = [
            OccupancyGrid.create(
                size_cells=max(8, cfg.map_size_cells // (2**i)),
                resolution=cfg.map_resolution * (2**i),
                center=center,
            )
            for i in range(cfg.levels)
        ]
        return cls(grids=grids, config=cfg)


def interpolate_map(grid: OccupancyGrid, point: tuple[float, float]):
    """Bilinear probability and analytic gradient at a world point.

    Returns (value, gradient, inside); out-of-bounds queries report the
    unknown probability with zero gradient and inside=False.
    """
    col, row = grid.world_to_cell(point[0], point[1])
    # nodes are cell centers, so the interpolation lattice is shifted half a cell
    u, v = float(col) - 0.5, float(row) - 0.5
    i0, j0 = math.floor(u), math.floor(v)
    if i0 < 0 or j0 < 0 or i0 + 1 >= grid.width or j0 + 1 >= grid.height:
        return 0.5, np.zeros(2), False
    fu, fv = u - i0, v - j0
    p = grid.probability()
    v00 = p[j0, i0]
    v10 = p[j0, i0 + 1]
    v01 = p[j0 + 1, i0]
    v11 = p[j0 + 1, i0 + 1]
    value = (
        v00 * (1 - fu) * (1 - fv)
        + v10 * fu * (1 - fv)
        + v01 * (1 - fu) * fv
        + v11 * fu * fv
    )
    gx = ((v10 - v00) * (1 - fv) + (v11 - v01) * fv) / grid.resolution
    gy = ((v01 - v00) * (1 - fu) + (v11 - v10) * fu) / grid.resolution
    c, s = math.cos(grid.origin.yaw), math.sin(grid.origin.yaw)
    grad_world = np.array([c * gx - s * gy, s * gx + c * gy])
    return float(value), grad_world, True


def _interpolate_batch(prob: np.ndarray, grid: OccupancyGrid,
                       xs: np.ndarray, ys: np.ndarray):
    """Vectorized bilinear value and grid-frame gradient for many points."""
    col, row = grid.world_to_cell(xs, ys)
    u, v = col - 0.5, row - 0.5
    i0 = np.floor(u).astype(int)
    j0 = np.floor(v).astype(int)
    inside = (i0 >= 0) & (j0 >= 0) & (i0 + 1 < grid.width) & (j0 + 1 < grid.height)
    i0c, j0c = np.clip(i0, 0, grid.width - 2), np.clip(j0, 0, grid.height - 2)
    fu, fv = u - i0, v - j0
    v00 = prob[j0c, i0c]
    v10 = prob[j0c, i0c + 1]
    v01 = prob[j0c + 1, i0c]
    v11 = prob[j0c + 1, i0c + 1]
    value = (
        v00 * (1 - fu) * (1 - fv) + v10 * fu * (1 - fv)
        + v01 * (1 - fu) * fv + v11 * fu * fv
    )
    gx = ((v10 - v00) * (1 - fv) + (v11 - v01) * fv) / grid.resolution
    gy = ((v01 - v00) * (1 - fu) + (v11 - v10) * fu) / grid.resolution
    value = np.where(inside, value, 0.5)
    gx = np.where(inside, gx, 0.0)
    gy = np.where(inside, gy, 0.0)
    return value, gx, gy, inside


_STEP_CLAMP_LIN = 0.5  # m, per Gauss-Newton iteration
_STEP_CLAMP_ANG = 0.2  # rad


def match_scan(grid: OccupancyGrid, scan: LaserScan, init: Pose2D,
               max_iters: int = 10, tol: float = 1e-4,
               objective_trace: list | None = None) -> Pose2D:
    """Gauss-Newton scan-to-map alignment starting from `init`.

    Minimizes sum[1 - M(S_i)]^2. Steps are clamped, then halved while they
    would increase the objective, so accepted iterations never regress.
    When `objective_trace` is given, the initial and each accepted
    objective value are appended to it.
    """
    mask = scan.valid_mask()
    if int(mask.sum()) < 30:
        raise InsufficientDataError("scan matching needs at least 30 valid beams")
    angles = scan.spec.beam_angles()[mask]
    r = scan.ranges[mask]
    sx = r * np.cos(angles)
    sy = r * np.sin(angles)
    prob = grid.probability()

    def objective(pose: Pose2D) -> float:
        c, s = math.cos(pose.yaw), math.sin(pose.yaw)
        wx = pose.x + c * sx - s * sy
        wy = pose.y + s * sx + c * sy
        m, _, _, _ = _interpolate_batch(prob, grid, wx, wy)
        return float(np.sum((1.0 - m) ** 2))

    pose = init
    obj = objective(pose)
    if objective_trace is not None:
        objective_trace.append(obj)
    for _ in range(max_iters):
        c, s = math.cos(pose.yaw), math.sin(pose.yaw)
        wx = pose.x + c * sx - s * sy
        wy = pose.y + s * sx + c * sy
        m, gx, gy, inside = _interpolate_batch(prob, grid, wx, wy)
        # chain rule through S_i = R(psi) s_i + p
        dpsi_x = -s * sx - c * sy
        dpsi_y = c * sx - s * sy
        j_yaw = gx * dpsi_x + gy * dpsi_y
        res = 1.0 - m
        jac = np.column_stack((gx, gy, j_yaw))
        h = jac.T @ jac
        if np.linalg.cond(h) > _CONDITION_LIMIT:
            raise DegenerateMatchError("map geometry does not constrain the pose")
        delta = np.linalg.solve(h, jac.T @ res)

        lin = math.hypot(delta[0], delta[1])
        if lin > _STEP_CLAMP_LIN:
            delta[0] *= _STEP_CLAMP_LIN / lin
            delta[1] *= _STEP_CLAMP_LIN / lin
        delta[2] = min(max(delta[2], -_STEP_CLAMP_ANG), _STEP_CLAMP_ANG)

        step = 1.0
        accepted = None
        for _ in range(6):
            cand = Pose2D(
                pose.x + step * delta[0],
                pose.y + step * delta[1],
                wrap_angle(pose.yaw + step * delta[2]),
            )
            cand_obj = objective(cand)
            if cand_obj <= obj:
                accepted = (cand, cand_obj)
                break
            step *= 0.5
        if accepted is None:
            break
        moved = step * math.sqrt(delta[0] ** 2 + delta[1] ** 2 + delta[2] ** 2)
        pose, obj = accepted
        if objective_trace is not None:
            objective_trace.append(obj)
        if moved < tol:
            break
    return pose


def _bresenham(c0: int, r0: int, c1: int, r1: int) -> list[tuple[int, int]]:
    """Integer line cells from (c0,r0) to (c1,r1), endpoint included."""
    cells = []
    dc, dr = abs(c1 - c0), abs(r1 - r0)
    sc = 1 if c1 >= c0 else -1
    sr = 1 if r1 >= r0 else -1
    err = dc - dr
    c, r = c0, r0
    while True:
        cells.append((c, r))
        if c == c1 and r == r1:
            break
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c += sc
        if e2 < dc:
            err += dc
            r += sr
    return cells


def update_map(grid: OccupancyGrid, scan: LaserScan, pose: Pose2D) -> None:
    """Fold one scan into the grid at the given pose.

    Per-beam increments are accumulated into a delta array and applied with
    a single clamped addition, so the result is independent of beam order.
    Beams without echo contribute nothing (no free-space carving at the
    range limit by default).
    """
    cs, sn = math.cos(pose.yaw), math.sin(pose.yaw)
    mask = scan.valid_mask()
    angles = scan.spec.beam_angles()[mask]
    r = scan.ranges[mask]
    ex = pose.x + cs * (r * np.cos(angles)) - sn * (r * np.sin(angles))
    ey = pose.y + sn * (r * np.cos(angles)) + cs * (r * np.sin(angles))

    col0, row0 = grid.world_to_cell(pose.x, pose.y)
    c0, r0 = int(math.floor(col0)), int(math.floor(row0))
    ecol, erow = grid.world_to_cell(ex, ey)
    ecol = np.floor(ecol).astype(int)
    erow = np.floor(erow).astype(int)

    delta = np.zeros_like(grid.log_odds)
    touched = np.zeros_like(grid.known)
    h, w = grid.height, grid.width
    for c1, r1 in zip(ecol, erow):
        ray = _bresenham(c0, r0, int(c1), int(r1))
        for (cc, rr) in ray[:-1]:
            if 0 <= cc < w and 0 <= rr < h:
                delta[rr, cc] += _LOGIT_FREE
                touched[rr, cc] = True
        cc, rr = ray[-1]
        if 0 <= cc < w and 0 <= rr < h:
            delta[rr, cc] += _LOGIT_OCC
            touched[rr, cc] = True

    lo = math.log(grid.p_free_sat / (1.0 - grid.p_free_sat))
    hi = math.log(grid.p_occ_sat / (1.0 - grid.p_occ_sat))
    grid.log_odds = np.clip(grid.log_odds + delta, lo, hi)
    grid.known |= touched


def slam_step(state: SlamState, scan: LaserScan) -> SlamState:
    """Advance SLAM by one scan: match coarse-to-fine, maybe update maps.

    The first scan seeds the map at the current (origin) pose. After that a
    map update happens only when the matched pose has moved far enough from
    the last update pose; a degenerate match holds the previous pose and is
    flagged on the returned state.
    """
    cfg = state.config
    state.scan_count += 1
    state.last_step_degenerate = False

    if state.last_update_pose is None:
        for g in state.grids:
            update_map(g, scan, state.pose)
        state.last_update_pose = state.pose
        state.map_update_count += 1
        state.trajectory.append((scan.stamp, state.pose))
        state._next_traj_stamp = scan.stamp + 1.0 / cfg.trajectory_update_rate
        return state

    try:
        pose = state.pose
        for level in range(len(state.grids) - 1, -1, -1):
            iters = cfg.gn_max_iters_fine if level == 0 else cfg.gn_max_iters_coarse
            pose = match_scan(state.grids[level], scan, pose, iters, cfg.gn_tol)
        state.pose = pose.normalized()
    except DegenerateMatchError:
        state.last_step_degenerate = True
        return state

    moved = math.hypot(
        state.pose.x - state.last_update_pose.x,
        state.pose.y - state.last_update_pose.y,
    )
    turned = abs(wrap_angle(state.pose.yaw - state.last_update_pose.yaw))
    if moved > cfg.linear_update_thresh or turned > cfg.angular_update_thresh:
        for g in state.grids:
            update_map(g, scan, state.pose)
        state.last_update_pose = state.pose
        state.map_update_count += 1

    if scan.stamp + 1e-9 >= state._next_traj_stamp:
        state.trajectory.append((scan.stamp, state.pose))
        state._next_traj_stamp = scan.stamp + 1.0 / cfg.trajectory_update_rate
    return state


def export_grid(grid: OccupancyGrid, path: str) -> None:
    """Write the OGRID v1 file: text header, then row-major percent bytes."""
    header = (
        "OGRID v1\n"
        f"{grid.width} {grid.height} {grid.resolution!r} "
        f"{grid.origin.x!r} {grid.origin.y!r} {grid.origin.yaw!r}\n"
    )
    p = grid.probability()
    vals = np.rint(p * 100.0).astype(np.uint8)
    vals = np.where(grid.known, vals, np.uint8(255))
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(vals.tobytes())


def import_grid(path: str) -> OccupancyGrid:
    """Read an OGRID v1 file; inverse of export_grid on quantized values."""
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii", errors="replace").strip()
        if magic != "OGRID v1":
            raise GridFormatError(f"line 1: expected 'OGRID v1', got {magic!r}")
        fields = fh.readline().decode("ascii", errors="replace").split()
        if len(fields) != 6:
            raise GridFormatError("line 2: expected 'width height resolution x y yaw'")
        try:
            w, h = int(fields[0]), int(fields[1])
            res, ox, oy, oyaw = (float(v) for v in fields[2:])
        except ValueError:
            raise GridFormatError("line 2: non-numeric header field") from None
        body = fh.read()
    if len(body) != w * h:
        raise GridFormatError(f"line 3: expected {w * h} cells, got {len(body)}")
    vals = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    bad = (vals != 255) & ((vals < 40) | (vals > 90))
    if bad.any():
        j, i = np.argwhere(bad)[0]
        raise GridFormatError(f"line 3: cell ({i},{j}) holds invalid value {vals[j, i]}")
    grid = OccupancyGrid(width=w, height=h, resolution=res, origin=Pose2D(ox, oy, oyaw))
    known = vals != 255
    p = np.where(known, vals / 100.0, 0.5)
    with np.errstate(divide="ignore"):
        grid.log_odds = np.where(known, np.log(p / (1.0 - p)), 0.0)
    grid.known = known
    return grid


def rasterize_world(world: WorldModel, size_cells: int = 80,
                    resolution: float = 0.05,
                    center: tuple[float, float] = (0.0, 0.0)) -> OccupancyGrid:
    """Ground-truth grid: cells crossed by any wall are occupied, rest free."""
    grid = OccupancyGrid.create(size_cells, resolution, center)
    grid.log_odds.fill(math.log(grid.p_free_sat / (1.0 - grid.p_free_sat)))
    grid.known.fill(True)
    occ = math.log(grid.p_occ_sat / (1.0 - grid.p_occ_sat))
    for x1, y1, x2, y2 in world.segments:
        length = math.hypot(x2 - x1, y2 - y1)
        n = max(2, int(math.ceil(length / (resolution / 4.0))) + 1)
        ts = np.linspace(0.0, 1.0, n)
        xs = x1 + ts * (x2 - x1)
        ys = y1 + ts * (y2 - y1)
        col, row = grid.world_to_cell(xs, ys)
        col = np.floor(col).astype(int)
        row = np.floor(row).astype(int)
        ok = (col >= 0) & (col < grid.width) & (row >= 0) & (row < grid.height)
        grid.log_odds[row[ok], col[ok]] = occ
    return grid
