"""Timed-elastic-band local planning for a car-like vehicle.

A band is a sequence of poses with a positive time interval between each
consecutive pair. Optimization deforms interior poses and all intervals
to minimize total squared transition time, with quadratic hinge penalties
keeping velocity, acceleration, turning radius, and obstacle clearance
inside their bounds and a strong equality penalty tying consecutive poses
to a shared circular arc (the nonholonomic rolling constraint).

Hinge violations are measured in units of a fraction of each bound
(`hinge_scale`), which stiffens the quadratic penalties enough that the
time term cannot buy meaningful bound violations, while keeping all
residual slopes within a similar magnitude so the damped steps stay well
conditioned. Obstacle penalties activate at `min_obstacle_dist +
obstacle_margin` so the optimized band settles above the strict clearance
line instead of a hair below it, and intervals are floored at the fastest
rate-feasible reparameterization of the poses, which keeps the one-sided
rate hinges quiet during linearization. A final uniform time dilation
repairs any marginal rate or acceleration excess the soft equilibrium
leaves behind; it cannot mask shape errors, which the hard feasibility
check still rejects.

Controls for execution come from the first band segment: linear velocity
from the pose displacement over its interval (signed by driving
direction) and steering from the bicycle-model relation
delta = atan(wheelbase * yaw_rate / v).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InfeasiblePlanError, OptimizationFailedError
from .geometry import Pose2D, wrap_angle

_MIN_DT = 1e-3

# resolution-adjustment split budget: generous for any band the planner
# seeds (horizon / spacing plus slack) yet finite under kink cascades
_RESIZE_POSE_CAP = 60


@dataclass(frozen=True)
class TebConfig:
    lin_vel_max: float = 0.2            # m/s
    ang_vel_max: float = 0.5236         # rad/s
    lin_acc_max: float = 0.15           # m/s^2
    ang_acc_max: float = 0.3927         # rad/s^2
    turning_radius_min: float = 0.24515  # m
    wheelbase: float = 0.14154           # m
    steering_limit: float = 0.5236       # rad, for command normalization
    min_obstacle_dist: float = 0.2       # m, from the rear-axle point
    inner_iters: int = 3
    outer_iters: int = 3
    dt_ref: float = 0.3                  # s
    dt_hysteresis: float = 0.1           # s
    weight_time: float = 1.0
    weight_velocity: float = 2.0
    weight_acceleration: float = 1.0
    weight_kinematics: float = 1000.0
    weight_obstacle: float = 50.0
    hinge_scale: float = 0.1             # violation unit, fraction of bound
    obstacle_margin: float = 0.05        # m, extra standoff while optimizing

    def __post_init__(self) -> None:
        bounds = (self.lin_vel_max, self.ang_vel_max, self.lin_acc_max,
                  self.ang_acc_max, self.turning_radius_min, self.wheelbase,
                  self.steering_limit, self.min_obstacle_dist, self.dt_ref,
                  self.hinge_scale, self.obstacle_margin)
        if min(bounds) <= 0:
            raise ValueError("kinodynamic bounds must be positive")
        if self.inner_iters < 1 or self.outer_iters < 1:
            raise ValueError("iteration counts must be at least 1")


@dataclass
class Trajectory:
    """Band of poses s_1..s_n and intervals dt_1..dt_{n-1}."""

    poses: list[Pose2D]
    dts: list[float]

    def __post_init__(self) -> None:
        if len(self.poses) < 2:
            raise ValueError("a band needs at least two poses")
        if len(self.dts) != len(self.poses) - 1:
            raise ValueError("need exactly one interval per pose pair")
        if any(dt <= 0 for dt in self.dts):
            raise ValueError("intervals must be positive")

    @property
    def total_time(self) -> float:
        return float(sum(self.dts))


def init_band(global_path: list[tuple[float, float]], start_pose: Pose2D,
              goal_pose: Pose2D, cfg: TebConfig,
              spacing: float = 0.1) -> Trajectory:
    """Seed a band along a world-space polyline.

    Points are resampled roughly every `spacing` meters, interior headings
    follow the local chord (previous to next point), endpoints take the
    given poses exactly, and each interval starts at
    segment_length / lin_vel_max.
    """
    if not global_path:
        raise ValueError("global path is empty")
    pts = [(float(x), float(y)) for x, y in global_path]
    resampled = [pts[0]]
    for x, y in pts[1:]:
        px, py = resampled[-1]
        d = math.hypot(x - px, y - py)
        if d >= spacing:
            n = int(d // spacing)
            for i in range(1, n + 1):
                t = i * spacing / d
                resampled.append((px + t * (x - px), py + t * (y - py)))
    if math.hypot(pts[-1][0] - resampled[-1][0],
                  pts[-1][1] - resampled[-1][1]) > 1e-9:
        resampled.append(pts[-1])

    coords = [(start_pose.x, start_pose.y)]
    if len(resampled) > 2:
        coords += resampled[1:-1]
    coords.append((goal_pose.x, goal_pose.y))

    poses: list[Pose2D] = []
    for i, (x, y) in enumerate(coords):
        if i == 0:
            poses.append(start_pose)
        elif i == len(coords) - 1:
            poses.append(goal_pose)
        else:
            ax, ay = coords[i - 1]
            bx, by = coords[i + 1]
            poses.append(Pose2D(x, y, math.atan2(by - ay, bx - ax)))
    dts = []
    for a, b in zip(poses, poses[1:]):
        seg = math.hypot(b.x - a.x, b.y - a.y)
        dts.append(max(seg / cfg.lin_vel_max, _MIN_DT))
    return Trajectory(poses=poses, dts=dts)


def adjust_resolution(band: Trajectory, cfg: TebConfig) -> Trajectory:
    """One pass of the band resolution rule: split intervals longer than
    dt_ref + hysteresis at their midpoint, merge away the pose after
    intervals shorter than dt_ref - hysteresis. Endpoints never move.

    Splitting stops at a hard pose cap: a sharp heading kink keeps its
    halves above the split threshold no matter how often they divide, and
    without the cap repeated passes would inflate the band geometrically.
    """
    hi = cfg.dt_ref + cfg.dt_hysteresis
    lo = cfg.dt_ref - cfg.dt_hysteresis

    poses = list(band.poses)
    dts = list(band.dts)

    k = 0
    while k < len(dts):
        if dts[k] > hi and len(poses) < _RESIZE_POSE_CAP:
            a, b = poses[k], poses[k + 1]
            mid = Pose2D((a.x + b.x) / 2.0, (a.y + b.y) / 2.0,
                         math.atan2(math.sin(a.yaw) + math.sin(b.yaw),
                                    math.cos(a.yaw) + math.cos(b.yaw)))
            half = dts[k] / 2.0
            poses.insert(k + 1, mid)
            dts[k] = half
            dts.insert(k + 1, half)
            k += 2
        else:
            k += 1

    # merge pass: drop the interior pose ending a too-short interval
    k = 0
    while k < len(dts) and len(poses) > 2:
        if dts[k] < lo and k + 1 < len(dts):
            dts[k] = dts[k] + dts[k + 1]
            del dts[k + 1]
            del poses[k + 1]
        else:
            k += 1
    return Trajectory(poses=poses, dts=dts)


def _segment_rates(poses: np.ndarray, dts: np.ndarray,
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Signed linear speed and yaw rate per segment."""
    dx = poses[1:, 0] - poses[:-1, 0]
    dy = poses[1:, 1] - poses[:-1, 1]
    dist = np.hypot(dx, dy)
    heading = poses[:-1, 2]
    sign = np.where(dx * np.cos(heading) + dy * np.sin(heading) >= 0, 1.0, -1.0)
    v = sign * dist / dts
    dyaw = np.mod(poses[1:, 2] - poses[:-1, 2] + math.pi, 2 * math.pi) - math.pi
    omega = dyaw / dts
    return v, omega


def _residuals(poses: np.ndarray, dts: np.ndarray, obstacles: np.ndarray,
               assoc: np.ndarray, cfg: TebConfig) -> np.ndarray:
    """Weighted residual vector of the soft-constrained least squares."""
    v, omega = _segment_rates(poses, dts)
    res = [math.sqrt(cfg.weight_time) * dts]

    s_v = cfg.hinge_scale * cfg.lin_vel_max
    s_w = cfg.hinge_scale * cfg.ang_vel_max
    wv = math.sqrt(cfg.weight_velocity)
    res.append(wv * np.maximum(np.abs(v) - cfg.lin_vel_max, 0.0) / s_v)
    res.append(wv * np.maximum(np.abs(omega) - cfg.ang_vel_max, 0.0) / s_w)

    if len(dts) > 1:
        mid = 0.5 * (dts[:-1] + dts[1:])
        s_a = cfg.hinge_scale * cfg.lin_acc_max
        s_aw = cfg.hinge_scale * cfg.ang_acc_max
        wa = math.sqrt(cfg.weight_acceleration)
        res.append(wa * np.maximum(
            np.abs(np.diff(v)) / mid - cfg.lin_acc_max, 0.0) / s_a)
        res.append(wa * np.maximum(
            np.abs(np.diff(omega)) / mid - cfg.ang_acc_max, 0.0) / s_aw)

    # consecutive poses must lie on a common arc: the chord has to be
    # collinear with the mean direction of the two headings; normalizing
    # by chord length turns the residual into an angle-like measure so
    # short segments are held as rigidly as long ones
    dx = poses[1:, 0] - poses[:-1, 0]
    dy = poses[1:, 1] - poses[:-1, 1]
    chord = np.maximum(np.hypot(dx, dy), 1e-9)
    ca = np.cos(poses[:-1, 2]) + np.cos(poses[1:, 2])
    sa = np.sin(poses[:-1, 2]) + np.sin(poses[1:, 2])
    wk = math.sqrt(cfg.weight_kinematics)
    res.append(wk * (ca * dy - sa * dx) / chord)

    # minimum turning radius as a rate inequality: |v| >= r_min * |omega|
    res.append(wk * np.maximum(
        cfg.turning_radius_min * np.abs(omega) - np.abs(v), 0.0) / s_v)

    if obstacles.size:
        d = np.hypot(poses[assoc, 0] - obstacles[:, 0],
                     poses[assoc, 1] - obstacles[:, 1])
        reach = cfg.min_obstacle_dist + cfg.obstacle_margin
        res.append(math.sqrt(cfg.weight_obstacle)
                   * np.maximum(reach - d, 0.0) / cfg.obstacle_margin)
    return np.concatenate(res)


def _associate(poses: np.ndarray, obstacles: np.ndarray) -> np.ndarray:
    """Nearest band pose index for every obstacle point."""
    d2 = ((poses[None, :, :2] - obstacles[:, None, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def _pack(poses: list[Pose2D], dts: list[float]) -> np.ndarray:
    interior = [(p.x, p.y, p.yaw) for p in poses[1:-1]]
    flat = np.asarray(interior, dtype=float).ravel()
    return np.concatenate([flat, np.asarray(dts, dtype=float)])


def _unpack(x: np.ndarray, first: Pose2D, last: Pose2D,
            n_interior: int) -> tuple[np.ndarray, np.ndarray]:
    interior = x[:3 * n_interior].reshape(n_interior, 3)
    dts = np.maximum(x[3 * n_interior:], _MIN_DT)
    poses = np.vstack([
        np.array([[first.x, first.y, first.yaw]]),
        interior,
        np.array([[last.x, last.y, last.yaw]]),
    ])
    return poses, dts


def _project_intervals(poses: np.ndarray, dts: np.ndarray,
                       cfg: TebConfig) -> np.ndarray:
    """Lengthen intervals until segment rates respect their bounds.

    Pure time reparameterization: poses stay put, so arc geometry,
    turning radii, and clearances are unaffected, while |v| and |omega|
    land exactly at or below their limits and accelerations contract.
    """
    dist = np.hypot(poses[1:, 0] - poses[:-1, 0],
                    poses[1:, 1] - poses[:-1, 1])
    dyaw = np.abs(np.mod(poses[1:, 2] - poses[:-1, 2] + math.pi,
                         2 * math.pi) - math.pi)
    floor = np.maximum(dist / cfg.lin_vel_max, dyaw / cfg.ang_vel_max)
    return np.maximum(np.maximum(dts, floor), _MIN_DT)


def _rescale_time(poses: np.ndarray, dts: np.ndarray,
                  cfg: TebConfig) -> np.ndarray:
    """Uniform time dilation repairing rate and acceleration violations.

    Under dts -> s*dts the speeds scale as 1/s and the accelerations as
    1/s^2 while the pose sequence (arc geometry, turning radii, obstacle
    clearances) stays untouched, so the smallest s >= 1 satisfying every
    rate and acceleration bound is an exact fix for timing the soft
    penalty equilibrium leaves marginally off. Shape errors (radius,
    clearance) are invariant and stay with the optimizer.
    """
    v, omega = _segment_rates(poses, dts)
    s = 1.0
    if v.size:
        s = max(s, np.abs(v).max() / cfg.lin_vel_max,
                np.abs(omega).max() / cfg.ang_vel_max)
    if v.size > 1:
        mid = 0.5 * (dts[:-1] + dts[1:])
        acc = np.abs(np.diff(v)) / mid
        ang = np.abs(np.diff(omega)) / mid
        s = max(s, math.sqrt(acc.max() / cfg.lin_acc_max),
                math.sqrt(ang.max() / cfg.ang_acc_max))
    if s <= 1.0 + 1e-12:
        return dts
    return dts * s


def optimize_teb(band: Trajectory, obstacles: list[tuple[float, float]],
                 cfg: TebConfig,
                 objective_trace: list | None = None) -> Trajectory:
    """Deform the band: outer loop of resolution adjustment and obstacle
    re-association around damped Gauss-Newton inner iterations.

    When `objective_trace` is given, one list per outer iteration is
    appended holding the objective value at entry and after every accepted
    inner step (the objective changes meaning between outer iterations as
    the band is resized and obstacles re-associated).

    Raises an optimization error when the objective turns non-finite and
    an infeasibility error when the optimized band still violates its
    hard bounds (signalling the caller to replan).
    """
    obs = np.asarray(obstacles, dtype=float).reshape(-1, 2)
    result = band
    for _ in range(cfg.outer_iters):
        result = adjust_resolution(result, cfg)
        first, last = result.poses[0], result.poses[-1]
        n_int = len(result.poses) - 2
        x = _pack(result.poses, result.dts)
        poses_arr, _ = _unpack(x, first, last, n_int)
        assoc = _associate(poses_arr, obs) if obs.size else np.zeros(0, dtype=int)

        # the interval variables are requested times, floored at the
        # fastest rate-feasible reparameterization of the current poses;
        # this keeps the one-sided rate hinges quiet, so the linearized
        # steps are not poisoned by an unmodeled barrier at the bound
        def evaluate(vec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            p, d = _unpack(vec, first, last, n_int)
            return p, _project_intervals(p, d, cfg)

        def objective(vec: np.ndarray) -> float:
            p, d = evaluate(vec)
            r = _residuals(p, d, obs, assoc, cfg)
            return float(r @ r)

        lam = 1e-4
        obj = objective(x)
        if not math.isfinite(obj):
            raise OptimizationFailedError("band objective is not finite")
        trace = [obj]
        for _ in range(cfg.inner_iters):
            p, d = evaluate(x)
            # keep interval variables on their rate floors so the finite
            # differences see real upward slope (below the floor they are
            # clipped and their columns would vanish)
            x[3 * n_int:] = d
            r0 = _residuals(p, d, obs, assoc, cfg)
            jac = np.empty((r0.size, x.size))
            h = 1e-7
            for j in range(x.size):
                xp = x.copy()
                xp[j] += h
                pp, dp = evaluate(xp)
                jac[:, j] = (_residuals(pp, dp, obs, assoc, cfg) - r0) / h
            jtj = jac.T @ jac
            g = jac.T @ r0
            accepted = False
            for _ in range(12):
                try:
                    delta = np.linalg.solve(jtj + lam * np.eye(x.size), -g)
                except np.linalg.LinAlgError:
                    lam *= 10.0
                    continue
                cand = x + delta
                cand[3 * n_int:] = np.maximum(cand[3 * n_int:], _MIN_DT)
                cand_obj = objective(cand)
                if not math.isfinite(cand_obj):
                    raise OptimizationFailedError("band objective is not finite")
                if cand_obj <= obj:
                    x = cand
                    obj = cand_obj
                    lam = max(lam / 10.0, 1e-9)
                    accepted = True
                    break
                lam *= 10.0
            if not accepted:
                break
            trace.append(obj)
        if objective_trace is not None:
            objective_trace.append(trace)
        p, d = evaluate(x)
        result = Trajectory(
            poses=[Pose2D(float(px), float(py), wrap_angle(float(pyaw)))
                   for px, py, pyaw in p],
            dts=[float(t) for t in d],
        )

    poses_arr = np.array([[q.x, q.y, q.yaw] for q in result.poses])
    scaled = _rescale_time(poses_arr, np.asarray(result.dts), cfg)
    final = Trajectory(poses=result.poses, dts=[float(t) for t in scaled])

    violations = check_feasibility(final, obstacles, cfg)
    if violations:
        # carry the un-dilated band: warm starts behave best from the raw
        # penalty equilibrium, not from the stretched timing
        raise InfeasiblePlanError("; ".join(violations), band=result,
                                  violations=tuple(violations))
    return final


def check_feasibility(band: Trajectory, obstacles: list[tuple[float, float]],
                      cfg: TebConfig, slack: float = 0.01) -> list[str]:
    """Hard post-checks on an optimized band; empty list means feasible.

    Rate and radius bounds get a small relative slack (soft penalties
    leave hinge-width violations); obstacle clearance and interval
    positivity are strict.
    """
    problems: list[str] = []
    poses = np.array([[p.x, p.y, p.yaw] for p in band.poses])
    dts = np.asarray(band.dts, dtype=float)
    if (dts <= 0).any():
        problems.append("non-positive interval")
        return problems
    v, omega = _segment_rates(poses, dts)
    if np.abs(v).max() > cfg.lin_vel_max * (1 + slack):
        problems.append(f"velocity {np.abs(v).max():.3f} exceeds bound")
    if np.abs(omega).max() > cfg.ang_vel_max * (1 + slack):
        problems.append(f"yaw rate {np.abs(omega).max():.3f} exceeds bound")
    if len(dts) > 1:
        mid = 0.5 * (dts[:-1] + dts[1:])
        acc = np.abs(np.diff(v)) / mid
        aacc = np.abs(np.diff(omega)) / mid
        if acc.max() > cfg.lin_acc_max * (1 + slack):
            problems.append(f"acceleration {acc.max():.3f} exceeds bound")
        if aacc.max() > cfg.ang_acc_max * (1 + slack):
            problems.append(
                f"angular acceleration {aacc.max():.3f} exceeds bound")
    # turning radius only constrains segments where the heading changes
    turning = np.abs(omega) > 1e-6
    if turning.any():
        radius = np.abs(v[turning]) / np.abs(omega[turning])
        if radius.min() < cfg.turning_radius_min * (1 - slack):
            problems.append(f"turning radius {radius.min():.3f} below bound")
    obs = np.asarray(obstacles, dtype=float).reshape(-1, 2)
    if obs.size:
        d2 = ((poses[None, :, :2] - obs[:, None, :]) ** 2).sum(axis=2)
        clearance = math.sqrt(float(d2.min()))
        if clearance < cfg.min_obstacle_dist:
            problems.append(f"obstacle clearance {clearance:.3f} below bound")
    return problems


# violation kinds that must stop the vehicle; every other kind is a rate
# or radius breach the actuators saturate away on their own
_BLOCKING_PREFIXES = ("obstacle clearance", "non-positive")


def blocking_violations(violations) -> bool:
    """True when any violation is a safety stop (clearance or timing)
    rather than a saturable kinodynamic bound breach."""
    return any(v.startswith(_BLOCKING_PREFIXES) for v in violations)


def extract_controls(band: Trajectory, wheelbase: float) -> tuple[float, float]:
    """Velocity and steering command from the first band segment.

    Velocity keeps the driving direction's sign (reverse allowed);
    steering follows the bicycle relation and is zero at rest.
    """
    dt = band.dts[0]
    if dt <= 0:
        raise ValueError("first interval must be positive")
    a, b = band.poses[0], band.poses[1]
    dx, dy = b.x - a.x, b.y - a.y
    speed = math.hypot(dx, dy) / dt
    gamma = 1.0 if dx * math.cos(a.yaw) + dy * math.sin(a.yaw) >= 0 else -1.0
    v = gamma * speed
    if abs(v) < 1e-6:
        return 0.0, 0.0
    yaw_rate = wrap_angle(b.yaw - a.yaw) / dt
    delta = math.atan(wheelbase * yaw_rate / v)
    return v, delta


def normalize_command(v: float, delta: float,
                      cfg: TebConfig) -> tuple[float, float]:
    """Scale a velocity/steering pair onto normalized actuator commands."""
    throttle = min(max(v / cfg.lin_vel_max, -1.0), 1.0)
    steering = min(max(delta / cfg.steering_limit, -1.0), 1.0)
    return throttle, steering
