"""Range-flow LIDAR odometry.

Consecutive range scans are treated as samples of a range field L(t, alpha).
Temporal and angular gradients of that field, together with the rigid-scene
assumption, give one linear constraint on the sensor twist per beam. The
twist is estimated by iteratively reweighted least squares under a Cauchy
M-estimator, embedded in a coarse-to-fine scheme over scan pyramids, and
integrated into a pose track.

Sign convention: the per-point residual vanishes at the true sensor twist,
so the IRLS minimizer IS the sensor's own motion (a sensor moving +x toward
a wall sees shrinking ranges, and the solve returns positive v_x). The
vehicle pose update therefore applies the mount transform only, with no
extra negation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from deskdrive.errors import DegenerateGeometryError, InsufficientDataError
from deskdrive.geometry import Pose2D, Twist2D, compose, inverse, se2_exp, se2_log
from deskdrive.lidar import LaserScan, LidarSpec

_CONDITION_LIMIT = 1e8


@dataclass(frozen=True)
class RangeFlowConfig:
    pyramid_levels: int = 3
    cauchy_k: float = 0.5
    irls_max_iters: int = 20
    irls_tol: float = 1e-5
    min_valid_points: int = 30
    seed_with_last_twist: bool = True  # constant-velocity prior between pairs
    bilateral_sigma_beams: float = 1.0
    bilateral_sigma_range: float = 0.3

    def __post_init__(self) -> None:
        if self.pyramid_levels < 1:
            raise ValueError("pyramid must have at least one level")
        if self.cauchy_k <= 0.0:
            raise ValueError("Cauchy scale must be positive")


@dataclass
class ScanGradients:
    """Per-point gradients and geometry for jointly valid beams."""

    l_t: np.ndarray      # range rate at fixed beam index (m/s)
    l_alpha: np.ndarray  # range slope per beam index step (m/index)
    r: np.ndarray
    theta: np.ndarray
    x: np.ndarray
    y: np.ndarray
    k_alpha: float       # beam indices per radian

    def __len__(self) -> int:
        return self.l_t.shape[0]


@dataclass
class OdometryState:
    pose: Pose2D = field(default_factory=Pose2D)
    last_twist: Twist2D = field(default_factory=Twist2D)
    residual_rms: float = 0.0


def scan_index_of_angle(theta: float, n: int, fov: float) -> float:
    """Beam index of bearing `theta` for a symmetric field of view.

    Assumes beams span [-fov/2, +fov/2] inclusive, so the index scale is
    (n-1)/fov. Scans whose beams follow an angle_min + i*increment grid
    (as `LidarSpec` does) invert their own metadata instead.
    """
    if fov <= 0.0:
        raise ValueError("field of view must be positive")
    return (n - 1) / fov * theta + (n - 1) / 2.0


def bilateral_filter(ranges: np.ndarray, sigma_beams: float, sigma_range: float,
                     circular: bool) -> np.ndarray:
    """Edge-preserving smoothing; +inf beams neither contribute nor change."""
    n = ranges.shape[0]
    half = max(1, int(math.ceil(2.0 * sigma_beams)))
    offsets = np.arange(-half, half + 1)
    spatial = np.exp(-0.5 * (offsets / sigma_beams) ** 2)

    valid = np.isfinite(ranges)
    out = np.full(n, np.inf)
    acc = np.zeros(n)
    wsum = np.zeros(n)
    for off, sw in zip(offsets, spatial):
        if circular:
            shifted = np.roll(ranges, -off)
            ok = np.roll(valid, -off)
        else:
            shifted = np.full(n, np.inf)
            src = slice(max(0, off), n + min(0, off))
            dst = slice(max(0, -off), n + min(0, -off))
            shifted[dst] = ranges[src]
            ok = np.isfinite(shifted)
        diff = np.where(valid & ok, shifted - ranges, 0.0)
        w = sw * np.exp(-0.5 * (diff / sigma_range) ** 2)
        w = np.where(valid & ok, w, 0.0)
        acc += w * np.where(ok, shifted, 0.0)
        wsum += w
    smoothed = valid & (wsum > 0.0)
    out[smoothed] = acc[smoothed] / wsum[smoothed]
    return out


def _is_circular(spec: LidarSpec) -> bool:
    return spec.beam_count * spec.angle_increment >= 2.0 * math.pi - 1e-9


def build_pyramid(scan: LaserScan, levels: int,
                  config: RangeFlowConfig | None = None) -> list[LaserScan]:
    """Successively smoothed and decimated copies; level 0 is the original."""
    cfg = config or RangeFlowConfig()
    if levels < 1:
        raise ValueError("need at least one pyramid level")
    if scan.spec.beam_count < 8 * 2 ** (levels - 1):
        raise ValueError(
            f"{scan.spec.beam_count} beams cannot support {levels} pyramid levels"
        )
    out = [scan]
    for _ in range(levels - 1):
        prev = out[-1]
        filtered = bilateral_filter(
            prev.ranges,
            cfg.bilateral_sigma_beams,
            cfg.bilateral_sigma_range,
            circular=_is_circular(prev.spec),
        )
        decimated = filtered[::2]
        spec = LidarSpec(
            beam_count=decimated.shape[0],
            angle_min=prev.spec.angle_min,
            angle_increment=prev.spec.angle_increment * 2.0,
            range_min=prev.spec.range_min,
            range_max=prev.spec.range_max,
            rate=prev.spec.rate,
        )
        out.append(LaserScan(stamp=prev.stamp, ranges=decimated, spec=spec))
    return out


def compute_gradients(prev: LaserScan, curr: LaserScan, dt: float,
                      min_valid_points: int = 30,
                      max_abs_slope: float = 0.5) -> ScanGradients:
    """Temporal gradient by forward difference, angular by central difference.

    A beam contributes only when it and both index neighbors are valid in
    both scans; the angular slope comes from the two-scan mean so the pair
    is treated symmetrically. Beams whose slope magnitude exceeds
    `max_abs_slope` (meters per index step) straddle a depth discontinuity
    or graze a surface, where the linearized flow constraint breaks down,
    and are excluded.
    """
    if prev.spec.beam_count != curr.spec.beam_count:
        raise ValueError("scan sizes differ")
    if dt <= 0.0:
        raise ValueError("dt must be positive")

    valid = np.isfinite(prev.ranges) & np.isfinite(curr.ranges)
    mean = np.where(valid, 0.5 * (prev.ranges + curr.ranges), np.inf)

    circular = _is_circular(prev.spec)

    def central_diff(ranges: np.ndarray) -> np.ndarray:
        guarded = np.where(valid, ranges, np.inf)
        if circular:
            fwd, bwd = np.roll(guarded, -1), np.roll(guarded, 1)
        else:
            fwd = np.concatenate((guarded[1:], [np.inf]))
            bwd = np.concatenate(([np.inf], guarded[:-1]))
        with np.errstate(invalid="ignore"):
            return 0.5 * (fwd - bwd)

    if circular:
        nb_prev, nb_next = np.roll(valid, 1), np.roll(valid, -1)
    else:
        nb_prev = np.concatenate(([False], valid[:-1]))
        nb_next = np.concatenate((valid[1:], [False]))

    # Slope per scan, keeping the smaller of the two: a bad return in one
    # scan then corrupts only its own beam (huge temporal residual, handled
    # by the M-estimator) instead of leaking into neighbors' coefficients.
    slope_prev = central_diff(prev.ranges)
    slope_curr = central_diff(curr.ranges)
    with np.errstate(invalid="ignore"):
        l_alpha_all = np.where(
            np.abs(slope_prev) <= np.abs(slope_curr), slope_prev, slope_curr
        )

    ok = valid & nb_prev & nb_next
    ok &= np.where(np.isfinite(l_alpha_all), np.abs(l_alpha_all) <= max_abs_slope, False)
    if int(ok.sum()) < min_valid_points:
        raise InsufficientDataError(
            f"only {int(ok.sum())} usable beams, need {min_valid_points}"
        )

    theta = prev.spec.beam_angles()[ok]
    r = mean[ok]
    l_t = (curr.ranges[ok] - prev.ranges[ok]) / dt
    return ScanGradients(
        l_t=l_t,
        l_alpha=l_alpha_all[ok],
        r=r,
        theta=theta,
        x=r * np.cos(theta),
        y=r * np.sin(theta),
        k_alpha=1.0 / prev.spec.angle_increment,
    )


def point_residual(point: tuple[float, float, float, float], l_t: float,
                   l_alpha: float, xi: Twist2D, k_alpha: float) -> float:
    """Linearized range-flow residual for one scan point; zero at the true twist."""
    r, theta, x, y = point
    if r <= 0.0:
        raise ValueError("range must be positive")
    st, ct = math.sin(theta), math.cos(theta)
    lk = l_alpha * k_alpha
    return (
        l_t
        + (x * st - y * ct - lk) * xi.omega
        + (ct + lk * st / r) * xi.vx
        + (st - lk * ct / r) * xi.vy
    )


def cauchy_weight(rho, k: float):
    """IRLS weight of the Cauchy M-estimator; 1 at zero residual."""
    if k <= 0.0:
        raise ValueError("Cauchy scale must be positive")
    return 1.0 / (1.0 + (np.asarray(rho) / k) ** 2)


def _design_matrix(g: ScanGradients) -> tuple[np.ndarray, np.ndarray]:
    """Rows a_i with rho_i = l_t_i + a_i . (vx, vy, omega)."""
    st, ct = np.sin(g.theta), np.cos(g.theta)
    lk = g.l_alpha * g.k_alpha
    a = np.column_stack((
        ct + lk * st / g.r,
        st - lk * ct / g.r,
        g.x * st - g.y * ct - lk,
    ))
    return a, g.l_t


def _cauchy_objective(rho: np.ndarray, k: float) -> float:
    return float(0.5 * k * k * np.sum(np.log1p((rho / k) ** 2)))


def solve_twist_irls(
    grads: ScanGradients,
    config: RangeFlowConfig | None = None,
    xi0: Twist2D | None = None,
    objective_trace: list[float] | None = None,
) -> Twist2D:
    """Robustly solve the per-point constraints for the sensor twist.

    Each pass solves the Cauchy-weighted normal equations and recomputes the
    weights at the new iterate; if a step ever increases the robust objective
    the previous iterate is kept, which makes the sequence of accepted
    objectives (recorded in `objective_trace` when given) non-increasing by
    construction.
    """
    cfg = config or RangeFlowConfig()
    if len(grads) < cfg.min_valid_points:
        raise InsufficientDataError(
            f"{len(grads)} points below minimum {cfg.min_valid_points}"
        )
    a, l_t = _design_matrix(grads)
    k = cfg.cauchy_k

    xi = np.array([xi0.vx, xi0.vy, xi0.omega]) if xi0 is not None else np.zeros(3)
    rho = l_t + a @ xi
    best_obj = _cauchy_objective(rho, k)
    if objective_trace is not None:
        objective_trace.append(best_obj)

    for _ in range(cfg.irls_max_iters):
        w = np.asarray(cauchy_weight(rho, k))
        aw = a * w[:, None]
        m = a.T @ aw
        if np.linalg.cond(m) > _CONDITION_LIMIT:
            raise DegenerateGeometryError(
                "scan geometry does not constrain all twist components"
            )
        xi_new = np.linalg.solve(m, -aw.T @ l_t)
        rho_new = l_t + a @ xi_new
        obj_new = _cauchy_objective(rho_new, k)
        if obj_new > best_obj + 1e-15:
            break
        step = float(np.linalg.norm(xi_new - xi))
        xi, rho, best_obj = xi_new, rho_new, obj_new
        if objective_trace is not None:
            objective_trace.append(best_obj)
        if step < cfg.irls_tol:
            break
    return Twist2D(float(xi[0]), float(xi[1]), float(xi[2]))


_MAX_INTERP_JUMP = 0.5  # m; adjacent echoes farther apart span a depth edge


def warp_scan(scan: LaserScan, xi: Twist2D, dt: float) -> LaserScan:
    """Move every echo by the rigid transform se2_exp(xi, dt) and re-bin.

    Adjacent echoes of the source scan sample the same surface unless their
    ranges jump, so the warped polyline is evaluated exactly at each beam
    bearing it crosses (ray-segment intersection). Echoes at discontinuities
    fall back to nearest-bin deposit. Colliding contributions keep the
    smaller range; uncovered bins read +inf.
    """
    if dt < 0.0:
        raise ValueError("dt must be non-negative")
    spec = scan.spec
    n = spec.beam_count
    inc = spec.angle_increment
    circular = _is_circular(spec)
    t = se2_exp(xi, dt)
    c, s = math.cos(t.yaw), math.sin(t.yaw)

    valid = scan.valid_mask()
    if not valid.any():
        return LaserScan(stamp=scan.stamp, ranges=scan.ranges.copy(), spec=spec)
    angles = spec.beam_angles()
    r_src = scan.ranges
    x = np.where(valid, r_src * np.cos(angles), 0.0)
    y = np.where(valid, r_src * np.sin(angles), 0.0)
    xw = c * x - s * y + t.x
    yw = s * x + c * y + t.y
    bearing = np.arctan2(yw, xw)

    out = np.full(n, np.inf)

    # smooth pairs: source-adjacent, both valid, no range jump
    jn = np.arange(n) if circular else np.arange(n - 1)
    jp = (jn + 1) % n
    with np.errstate(invalid="ignore"):
        pair_ok = valid[jn] & valid[jp] & (np.abs(r_src[jp] - r_src[jn]) <= _MAX_INTERP_JUMP)
    span = np.arctan2(
        np.sin(bearing[jp] - bearing[jn]), np.cos(bearing[jp] - bearing[jn])
    )
    pair_ok &= (np.abs(span) > 1e-9) & (np.abs(span) < math.pi / 2)

    a_idx = np.where(span >= 0.0, jn, jp)[pair_ok]
    b_idx = np.where(span >= 0.0, jp, jn)[pair_ok]
    sweep = np.abs(span[pair_ok])
    start = bearing[a_idx]

    px, py = xw[a_idx], yw[a_idx]
    dx, dy = xw[b_idx] - px, yw[b_idx] - py

    # bins whose center bearing falls inside [start, start + sweep]
    pos = np.mod(start - spec.angle_min, 2.0 * math.pi) / inc
    k0 = np.ceil(pos - 1e-9)
    m = np.floor(pos + sweep / inc + 1e-9) - k0 + 1
    max_m = int(m.max()) if m.size else 0
    for step in range(max_m):
        act = m > step
        if not act.any():
            break
        k = k0[act] + step
        if circular:
            k = np.mod(k, n)
        keep = (k >= 0) & (k < n)
        k = k[keep].astype(int)
        theta_k = spec.angle_min + k * inc
        ux, uy = np.cos(theta_k), np.sin(theta_k)
        sdx, sdy = dx[act][keep], dy[act][keep]
        spx, spy = px[act][keep], py[act][keep]
        denom = ux * sdy - uy * sdx
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = (spx * sdy - spy * sdx) / denom
        good = (np.abs(denom) > 1e-12) & (dist > 0.0) & np.isfinite(dist)
        np.minimum.at(out, k[good], dist[good])

    # orphan echoes (no smooth pair on either side) deposit at the nearest bin
    covered = np.zeros(n, dtype=bool)
    covered[jn[pair_ok]] = True
    covered[jp[pair_ok]] = True
    orphan = valid & ~covered
    if orphan.any():
        rw = np.hypot(xw[orphan], yw[orphan])
        idx = np.rint((bearing[orphan] - spec.angle_min) / inc)
        if circular:
            idx = np.mod(idx, n)
        keep = (idx >= 0) & (idx < n)
        np.minimum.at(out, idx[keep].astype(int), rw[keep])

    out[(out < spec.range_min) | (out > spec.range_max)] = np.inf
    return LaserScan(stamp=scan.stamp, ranges=out, spec=spec)


def estimate_odometry(
    prev: LaserScan,
    curr: LaserScan,
    dt: float,
    config: RangeFlowConfig | None = None,
    state: OdometryState | None = None,
    sensor_mount: Pose2D | None = None,
) -> OdometryState:
    """Coarse-to-fine twist estimate between two scans, folded into the pose.

    Each pyramid level warps the current scan by the transform accumulated
    so far, solves for the residual twist against the previous scan, and
    left-composes the correction. The accumulated transform is the sensor
    motion over dt; the pose update conjugates it through the sensor mount
    (identity by default, sensor at the vehicle reference point).
    """
    cfg = config or RangeFlowConfig()
    st = state or OdometryState()
    if prev.spec != curr.spec:
        raise ValueError("scan specs differ")
    if dt <= 0.0:
        raise ValueError("dt must be positive")

    prev_pyr = build_pyramid(prev, cfg.pyramid_levels, cfg)
    curr_pyr = build_pyramid(curr, cfg.pyramid_levels, cfg)

    accum = Pose2D()
    if cfg.seed_with_last_twist:
        accum = se2_exp(st.last_twist, dt)

    rms = 0.0
    for level in range(cfg.pyramid_levels - 1, -1, -1):
        p_l, c_l = prev_pyr[level], curr_pyr[level]
        warped = warp_scan(c_l, se2_log(accum), 1.0)
        try:
            grads = compute_gradients(p_l, warped, dt, cfg.min_valid_points)
            xi_res = solve_twist_irls(grads, cfg)
        except InsufficientDataError:
            if level == 0:
                raise
            continue
        accum = compose(se2_exp(xi_res, dt), accum)
        if level == 0:
            a, l_t = _design_matrix(grads)
            rho = l_t + a @ np.array([xi_res.vx, xi_res.vy, xi_res.omega])
            rms = float(np.sqrt(np.mean(rho**2)))

    mount = sensor_mount or Pose2D()
    vehicle_delta = compose(compose(mount, accum), inverse(mount))
    log = se2_log(accum)
    return replace(
        st,
        pose=compose(st.pose, vehicle_delta).normalized(),
        last_twist=Twist2D(log.vx / dt, log.vy / dt, log.omega / dt),
        residual_rms=rms,
    )
