"""Range-flow odometry: gradients, robust solve, warping, pose integration.

The residual convention is checked against rendered ground truth: the IRLS
minimizer equals the true sensor twist (positive x motion toward shrinking
ranges solves to positive v_x).
"""

import math

import numpy as np
import pytest

from deskdrive.errors import DegenerateGeometryError, InsufficientDataError
from deskdrive.geometry import Pose2D, Twist2D
from deskdrive.lidar import LaserScan, LidarSpec, cast_scan
from deskdrive.odometry import (
    OdometryState,
    RangeFlowConfig,
    ScanGradients,
    build_pyramid,
    cauchy_weight,
    compute_gradients,
    estimate_odometry,
    point_residual,
    scan_index_of_angle,
    solve_twist_irls,
    warp_scan,
)
from deskdrive.world import WorldModel

SPEC = LidarSpec()
DT = 1.0 / 7.0


def room():
    w = WorldModel()
    w.add_box(0.3, -0.2, 5.0, 4.0, yaw=0.15)
    return w


def corridor():
    w = WorldModel()
    w.add_box(2.0, 0.0, 7.0, 1.0)
    return w


def render(world, pose, stamp=0.0):
    return cast_scan(world, pose, SPEC, stamp=stamp)


def test_scan_index_of_angle():
    assert scan_index_of_angle(0.0, 360, 2 * math.pi) == pytest.approx(179.5)
    f = 2 * math.pi
    assert scan_index_of_angle(f / 2, 360, f) == pytest.approx(359.0)
    assert scan_index_of_angle(-f / 2, 360, f) == pytest.approx(0.0)


def test_build_pyramid_sizes():
    scan = render(room(), Pose2D())
    assert build_pyramid(scan, 1)[0] is scan
    pyr = build_pyramid(scan, 3)
    assert [p.spec.beam_count for p in pyr] == [360, 180, 90]
    assert pyr[1].spec.angle_increment == pytest.approx(2 * SPEC.angle_increment)


def test_build_pyramid_constant_ring():
    ring = LaserScan(0.0, np.full(360, 2.0), SPEC)
    pyr = build_pyramid(ring, 3)
    for level in pyr:
        assert np.allclose(level.ranges, 2.0)


def test_build_pyramid_too_short():
    tiny = LaserScan(0.0, np.full(16, 1.0), LidarSpec(beam_count=16))
    with pytest.raises(ValueError):
        build_pyramid(tiny, 3)


def test_gradients_identical_scans():
    scan = render(room(), Pose2D())
    g = compute_gradients(scan, scan, 0.1)
    assert np.allclose(g.l_t, 0.0)


def test_gradients_uniform_range_step():
    base = LaserScan(0.0, np.full(360, 2.0), SPEC)
    lifted = LaserScan(0.1, base.ranges + 0.1, SPEC)
    g = compute_gradients(base, lifted, 0.1)
    assert np.allclose(g.l_t, 1.0)
    assert np.allclose(g.l_alpha, 0.0, atol=1e-12)


def test_gradients_linear_ramp():
    idx = np.arange(360, dtype=float)
    ramp = 1.0 + 0.01 * idx
    scan = LaserScan(0.0, ramp.copy(), SPEC)
    g = compute_gradients(scan, scan, 0.1)
    # interior beams of a circular scan wrap; exclude the two seam beams
    interior = (g.theta > SPEC.angle_min + 2 * SPEC.angle_increment) & (
        g.theta < SPEC.angle_min + 2 * math.pi - 2 * SPEC.angle_increment
    )
    assert np.allclose(g.l_alpha[interior], 0.01, atol=1e-12)


def test_gradients_insufficient_points():
    sparse = np.full(360, np.inf)
    sparse[:10] = 1.0
    scan = LaserScan(0.0, sparse, SPEC)
    with pytest.raises(InsufficientDataError):
        compute_gradients(scan, scan, 0.1)


def test_point_residual_direct_cases():
    # static scene at zero twist
    assert point_residual((1.0, 0.0, 1.0, 0.0), 0.0, 0.0, Twist2D(), 57.3) == 0.0
    # head-on beam with flat angular profile
    rho = point_residual((1.0, 0.0, 1.0, 0.0), 0.2, 0.0, Twist2D(1, 0, 0), 57.3)
    assert rho == pytest.approx(1.2)


def test_point_residual_matches_symbolic_expansion():
    rng = np.random.default_rng(3)
    for _ in range(50):
        r = rng.uniform(0.2, 10.0)
        theta = rng.uniform(-math.pi, math.pi)
        x, y = r * math.cos(theta), r * math.sin(theta)
        l_t, l_a, ka = rng.normal(size=3)
        xi = Twist2D(*rng.normal(size=3))
        expected = (
            l_t
            + (x * math.sin(theta) - y * math.cos(theta) - l_a * ka) * xi.omega
            + (math.cos(theta) + l_a * ka * math.sin(theta) / r) * xi.vx
            + (math.sin(theta) - l_a * ka * math.cos(theta) / r) * xi.vy
        )
        got = point_residual((r, theta, x, y), l_t, l_a, xi, ka)
        assert got == pytest.approx(expected, abs=1e-12)


def test_point_residual_linear_in_twist():
    rng = np.random.default_rng(4)
    pt = (2.0, 0.7, 2.0 * math.cos(0.7), 2.0 * math.sin(0.7))
    l_t, l_a, ka = 0.3, -0.05, 57.3
    xi1 = Twist2D(*rng.normal(size=3))
    xi2 = Twist2D(*rng.normal(size=3))
    a, b = 1.7, -0.4
    mix = Twist2D(a * xi1.vx + b * xi2.vx, a * xi1.vy + b * xi2.vy,
                  a * xi1.omega + b * xi2.omega)
    r0 = point_residual(pt, l_t, l_a, Twist2D(), ka)
    r1 = point_residual(pt, l_t, l_a, xi1, ka)
    r2 = point_residual(pt, l_t, l_a, xi2, ka)
    rm = point_residual(pt, l_t, l_a, mix, ka)
    assert rm - r0 == pytest.approx(a * (r1 - r0) + b * (r2 - r0), abs=1e-10)


def test_cauchy_weight_values():
    assert cauchy_weight(0.0, 0.5) == 1.0
    assert cauchy_weight(0.5, 0.5) == pytest.approx(0.5)
    assert cauchy_weight(1.0, 0.5) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        cauchy_weight(1.0, 0.0)


def test_solve_zero_motion():
    scan = render(room(), Pose2D())
    g = compute_gradients(scan, scan, 0.1)
    xi = solve_twist_irls(g)
    assert abs(xi.vx) < 1e-9
    assert abs(xi.vy) < 1e-9
    assert abs(xi.omega) < 1e-9


def test_solve_recovers_true_sensor_twist():
    # +0.01 m step over 0.1 s: the minimizer is the true sensor twist
    # (+0.1 m/s), verified against the generating poses.
    w = room()
    s0 = render(w, Pose2D(0, 0, 0))
    s1 = render(w, Pose2D(0.01, 0, 0))
    g = compute_gradients(s0, s1, 0.1)
    xi = solve_twist_irls(g)
    assert xi.vx == pytest.approx(0.1, rel=0.10)
    assert abs(xi.vy) < 0.01
    assert abs(xi.omega) < 0.01


def test_solve_objective_non_increasing():
    w = room()
    s0 = render(w, Pose2D(0, 0, 0))
    s1 = render(w, Pose2D(0.01, 0.004, 0.01))
    g = compute_gradients(s0, s1, 0.1)
    trace: list[float] = []
    solve_twist_irls(g, objective_trace=trace)
    assert len(trace) >= 2
    assert all(b <= a + 1e-15 for a, b in zip(trace, trace[1:]))


def test_solve_robust_to_outliers():
    w = room()
    s0 = render(w, Pose2D(0, 0, 0))
    s1 = render(w, Pose2D(0.01, 0, 0))
    clean = solve_twist_irls(compute_gradients(s0, s1, 0.1))

    rng = np.random.default_rng(11)
    corrupt = s1.ranges.copy()
    hit = rng.choice(360, size=72, replace=False)
    corrupt[hit] = rng.uniform(0.2, 11.0, size=72)
    dirty = solve_twist_irls(
        compute_gradients(s0, LaserScan(0.1, corrupt, SPEC), 0.1)
    )
    assert abs(dirty.vx - clean.vx) <= 0.15 * max(abs(clean.vx), 1e-6)


def test_solve_degenerate_geometry():
    # rotationally symmetric scene: nothing constrains omega
    ring = LaserScan(0.0, np.full(360, 2.0), SPEC)
    g = compute_gradients(ring, ring, 0.1)
    with pytest.raises(DegenerateGeometryError):
        solve_twist_irls(g)


def test_solve_jacobian_matches_finite_differences():
    w = room()
    s0 = render(w, Pose2D())
    s1 = render(w, Pose2D(0.005, 0.002, 0.004))
    g = compute_gradients(s0, s1, 0.1)
    from deskdrive.odometry import _design_matrix

    a, _ = _design_matrix(g)
    eps = 1e-6
    for j, unit in enumerate([(1, 0, 0), (0, 1, 0), (0, 0, 1)]):
        xi_p = Twist2D(*(eps * u for u in unit))
        for i in [0, len(g) // 2, len(g) - 1]:
            pt = (g.r[i], g.theta[i], g.x[i], g.y[i])
            num = (
                point_residual(pt, g.l_t[i], g.l_alpha[i], xi_p, g.k_alpha)
                - point_residual(pt, g.l_t[i], g.l_alpha[i], Twist2D(), g.k_alpha)
            ) / eps
            assert num == pytest.approx(a[i, j], abs=1e-6)


def test_twist_negates_under_scan_swap():
    w = room()
    s0 = render(w, Pose2D(0, 0, 0))
    s1 = render(w, Pose2D(0.008, 0.003, 0.01))
    fwd = solve_twist_irls(compute_gradients(s0, s1, 0.1))
    bwd = solve_twist_irls(compute_gradients(s1, s0, 0.1))
    scale = max(fwd.norm(), 1e-9)
    err = math.sqrt(
        (fwd.vx + bwd.vx) ** 2 + (fwd.vy + bwd.vy) ** 2 + (fwd.omega + bwd.omega) ** 2
    )
    assert err / scale < 0.05


def test_warp_identity():
    scan = render(room(), Pose2D())
    warped = warp_scan(scan, Twist2D(), 0.1)
    finite = np.isfinite(scan.ranges) & np.isfinite(warped.ranges)
    assert finite.sum() > 300
    assert np.allclose(scan.ranges[finite], warped.ranges[finite], atol=1e-9)


def test_warp_pure_rotation_shifts_bins():
    rng = np.random.default_rng(5)
    ranges = rng.uniform(1.0, 8.0, 360)
    scan = LaserScan(0.0, ranges.copy(), SPEC)
    xi = Twist2D(0.0, 0.0, SPEC.angle_increment)  # one beam per unit time
    warped = warp_scan(scan, xi, 1.0)
    assert np.allclose(warped.ranges, np.roll(ranges, 1), atol=1e-9)


def test_warp_fixed_point_of_estimation():
    w = room()
    s0 = render(w, Pose2D(0, 0, 0))
    s1 = render(w, Pose2D(0.01, 0.002, 0.01))
    dt = 0.1
    xi = solve_twist_irls(compute_gradients(s0, s1, dt))
    warped = warp_scan(s1, xi, dt)
    residual = solve_twist_irls(compute_gradients(s0, warped, dt))
    assert residual.norm() < 0.1 * xi.norm()


def test_estimate_straight_meter():
    w = corridor()
    cfg = RangeFlowConfig()
    st = OdometryState()
    v = 0.2
    scans = [render(w, Pose2D(v * k / 7.0, 0, 0), stamp=k / 7.0) for k in range(36)]
    for a, b in zip(scans, scans[1:]):
        st = estimate_odometry(a, b, b.stamp - a.stamp, cfg, st)
    assert st.pose.x == pytest.approx(1.0, abs=0.02)
    assert abs(st.pose.y) < 0.02
    assert abs(st.pose.yaw) < 0.02


def test_estimate_inplace_spin():
    w = corridor()
    cfg = RangeFlowConfig()
    st = OdometryState()
    rate = 0.35
    steps = int(math.ceil(math.pi / 2 / rate * 7)) + 2
    scans = [
        render(w, Pose2D(0, 0, min(rate * k / 7.0, math.pi / 2)), stamp=k / 7.0)
        for k in range(steps)
    ]
    for a, b in zip(scans, scans[1:]):
        st = estimate_odometry(a, b, b.stamp - a.stamp, cfg, st)
    assert abs(st.pose.yaw - math.pi / 2) < math.radians(3)
    assert math.hypot(st.pose.x, st.pose.y) < 0.02


def test_estimate_stationary_no_drift():
    scan = render(corridor(), Pose2D())
    cfg = RangeFlowConfig()
    st = OdometryState()
    for _ in range(100):
        st = estimate_odometry(scan, scan, DT, cfg, st)
    assert math.hypot(st.pose.x, st.pose.y) < 1e-6
    assert abs(st.pose.yaw) < 1e-6
