"""Particle-filter localization: motion model, likelihood field, KLD sizing,
resampling, full filter updates, and pose estimation."""

import math

import numpy as np
import pytest
from scipy.stats import chi2

from deskdrive.errors import InsufficientDataError
from deskdrive.geometry import Pose2D, relative_pose
from deskdrive.lidar import LaserScan, LidarSpec, cast_scan
from deskdrive.localization import (
    KldConfig,
    LikelihoodField,
    MotionNoise,
    Particle,
    ParticleSet,
    amcl_update,
    build_likelihood_field,
    estimate_pose,
    kld_required_samples,
    sample_motion,
    should_update,
    systematic_resample,
    weight_particle,
)
from deskdrive.slam import OccupancyGrid, rasterize_world
from deskdrive.world import WorldModel

SPEC = LidarSpec()


def _room() -> WorldModel:
    w = WorldModel()
    w.add_box(0.0, 0.0, 3.85, 3.85)
    w.add_box(0.95, 0.75, 0.45, 0.35)
    w.add_box(-0.85, -1.05, 0.45, 0.35)
    return w


def _room_field() -> LikelihoodField:
    return build_likelihood_field(rasterize_world(_room(), 80, 0.05))


# -------------------------------------------------------------- configuration


def test_kld_config_rejects_bad_bounds():
    with pytest.raises(ValueError):
        KldConfig(min_particles=100, max_particles=50)
    with pytest.raises(ValueError):
        KldConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        KldConfig(delta=1.0)
    with pytest.raises(ValueError):
        KldConfig(beam_subsample=0)


def test_motion_noise_rejects_negative_coefficients():
    with pytest.raises(ValueError):
        MotionNoise(alpha1=-0.1)


# --------------------------------------------------------------- motion model


def test_sample_motion_identity():
    rng = np.random.default_rng(0)
    p = Particle(Pose2D(1.0, -2.0, 0.7))
    q = sample_motion(p, Pose2D(0.0, 0.0, 0.0), MotionNoise(0, 0, 0, 0), rng)
    assert q.pose.x == 1.0 and q.pose.y == -2.0 and q.pose.yaw == 0.7


def test_sample_motion_noiseless_advance():
    rng = np.random.default_rng(0)
    p = Particle(Pose2D(0.0, 0.0, math.pi / 3))
    q = sample_motion(p, Pose2D(1.0, 0.0, 0.0), MotionNoise(0, 0, 0, 0), rng)
    assert q.pose.x == pytest.approx(math.cos(math.pi / 3), abs=1e-12)
    assert q.pose.y == pytest.approx(math.sin(math.pi / 3), abs=1e-12)
    assert q.pose.yaw == pytest.approx(math.pi / 3, abs=1e-12)


def test_sample_motion_statistics():
    """One meter forward with alpha3=0.05 spreads translation by 0.05."""
    rng = np.random.default_rng(42)
    noise = MotionNoise(0.0, 0.0, 0.05, 0.0)
    n = 100_000
    start = Particle(Pose2D(0.0, 0.0, 0.0))
    from deskdrive.localization import _sample_motion_batch
    out = _sample_motion_batch(np.zeros((n, 3)), Pose2D(1.0, 0.0, 0.0), noise, rng)
    xs, ys = out[:, 0], out[:, 1]
    assert xs.mean() == pytest.approx(1.0, abs=4 * 0.05 / math.sqrt(n))
    assert xs.std() == pytest.approx(0.05, rel=0.03)
    assert np.allclose(ys, 0.0)  # no heading noise terms active
    q = sample_motion(start, Pose2D(1.0, 0.0, 0.0), noise, rng)
    assert abs(q.pose.x - 1.0) < 0.3


# ----------------------------------------------------------- likelihood field


def test_field_distances_match_brute_force():
    rng = np.random.default_rng(5)
    g = OccupancyGrid.create(20, 0.05, (0.0, 0.0))
    occ_cells = [(int(r), int(c)) for r, c in rng.integers(0, 20, size=(6, 2))]
    for r, c in occ_cells:
        g.log_odds[r, c] = math.log(0.9 / 0.1)
        g.known[r, c] = True
    fld = build_likelihood_field(g)
    for r in range(20):
        for c in range(20):
            brute = min(math.hypot(r - ro, c - co) * 0.05 for ro, co in occ_cells)
            assert fld.distance[r, c] == pytest.approx(min(brute, 0.5), abs=1e-9)


def test_field_zero_at_obstacle_truncated_far():
    g = OccupancyGrid.create(40, 0.05, (0.0, 0.0))
    g.log_odds[20, 20] = math.log(0.9 / 0.1)
    g.known[20, 20] = True
    fld = build_likelihood_field(g)
    assert fld.distance[20, 20] == 0.0
    assert fld.distance[20, 21] == pytest.approx(0.05, abs=1e-12)
    assert fld.distance[0, 0] == 0.5  # ~1.4 m away, truncated
    # outside the grid reads as the truncation distance
    assert fld.distance_at(np.array([50.0]), np.array([50.0]))[0] == 0.5


def test_field_requires_occupied_cells():
    g = OccupancyGrid.create(20, 0.05, (0.0, 0.0))
    with pytest.raises(InsufficientDataError):
        build_likelihood_field(g)


def test_weight_peaks_at_generating_pose():
    w = _room()
    fld = _room_field()
    truth = Pose2D(0.4, -0.3, 0.8)
    scan = cast_scan(w, truth, SPEC, stamp=0.0)
    w_truth = weight_particle(Particle(truth), scan, fld)
    rng = np.random.default_rng(17)
    for _ in range(100):
        ang = rng.uniform(0, 2 * math.pi)
        dist = rng.uniform(0.2, 0.6)
        off = Pose2D(truth.x + dist * math.cos(ang),
                     truth.y + dist * math.sin(ang), truth.yaw)
        assert weight_particle(Particle(off), scan, fld) <= w_truth


def test_weight_of_empty_scan_is_neutral():
    fld = _room_field()
    scan = LaserScan(stamp=0.0, ranges=np.full(SPEC.beam_count, np.inf), spec=SPEC)
    assert weight_particle(Particle(Pose2D(0, 0, 0)), scan, fld) == 1.0


def test_weight_is_deterministic():
    w = _room()
    fld = _room_field()
    scan = cast_scan(w, Pose2D(0.2, 0.1, 0.0), SPEC, stamp=0.0)
    p = Particle(Pose2D(0.25, 0.12, 0.05))
    assert weight_particle(p, scan, fld) == weight_particle(p, scan, fld)


# ----------------------------------------------------------------- KLD sizing


def test_kld_floor_for_few_bins():
    cfg = KldConfig()
    assert kld_required_samples(0, cfg) == 500
    assert kld_required_samples(1, cfg) == 500
    assert kld_required_samples(2, cfg) == 500  # 166 raw, clamped up


def test_kld_matches_exact_chi_square_quantile():
    """Wilson-Hilferty sizing vs the exact quantile, within one sample."""
    cfg = KldConfig()
    for k in range(2, 101):
        exact = math.ceil(chi2.ppf(1.0 - cfg.delta, k - 1) / (2 * cfg.epsilon))
        exact = min(max(exact, cfg.min_particles), cfg.max_particles)
        assert abs(kld_required_samples(k, cfg) - exact) <= 1


def test_kld_example_sixty_bins():
    assert kld_required_samples(60, KldConfig()) == 2180


def test_kld_monotone_in_bin_count():
    cfg = KldConfig()
    values = [kld_required_samples(k, cfg) for k in range(0, 200)]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_kld_rejects_negative_bins():
    with pytest.raises(ValueError):
        kld_required_samples(-1, KldConfig())


# ----------------------------------------------------------------- resampling


def test_systematic_resample_copy_counts():
    rng = np.random.default_rng(9)
    for trial in range(10):
        m = int(rng.integers(5, 200))
        w = rng.random(m)
        w /= w.sum()
        pset = ParticleSet(poses=np.zeros((m, 3)), weights=w)
        n = int(rng.integers(50, 800))
        idx = systematic_resample(pset, n, rng)
        counts = np.bincount(idx, minlength=m)
        expected = n * w
        assert (counts >= np.floor(expected) - 1e-9).all()
        assert (counts <= np.ceil(expected) + 1e-9).all()


def test_systematic_resample_uniform_weights_covers_evenly():
    rng = np.random.default_rng(2)
    m = 100
    pset = ParticleSet(poses=np.zeros((m, 3)), weights=np.full(m, 1.0 / m))
    counts = np.bincount(systematic_resample(pset, 400, rng), minlength=m)
    assert (counts == 4).all()


# -------------------------------------------------------------- filter update


def _arc_path(steps: int, step_len: float = 0.12, turn_deg: float = 5.0):
    poses = [Pose2D(-0.6, -0.5, 0.3)]
    for _ in range(steps):
        p = poses[-1]
        poses.append(Pose2D(p.x + step_len * math.cos(p.yaw),
                            p.y + step_len * math.sin(p.yaw),
                            p.yaw + math.radians(turn_deg)))
    return poses


def test_amcl_invariants_every_update():
    w = _room()
    fld = _room_field()
    cfg = KldConfig()
    rng = np.random.default_rng(1)
    path = _arc_path(6)
    pset = ParticleSet.gaussian(path[0], (0.3, 0.3, math.radians(20)),
                                cfg.min_particles, rng)
    for k in range(1, 7):
        delta = relative_pose(path[k - 1], path[k])
        scan = cast_scan(w, path[k], SPEC, stamp=k / 7.0)
        pset = amcl_update(pset, delta, scan, fld, cfg, rng)
        assert abs(pset.weights.sum() - 1.0) < 1e-9
        assert cfg.min_particles <= len(pset) <= cfg.max_particles
        assert (pset.poses[:, 2] > -math.pi - 1e-12).all()
        assert (pset.poses[:, 2] <= math.pi + 1e-12).all()
        assert not pset.weights_were_reset


def test_amcl_converges_from_spread_initialization():
    w = _room()
    fld = _room_field()
    cfg = KldConfig()
    for seed in (0, 7, 13):
        rng = np.random.default_rng(seed)
        path = _arc_path(15)
        pset = ParticleSet.gaussian(path[0], (0.5, 0.5, math.radians(30)),
                                    cfg.max_particles, rng)
        for k in range(1, 16):
            delta = relative_pose(path[k - 1], path[k])
            scan = cast_scan(w, path[k], SPEC, stamp=k / 7.0)
            pset = amcl_update(pset, delta, scan, fld, cfg, rng)
        est, cov = estimate_pose(pset)
        truth = path[15]
        assert math.hypot(est.x - truth.x, est.y - truth.y) < 0.05
        assert abs(math.remainder(est.yaw - truth.yaw, 2 * math.pi)) < math.radians(5)
        assert cov.shape == (3, 3)


def test_amcl_zero_noise_median_error_does_not_degrade():
    """Repeatedly observing the same exact scan with a frozen cloud must not
    systematically worsen the estimate. Systematic-resampler phase adds
    sub-millimeter jitter, so monotonicity is asserted with 1 mm slack."""
    w = _room()
    fld = _room_field()
    truth = Pose2D(0.3, -0.2, 0.5)
    scan = cast_scan(w, truth, SPEC, stamp=0.0)
    zero = MotionNoise(0, 0, 0, 0)
    ident = Pose2D(0, 0, 0)
    cfg = KldConfig()
    prior = Pose2D(truth.x + 0.3, truth.y - 0.2, truth.yaw + math.radians(10))
    errs = np.zeros((20, 8))
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        pset = ParticleSet.gaussian(prior, (0.25, 0.25, math.radians(15)), 2000, rng)
        for k in range(8):
            pset = amcl_update(pset, ident, scan, fld, cfg, rng, noise=zero)
            est, _ = estimate_pose(pset)
            errs[seed, k] = math.hypot(est.x - truth.x, est.y - truth.y)
    med = np.median(errs, axis=0)
    assert all(b <= a + 1e-3 for a, b in zip(med, med[1:]))
    assert med[-1] <= med[0] + 1e-3


def test_amcl_flags_all_zero_weights():
    w = _room()
    grid = rasterize_world(w, 80, 0.05)
    # degenerate mixture: both components carry zero mass
    fld = build_likelihood_field(grid, z_hit=0.0, z_rand=0.0)
    scan = cast_scan(w, Pose2D(0, 0, 0), SPEC, stamp=0.0)
    rng = np.random.default_rng(3)
    pset = ParticleSet.gaussian(Pose2D(0, 0, 0), (0.1, 0.1, 0.1), 500, rng)
    out = amcl_update(pset, Pose2D(0, 0, 0), scan, fld, KldConfig(), rng,
                      noise=MotionNoise(0, 0, 0, 0))
    assert out.weights_were_reset
    assert abs(out.weights.sum() - 1.0) < 1e-9
    assert np.allclose(out.weights, out.weights[0])


def test_amcl_rejects_empty_set():
    fld = _room_field()
    scan = cast_scan(_room(), Pose2D(0, 0, 0), SPEC, stamp=0.0)
    empty = ParticleSet(poses=np.zeros((0, 3)), weights=np.zeros(0))
    with pytest.raises(ValueError):
        amcl_update(empty, Pose2D(0, 0, 0), scan, fld, KldConfig(),
                    np.random.default_rng(0))


# ------------------------------------------------------------- update gating


def test_should_update_thresholds():
    assert not should_update(Pose2D(0.005, 0.0, 0.0))
    assert should_update(Pose2D(0.02, 0.0, 0.0))
    assert should_update(Pose2D(0.0, 0.0, 0.25))
    assert not should_update(Pose2D(0.0, 0.0, 0.19))
    assert should_update(Pose2D(0.006, 0.008, 0.0))  # hypot = 0.01


# ------------------------------------------------------------ pose estimation


def test_estimate_single_particle():
    pset = ParticleSet(poses=np.array([[1.0, 2.0, 0.3]]), weights=np.array([1.0]))
    pose, cov = estimate_pose(pset)
    assert pose.x == 1.0 and pose.y == 2.0 and pose.yaw == pytest.approx(0.3)
    assert np.allclose(cov, 0.0)


def test_estimate_circular_mean_across_pi():
    poses = np.array([[0.0, 0.0, math.pi - 0.1], [0.0, 0.0, -math.pi + 0.1]])
    pset = ParticleSet(poses=poses, weights=np.array([0.5, 0.5]))
    pose, _ = estimate_pose(pset)
    assert abs(abs(pose.yaw) - math.pi) < 1e-9


def test_estimate_symmetric_cloud():
    d = 0.2
    poses = np.array([
        [1.0 + d, 1.0, 0.1], [1.0 - d, 1.0, -0.1],
        [1.0, 1.0 + d, 0.1], [1.0, 1.0 - d, -0.1],
    ])
    pset = ParticleSet(poses=poses, weights=np.full(4, 0.25))
    pose, cov = estimate_pose(pset)
    assert pose.x == pytest.approx(1.0, abs=1e-12)
    assert pose.y == pytest.approx(1.0, abs=1e-12)
    assert pose.yaw == pytest.approx(0.0, abs=1e-12)
    assert cov[0, 0] == pytest.approx(d * d / 2, abs=1e-12)


def test_uniform_initializer_stays_on_free_cells():
    grid = rasterize_world(_room(), 80, 0.05)
    rng = np.random.default_rng(8)
    pset = ParticleSet.uniform(grid, 300, rng)
    assert len(pset) == 300
    occ = grid.probability() >= 0.65
    col, row = grid.world_to_cell(pset.poses[:, 0], pset.poses[:, 1])
    col = np.floor(col).astype(int)
    row = np.floor(row).astype(int)
    assert not occ[row, col].any()
