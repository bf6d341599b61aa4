"""Adaptive Monte Carlo localization on a known occupancy grid.

The filter keeps a particle cloud over SE(2), propagates it with a
rot-trans-rot odometry motion model, weights particles against a
precomputed obstacle-distance field, and adapts its sample count each
update so the discretized posterior stays close to the true one
(KLD-sampling with a Wilson-Hilferty chi-square quantile).

Particle weights follow a mixture measurement model per subsampled beam:
    z_hit * N(d; 0, sigma_hit) + z_rand / range_max
where d is the distance from the beam endpoint to the nearest occupied
cell, truncated at max_dist. Weighting runs in log-space over the whole
cloud at once; the scalar helpers delegate to the batched kernels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np
from scipy import ndimage

from .errors import InsufficientDataError
from .geometry import Pose2D, compose, wrap_angle
from .lidar import LaserScan
from .slam import OCC_THRESHOLD, OccupancyGrid


@dataclass(frozen=True)
class KldConfig:
    min_particles: int = 500
    max_particles: int = 3000
    epsilon: float = 0.02          # K-L distance bound
    delta: float = 0.01            # quantile confidence bound
    bin_size: tuple[float, float, float] = (0.1, 0.1, 0.175)
    resample_thresh: int = 1       # filter updates between resamples
    beam_subsample: int = 10       # weight every k-th beam

    def __post_init__(self) -> None:
        if self.min_particles < 1 or self.max_particles < self.min_particles:
            raise ValueError("particle bounds must satisfy 1 <= min <= max")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if any(b <= 0 for b in self.bin_size):
            raise ValueError("bin sizes must be positive")
        if self.beam_subsample < 1:
            raise ValueError("beam_subsample must be >= 1")


@dataclass(frozen=True)
class MotionNoise:
    """Standard deviations of the rot-trans-rot odometry model, linear in
    the motion magnitudes (alpha1: rot from rot, alpha2: rot from trans,
    alpha3: trans from trans, alpha4: trans from rot)."""

    alpha1: float = 0.1
    alpha2: float = 0.1
    alpha3: float = 0.05
    alpha4: float = 0.05

    def __post_init__(self) -> None:
        if min(self.alpha1, self.alpha2, self.alpha3, self.alpha4) < 0:
            raise ValueError("noise coefficients must be non-negative")


@dataclass
class Particle:
    pose: Pose2D
    weight: float = 1.0


@dataclass
class ParticleSet:
    """Vectorized particle cloud: poses (n,3) and weights (n,)."""

    poses: np.ndarray
    weights: np.ndarray
    weights_were_reset: bool = False

    def __len__(self) -> int:
        return self.poses.shape[0]

    def to_particles(self) -> list[Particle]:
        return [Particle(Pose2D(*map(float, row)), float(w))
                for row, w in zip(self.poses, self.weights)]

    @classmethod
    def from_particles(cls, particles: list[Particle]) -> "ParticleSet":
        poses = np.array([[p.pose.x, p.pose.y, p.pose.yaw] for p in particles])
        weights = np.array([p.weight for p in particles], dtype=float)
        return cls(poses=poses, weights=weights)

    @classmethod
    def gaussian(cls, center: Pose2D, spread: tuple[float, float, float],
                 n: int, rng: np.random.Generator) -> "ParticleSet":
        poses = np.column_stack([
            rng.normal(center.x, spread[0], n),
            rng.normal(center.y, spread[1], n),
            np.vectorize(wrap_angle)(rng.normal(center.yaw, spread[2], n)),
        ])
        return cls(poses=poses, weights=np.full(n, 1.0 / n))

    @classmethod
    def uniform(cls, grid: OccupancyGrid, n: int,
                rng: np.random.Generator) -> "ParticleSet":
        """Global initializer over the grid's known free cells."""
        free = grid.known & (grid.probability() < OCC_THRESHOLD)
        rows, cols = np.nonzero(free)
        if rows.size == 0:
            raise InsufficientDataError("grid has no known free cells")
        pick = rng.integers(0, rows.size, n)
        cx, cy = grid.cell_center(cols[pick], rows[pick])
        jitter = (rng.random((n, 2)) - 0.5) * grid.resolution
        poses = np.column_stack([
            np.asarray(cx) + jitter[:, 0],
            np.asarray(cy) + jitter[:, 1],
            rng.uniform(-math.pi, math.pi, n),
        ])
        return cls(poses=poses, weights=np.full(n, 1.0 / n))


@dataclass
class LikelihoodField:
    """Truncated distance-to-nearest-obstacle lookup plus mixture params."""

    distance: np.ndarray           # meters, truncated at max_dist
    resolution: float
    origin: Pose2D
    sigma_hit: float = 0.05
    z_hit: float = 0.95
    z_rand: float = 0.05
    max_dist: float = 0.5
    range_max: float = 12.0

    def distance_at(self, x, y) -> np.ndarray:
        """Distance lookup for world points, bilinear between cell centers
        so nearby poses score distinguishably instead of landing on the
        same cell plateau. Outside the field reads as the truncation
        distance (maximally uninformative)."""
        c, s = math.cos(self.origin.yaw), math.sin(self.origin.yaw)
        dx = np.asarray(x) - self.origin.x
        dy = np.asarray(y) - self.origin.y
        u = (c * dx + s * dy) / self.resolution - 0.5
        v = (-s * dx + c * dy) / self.resolution - 0.5
        h, w = self.distance.shape
        inside = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
        u = np.clip(u, 0, w - 1)
        v = np.clip(v, 0, h - 1)
        c0 = np.clip(np.floor(u).astype(int), 0, w - 2)
        r0 = np.clip(np.floor(v).astype(int), 0, h - 2)
        fu = u - c0
        fv = v - r0
        d00 = self.distance[r0, c0]
        d10 = self.distance[r0, c0 + 1]
        d01 = self.distance[r0 + 1, c0]
        d11 = self.distance[r0 + 1, c0 + 1]
        blended = (d00 * (1 - fu) * (1 - fv) + d10 * fu * (1 - fv)
                   + d01 * (1 - fu) * fv + d11 * fu * fv)
        return np.where(inside, blended, self.max_dist)


def build_likelihood_field(grid: OccupancyGrid, sigma_hit: float = 0.05,
                           z_hit: float = 0.95, z_rand: float = 0.05,
                           max_dist: float = 0.5,
                           range_max: float = 12.0) -> LikelihoodField:
    """Exact Euclidean distance transform of the occupied cells, truncated."""
    occupied = grid.known & (grid.probability() >= OCC_THRESHOLD)
    if not occupied.any():
        raise InsufficientDataError("map has no occupied cells to localize against")
    dist = ndimage.distance_transform_edt(~occupied, sampling=grid.resolution)
    return LikelihoodField(
        distance=np.minimum(dist, max_dist),
        resolution=grid.resolution,
        origin=grid.origin,
        sigma_hit=sigma_hit,
        z_hit=z_hit,
        z_rand=z_rand,
        max_dist=max_dist,
        range_max=range_max,
    )


def _sample_motion_batch(poses: np.ndarray, delta: Pose2D, noise: MotionNoise,
                         rng: np.random.Generator) -> np.ndarray:
    """Rot-trans-rot perturbation of every pose by the odometry delta."""
    n = poses.shape[0]
    trans = math.hypot(delta.x, delta.y)
    rot1 = math.atan2(delta.y, delta.x) if trans > 1e-12 else 0.0
    rot2 = wrap_angle(delta.yaw - rot1)

    std1 = noise.alpha1 * abs(rot1) + noise.alpha2 * trans
    std_t = noise.alpha3 * trans + noise.alpha4 * (abs(rot1) + abs(rot2))
    std2 = noise.alpha1 * abs(rot2) + noise.alpha2 * trans
    r1 = rot1 + (rng.normal(0.0, std1, n) if std1 > 0 else 0.0)
    tr = trans + (rng.normal(0.0, std_t, n) if std_t > 0 else 0.0)
    r2 = rot2 + (rng.normal(0.0, std2, n) if std2 > 0 else 0.0)

    heading = poses[:, 2] + r1
    out = np.empty_like(poses)
    out[:, 0] = poses[:, 0] + tr * np.cos(heading)
    out[:, 1] = poses[:, 1] + tr * np.sin(heading)
    yaw = poses[:, 2] + r1 + r2
    out[:, 2] = np.mod(yaw + math.pi, 2.0 * math.pi) - math.pi
    return out


def sample_motion(p: Particle, odom_delta: Pose2D, noise: MotionNoise,
                  rng: np.random.Generator) -> Particle:
    """Propagate one particle; with all alphas zero this is exactly
    compose(p.pose, odom_delta)."""
    if (noise.alpha1 == noise.alpha2 == noise.alpha3 == noise.alpha4 == 0.0):
        return Particle(compose(p.pose, odom_delta), p.weight)
    row = np.array([[p.pose.x, p.pose.y, p.pose.yaw]])
    x, y, yaw = _sample_motion_batch(row, odom_delta, noise, rng)[0]
    return Particle(Pose2D(float(x), float(y), wrap_angle(float(yaw))), p.weight)


def _beam_subset(scan: LaserScan, subsample: int) -> tuple[np.ndarray, np.ndarray]:
    mask = scan.valid_mask()
    mask &= (np.arange(scan.spec.beam_count) % subsample) == 0
    return scan.spec.beam_angles()[mask], scan.ranges[mask]


def _log_weight_batch(poses: np.ndarray, scan: LaserScan,
                      field_: LikelihoodField, subsample: int) -> np.ndarray:
    angles, ranges = _beam_subset(scan, subsample)
    if angles.size == 0:
        return np.zeros(poses.shape[0])
    bearing = poses[:, 2:3] + angles[None, :]
    ex = poses[:, 0:1] + ranges[None, :] * np.cos(bearing)
    ey = poses[:, 1:2] + ranges[None, :] * np.sin(bearing)
    d = field_.distance_at(ex, ey)
    gauss = np.exp(-0.5 * (d / field_.sigma_hit) ** 2) / (
        field_.sigma_hit * math.sqrt(2.0 * math.pi))
    mix = field_.z_hit * gauss + field_.z_rand / field_.range_max
    with np.errstate(divide="ignore"):
        return np.log(mix).sum(axis=1)


def weight_particle(p: Particle, scan: LaserScan, field_: LikelihoodField,
                    subsample: int = 10) -> float:
    """Measurement likelihood of one particle; empty beam sets are neutral."""
    row = np.array([[p.pose.x, p.pose.y, p.pose.yaw]])
    return float(np.exp(_log_weight_batch(row, scan, field_, subsample)[0]))


_Z_CACHE: dict[float, float] = {}


def kld_required_samples(k: int, cfg: KldConfig) -> int:
    """Sample count bound from the K-L criterion over k occupied bins.

    Uses the Wilson-Hilferty cube approximation of the chi-square
    quantile with k-1 degrees of freedom.
    """
    if k < 0:
        raise ValueError("bin count cannot be negative")
    if k <= 1:
        return cfg.min_particles
    if cfg.delta not in _Z_CACHE:
        _Z_CACHE[cfg.delta] = NormalDist().inv_cdf(1.0 - cfg.delta)
    z = _Z_CACHE[cfg.delta]
    nu = k - 1
    a = 2.0 / (9.0 * nu)
    quantile = nu * (1.0 - a + z * math.sqrt(a)) ** 3
    n = math.ceil(quantile / (2.0 * cfg.epsilon))
    return min(max(n, cfg.min_particles), cfg.max_particles)


def systematic_resample(pset: ParticleSet, n: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Indices of n systematic draws proportional to the set's weights.

    Each particle is copied either floor(n*w) or ceil(n*w) times.
    """
    if n < 1:
        raise ValueError("need at least one draw")
    w = np.asarray(pset.weights, dtype=float)
    total = w.sum()
    if total <= 0:
        w = np.full(len(w), 1.0 / len(w))
    else:
        w = w / total
    positions = (rng.random() + np.arange(n)) / n
    return np.searchsorted(np.cumsum(w), positions, side="right").clip(0, len(w) - 1)


def _bin_keys(poses: np.ndarray, bin_size: tuple[float, float, float]) -> np.ndarray:
    keys = np.empty((poses.shape[0], 3), dtype=np.int64)
    keys[:, 0] = np.floor(poses[:, 0] / bin_size[0])
    keys[:, 1] = np.floor(poses[:, 1] / bin_size[1])
    keys[:, 2] = np.floor(poses[:, 2] / bin_size[2])
    return keys


def amcl_update(pset: ParticleSet, odom_delta: Pose2D, scan: LaserScan,
                field_: LikelihoodField, cfg: KldConfig,
                rng: np.random.Generator,
                noise: MotionNoise | None = None) -> ParticleSet:
    """One filter update: resample-propagate until the KLD bound is met,
    then weight the new cloud and normalize.

    Draws happen in systematic batches; the KLD stopping rule is
    re-evaluated on the occupied-bin count after each batch.
    """
    if len(pset) == 0:
        raise ValueError("particle set is empty")
    noise = noise or MotionNoise()

    chunks: list[np.ndarray] = []
    bins: set[tuple[int, int, int]] = set()
    drawn = 0
    required = cfg.min_particles
    while drawn < required:
        batch_n = min(required, cfg.max_particles) - drawn
        idx = systematic_resample(pset, batch_n, rng)
        moved = _sample_motion_batch(pset.poses[idx], odom_delta, noise, rng)
        chunks.append(moved)
        drawn += batch_n
        for key in map(tuple, _bin_keys(moved, cfg.bin_size)):
            bins.add(key)
        required = min(kld_required_samples(len(bins), cfg), cfg.max_particles)

    poses = np.concatenate(chunks, axis=0)
    log_w = _log_weight_batch(poses, scan, field_, cfg.beam_subsample)
    peak = log_w.max()
    if np.isfinite(peak):
        shifted = np.exp(log_w - peak)
        weights = shifted / shifted.sum()
        reset = False
    else:
        # every particle scored zero: keep the cloud alive, flag the event
        weights = np.full(len(poses), 1.0 / len(poses))
        reset = True
    return ParticleSet(poses=poses, weights=weights, weights_were_reset=reset)


def should_update(accumulated_delta: Pose2D, min_trans: float = 0.01,
                  min_rot: float = 0.20) -> bool:
    """Filter-update gate on accumulated odometry motion."""
    return (math.hypot(accumulated_delta.x, accumulated_delta.y) >= min_trans
            or abs(wrap_angle(accumulated_delta.yaw)) >= min_rot)


def estimate_pose(pset: ParticleSet) -> tuple[Pose2D, np.ndarray]:
    """Weighted mean pose (circular in yaw) and 3x3 covariance."""
    if len(pset) == 0:
        raise ValueError("particle set is empty")
    w = pset.weights / pset.weights.sum()
    mx = float(w @ pset.poses[:, 0])
    my = float(w @ pset.poses[:, 1])
    myaw = math.atan2(float(w @ np.sin(pset.poses[:, 2])),
                      float(w @ np.cos(pset.poses[:, 2])))
    dx = pset.poses[:, 0] - mx
    dy = pset.poses[:, 1] - my
    dyaw = np.mod(pset.poses[:, 2] - myaw + math.pi, 2.0 * math.pi) - math.pi
    dev = np.column_stack([dx, dy, dyaw])
    cov = dev.T @ (dev * w[:, None])
    return Pose2D(mx, my, wrap_angle(myaw)), cov
