"""Run-parameter registry: one flat namespace over the pipeline's tunables.

Every published knob is addressable as `table.key` text (`slam.*` for the
mapper, `mcl.*` for the particle filter, `nav.*` for planning and control),
parsed against the type of its default. The registry defaults are the
shipped configuration; `validate_params` cross-checks them against the
dataclass defaults actually compiled into each module, and enforces the
couplings a single override can silently break (turning radius versus
wheelbase, the shared sensor window).
"""

from __future__ import annotations

import copy
import inspect
import math
from dataclasses import dataclass, replace

from deskdrive.costmap import InflationParams
from deskdrive.errors import ConfigError
from deskdrive.geometry import Pose2D
from deskdrive.lidar import LidarSpec
from deskdrive.localization import KldConfig, should_update
from deskdrive.navigator import GoalTolerance, NavigatorConfig
from deskdrive.slam import PROB_FREE_SAT, PROB_OCC_SAT, SlamConfig
from deskdrive.teb import TebConfig
from deskdrive.vehicle import VehicleSpec


@dataclass(frozen=True)
class ParamSpec:
    default: object
    doc: str


# table -> key -> spec; defaults are the shipped configuration
REGISTRY: dict[str, dict[str, ParamSpec]] = {
    "slam": {
        "map_size": ParamSpec(80, "grid cells per map side"),
        "map_resolution": ParamSpec(0.05, "cell edge length (m)"),
        "map_start_x": ParamSpec(0.5, "map frame origin, fraction along x"),
        "map_start_y": ParamSpec(0.5, "map frame origin, fraction along y"),
        "map_multi_res_levels": ParamSpec(2, "coarse-to-fine pyramid depth"),
        "free_cell_prob_sat": ParamSpec(0.4, "lower occupancy clamp"),
        "ocpd_cell_prob_sat": ParamSpec(0.9, "upper occupancy clamp"),
        "linear_distance_thresh": ParamSpec(
            0.4, "translation between map updates (m)"),
        "angular_distance_thresh": ParamSpec(
            0.06, "rotation between map updates (rad)"),
        "lidar_min_thresh": ParamSpec(0.15, "sensor minimum range (m)"),
        "lidar_max_range": ParamSpec(12.0, "sensor maximum range (m)"),
        "trajectory_update_rate": ParamSpec(
            4.0, "pose trace sampling rate (Hz)"),
        "trajectory_publish_rate": ParamSpec(
            0.25, "pose trace display rate (Hz); consumed by the cockpit"),
    },
    "mcl": {
        "min_particles": ParamSpec(500, "filter size floor"),
        "max_particles": ParamSpec(3000, "filter size ceiling"),
        "kld_err": ParamSpec(0.02, "divergence bound for the sample count"),
        "min_dist_update": ParamSpec(
            0.01, "translation gate for a filter update (m)"),
        "min_angle_update": ParamSpec(
            0.20, "rotation gate for a filter update (rad)"),
        "resample_thresh": ParamSpec(1, "filter updates between resamples"),
        "initial_x_coord": ParamSpec(0.0, "initial pose estimate, x (m)"),
        "initial_y_coord": ParamSpec(0.0, "initial pose estimate, y (m)"),
        "initial_orient": ParamSpec(0.0, "initial pose estimate, yaw (rad)"),
        "laser_min_range": ParamSpec(0.15, "sensor minimum range (m)"),
        "laser_max_range": ParamSpec(12.0, "sensor maximum range (m)"),
    },
    "nav": {
        "global_costmap_size": ParamSpec(80, "static costmap cells per side"),
        "local_costmap_size": ParamSpec(1.5, "rolling window side (m)"),
        "rolling_window": ParamSpec(True, "local costmap is vehicle-centric"),
        "range_obstacle": ParamSpec(3.0, "mark obstacles within (m)"),
        "range_raytrace": ParamSpec(3.5, "clear free space within (m)"),
        "radius_inflation": ParamSpec(
            0.025, "cushion distance around lethal cells (m)"),
        "cost_scaling_factor": ParamSpec(
            10.0, "exponential falloff of inflated cost (1/m)"),
        "lin_vel_max": ParamSpec(0.2, "linear velocity bound (m/s)"),
        "ang_vel_max": ParamSpec(0.5236, "angular velocity bound (rad/s)"),
        "lin_acc_max": ParamSpec(0.15, "linear acceleration bound (m/s^2)"),
        "ang_acc_max": ParamSpec(
            0.3927, "angular acceleration bound (rad/s^2)"),
        "turning_radius_min": ParamSpec(0.24515, "minimum turn radius (m)"),
        "vehicle_wheelbase": ParamSpec(0.14154, "axle separation (m)"),
        "vehicle_footprint": ParamSpec(
            "line", "footprint model for band optimization"),
        "xy_goal_tolerance": ParamSpec(0.1, "positional goal tolerance (m)"),
        "yaw_goal_tolerance": ParamSpec(
            0.1, "orientational goal tolerance (rad)"),
        "min_obstacle_dist": ParamSpec(
            0.2, "desired rear-axle clearance from obstacles (m)"),
        "num_inner_iterations": ParamSpec(3, "inner optimizer iterations"),
        "num_outer_iterations": ParamSpec(3, "outer resize/solve iterations"),
    },
}


def _valid_keys() -> list[str]:
    return sorted(f"{table}.{key}"
                  for table, keys in REGISTRY.items() for key in keys)


def _parse(raw: object, default: object, dotted: str) -> object:
    """Coerce a raw override to the type of its default."""
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("true", "1", "yes", "on"):
            return True
        if text in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{dotted}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(str(raw).strip())
        except ValueError:
            raise ConfigError(
                f"{dotted}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)  # type: ignore[arg-type]
        except (TypeError, ValueError):
            raise ConfigError(
                f"{dotted}: expected a number, got {raw!r}") from None
    return str(raw)


@dataclass
class RunParams:
    """A concrete assignment for every registry key."""

    values: dict[str, dict[str, object]]

    @classmethod
    def defaults(cls) -> "RunParams":
        return cls(values={
            table: {key: copy.copy(spec.default) for key, spec in keys.items()}
            for table, keys in REGISTRY.items()
        })

    def _locate(self, dotted: str) -> tuple[str, str]:
        table, _, key = dotted.partition(".")
        if table not in REGISTRY or key not in REGISTRY[table]:
            raise ConfigError(
                f"unknown parameter {dotted!r}; valid keys: "
                + ", ".join(_valid_keys())
            )
        return table, key

    def get(self, dotted: str) -> object:
        table, key = self._locate(dotted)
        return self.values[table][key]

    def set(self, dotted: str, raw: object) -> None:
        table, key = self._locate(dotted)
        self.values[table][key] = _parse(
            raw, REGISTRY[table][key].default, dotted)

    def table(self, name: str) -> dict[str, object]:
        if name not in REGISTRY:
            raise ConfigError(f"unknown parameter table {name!r}")
        return dict(self.values[name])


# ------------------------------------------------------------- builders


def slam_config_from(params: RunParams) -> SlamConfig:
    t = params.table("slam")
    return SlamConfig(
        levels=int(t["map_multi_res_levels"]),
        map_size_cells=int(t["map_size"]),
        map_resolution=float(t["map_resolution"]),
        linear_update_thresh=float(t["linear_distance_thresh"]),
        angular_update_thresh=float(t["angular_distance_thresh"]),
        trajectory_update_rate=float(t["trajectory_update_rate"]),
    )


def kld_config_from(params: RunParams) -> KldConfig:
    t = params.table("mcl")
    return KldConfig(
        min_particles=int(t["min_particles"]),
        max_particles=int(t["max_particles"]),
        epsilon=float(t["kld_err"]),
        resample_thresh=int(t["resample_thresh"]),
    )


def update_gate_from(params: RunParams) -> tuple[float, float]:
    """(min translation, min rotation) feeding the filter-update gate."""
    t = params.table("mcl")
    return float(t["min_dist_update"]), float(t["min_angle_update"])


def initial_pose_from(params: RunParams) -> Pose2D:
    t = params.table("mcl")
    return Pose2D(float(t["initial_x_coord"]), float(t["initial_y_coord"]),
                  float(t["initial_orient"]))


def lidar_spec_from(params: RunParams,
                    base: LidarSpec | None = None) -> LidarSpec:
    t = params.table("slam")
    return replace(base or LidarSpec(),
                   range_min=float(t["lidar_min_thresh"]),
                   range_max=float(t["lidar_max_range"]))


def teb_config_from(params: RunParams) -> TebConfig:
    t = params.table("nav")
    return TebConfig(
        lin_vel_max=float(t["lin_vel_max"]),
        ang_vel_max=float(t["ang_vel_max"]),
        lin_acc_max=float(t["lin_acc_max"]),
        ang_acc_max=float(t["ang_acc_max"]),
        turning_radius_min=float(t["turning_radius_min"]),
        wheelbase=float(t["vehicle_wheelbase"]),
        min_obstacle_dist=float(t["min_obstacle_dist"]),
        inner_iters=int(t["num_inner_iterations"]),
        outer_iters=int(t["num_outer_iterations"]),
    )


def inflation_from(params: RunParams) -> InflationParams:
    t = params.table("nav")
    return InflationParams(
        radius_inflation=float(t["radius_inflation"]),
        cost_scaling_factor=float(t["cost_scaling_factor"]),
        range_obstacle=float(t["range_obstacle"]),
        range_raytrace=float(t["range_raytrace"]),
    )


def navigator_config_from(params: RunParams) -> NavigatorConfig:
    t = params.table("nav")
    return NavigatorConfig(
        teb=teb_config_from(params),
        tolerance=GoalTolerance(xy=float(t["xy_goal_tolerance"]),
                                yaw=float(t["yaw_goal_tolerance"])),
        inflation=inflation_from(params),
        local_costmap_size=float(t["local_costmap_size"]),
    )


# ------------------------------------------------------------ validation


@dataclass
class ParamCheck:
    name: str
    ok: bool
    detail: str


@dataclass
class ValidationReport:
    checks: list[ParamCheck]

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def failures(self) -> list[ParamCheck]:
        return [c for c in self.checks if not c.ok]

    def summary(self) -> str:
        lines = [f"{'PASS' if c.ok else 'FAIL'} {c.name}: {c.detail}"
                 for c in self.checks]
        verdict = "all checks passed" if self.ok else \
            f"{len(self.failures())} check(s) failed"
        return "\n".join(lines + [verdict])


def _close(a: float, b: float, tol: float = 1e-4) -> bool:
    return abs(float(a) - float(b)) <= tol


def validate_params(params: RunParams | None = None) -> ValidationReport:
    """Cross-check the parameter set against the compiled-in defaults.

    Two families of checks run. Fidelity: each registry default must match
    the corresponding dataclass default, so a bare run really executes the
    published configuration. Consistency: couplings between keys must hold
    for the *given* values, overrides included; the prime example is the
    minimum turning radius, which is not free but pinned to the wheelbase
    by the steering stop.
    """
    p = params or RunParams.defaults()
    defaults = RunParams.defaults()
    checks: list[ParamCheck] = []

    def check(name: str, ok: bool, detail: str) -> None:
        checks.append(ParamCheck(name, bool(ok), detail))

    # fidelity of the shipped defaults against each module's own defaults
    slam_cfg = slam_config_from(defaults)
    ref_slam = SlamConfig()
    for name, got, want in (
        ("map_size", slam_cfg.map_size_cells, ref_slam.map_size_cells),
        ("map_resolution", slam_cfg.map_resolution, ref_slam.map_resolution),
        ("map_multi_res_levels", slam_cfg.levels, ref_slam.levels),
        ("linear_distance_thresh", slam_cfg.linear_update_thresh,
         ref_slam.linear_update_thresh),
        ("angular_distance_thresh", slam_cfg.angular_update_thresh,
         ref_slam.angular_update_thresh),
        ("trajectory_update_rate", slam_cfg.trajectory_update_rate,
         ref_slam.trajectory_update_rate),
    ):
        check(f"slam.{name}", _close(got, want), f"{got:g} vs {want:g}")
    check("slam.free_cell_prob_sat",
          _close(defaults.get("slam.free_cell_prob_sat"), PROB_FREE_SAT),
          f"{PROB_FREE_SAT:g}")
    check("slam.ocpd_cell_prob_sat",
          _close(defaults.get("slam.ocpd_cell_prob_sat"), PROB_OCC_SAT),
          f"{PROB_OCC_SAT:g}")

    ref_lidar = LidarSpec()
    check("slam.lidar_min_thresh",
          _close(defaults.get("slam.lidar_min_thresh"), ref_lidar.range_min),
          f"{ref_lidar.range_min:g}")
    check("slam.lidar_max_range",
          _close(defaults.get("slam.lidar_max_range"), ref_lidar.range_max),
          f"{ref_lidar.range_max:g}")

    kld = kld_config_from(defaults)
    ref_kld = KldConfig()
    for name, got, want in (
        ("min_particles", kld.min_particles, ref_kld.min_particles),
        ("max_particles", kld.max_particles, ref_kld.max_particles),
        ("kld_err", kld.epsilon, ref_kld.epsilon),
        ("resample_thresh", kld.resample_thresh, ref_kld.resample_thresh),
    ):
        check(f"mcl.{name}", _close(got, want), f"{got:g} vs {want:g}")
    gate_sig = inspect.signature(should_update)
    check("mcl.min_dist_update",
          _close(defaults.get("mcl.min_dist_update"),
                 gate_sig.parameters["min_trans"].default),
          f"{gate_sig.parameters['min_trans'].default:g}")
    check("mcl.min_angle_update",
          _close(defaults.get("mcl.min_angle_update"),
                 gate_sig.parameters["min_rot"].default),
          f"{gate_sig.parameters['min_rot'].default:g}")
    check("mcl.laser_min_range",
          _close(defaults.get("mcl.laser_min_range"), ref_lidar.range_min),
          f"{ref_lidar.range_min:g}")
    check("mcl.laser_max_range",
          _close(defaults.get("mcl.laser_max_range"), ref_lidar.range_max),
          f"{ref_lidar.range_max:g}")

    teb = teb_config_from(defaults)
    ref_teb = TebConfig()
    for name, got, want in (
        ("lin_vel_max", teb.lin_vel_max, ref_teb.lin_vel_max),
        ("ang_vel_max", teb.ang_vel_max, ref_teb.ang_vel_max),
        ("lin_acc_max", teb.lin_acc_max, ref_teb.lin_acc_max),
        ("ang_acc_max", teb.ang_acc_max, ref_teb.ang_acc_max),
        ("turning_radius_min", teb.turning_radius_min,
         ref_teb.turning_radius_min),
        ("vehicle_wheelbase", teb.wheelbase, ref_teb.wheelbase),
        ("min_obstacle_dist", teb.min_obstacle_dist,
         ref_teb.min_obstacle_dist),
        ("num_inner_iterations", teb.inner_iters, ref_teb.inner_iters),
        ("num_outer_iterations", teb.outer_iters, ref_teb.outer_iters),
    ):
        check(f"nav.{name}", _close(got, want), f"{got:g} vs {want:g}")

    infl = inflation_from(defaults)
    ref_infl = InflationParams()
    for name, got, want in (
        ("radius_inflation", infl.radius_inflation,
         ref_infl.radius_inflation),
        ("cost_scaling_factor", infl.cost_scaling_factor,
         ref_infl.cost_scaling_factor),
        ("range_obstacle", infl.range_obstacle, ref_infl.range_obstacle),
        ("range_raytrace", infl.range_raytrace, ref_infl.range_raytrace),
    ):
        check(f"nav.{name}", _close(got, want), f"{got:g} vs {want:g}")

    ref_nav = NavigatorConfig()
    check("nav.local_costmap_size",
          _close(defaults.get("nav.local_costmap_size"),
                 ref_nav.local_costmap_size),
          f"{ref_nav.local_costmap_size:g}")
    ref_tol = GoalTolerance()
    check("nav.xy_goal_tolerance",
          _close(defaults.get("nav.xy_goal_tolerance"), ref_tol.xy),
          f"{ref_tol.xy:g}")
    check("nav.yaw_goal_tolerance",
          _close(defaults.get("nav.yaw_goal_tolerance"), ref_tol.yaw),
          f"{ref_tol.yaw:g}")

    vehicle = VehicleSpec()
    check("vehicle.wheelbase",
          _close(defaults.get("nav.vehicle_wheelbase"), vehicle.wheelbase),
          f"{vehicle.wheelbase:g}")
    check("vehicle.min_turning_radius",
          _close(defaults.get("nav.turning_radius_min"),
                 vehicle.min_turning_radius),
          f"{vehicle.min_turning_radius:.5f}")

    # consistency of the given values, overrides included
    nav_t = p.table("nav")
    radius = float(nav_t["turning_radius_min"])
    wheelbase = float(nav_t["vehicle_wheelbase"])
    steer = TebConfig().steering_limit
    expected = wheelbase / math.tan(steer)
    check(
        "turning_radius_min",
        _close(radius, expected),
        (f"{radius:g} ≈ {wheelbase:g}/tan({steer:g})"
         if _close(radius, expected) else
         f"{radius:g} != {expected:.5f} = {wheelbase:g}/tan({steer:g})"),
    )
    check(
        "laser_range_window",
        _close(float(p.get("slam.lidar_min_thresh")),
               float(p.get("mcl.laser_min_range")))
        and _close(float(p.get("slam.lidar_max_range")),
                   float(p.get("mcl.laser_max_range"))),
        "slam and mcl must see the same sensor window",
    )
    check(
        "vehicle_footprint",
        str(nav_t["vehicle_footprint"]) == "line",
        "only the line footprint model is implemented",
    )
    check(
        "rolling_window",
        bool(nav_t["rolling_window"]) is True,
        "the local costmap is always vehicle-centric",
    )
    return ValidationReport(checks=checks)
