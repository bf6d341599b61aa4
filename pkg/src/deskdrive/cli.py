"""Command-line runner: composes the pipeline modules into named scenarios.

One invocation executes one mode. `sim` free-runs the simulator (or serves
it over the bridge for teleoperation), `record` captures a scripted survey
lap to CSV, `slam` builds a map from a lap or a recording, `localize` and
`navigate` exercise the particle filter and the planner stack on a known
map, and `park` runs the whole pipeline end to end against the bundled
scene. Every mode leaves a `report.json` in the output directory; file
artifacts (grids, datasets) land next to it with their hashes in the
report, so two runs with the same config and seed can be compared byte for
byte.

Configuration is layered: compiled-in defaults, then an optional config
file (flat `key = value` lines with `[table]` sections for parameter
tables), then command-line flags, last writer wins. Parameter overrides
use dotted keys, e.g. `--set nav.lin_vel_max=0.3`.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from deskdrive.bridge import (
    BridgeConfig,
    frame_from_state,
    record_dataset,
    replay,
    run_bridge,
    unique_scans,
)
from deskdrive.errors import (
    ConfigError,
    DegenerateGeometryError,
    DeskDriveError,
    GoalUnreachableError,
    InsufficientDataError,
)
from deskdrive.geometry import Pose2D, compose, relative_pose, wrap_angle
from deskdrive.localization import (
    ParticleSet,
    amcl_update,
    build_likelihood_field,
    estimate_pose,
    should_update,
)
from deskdrive.navigator import (
    GoalTolerance,
    NavigatorConfig,
    NavigatorState,
    navigate_step,
)
from deskdrive.odometry import OdometryState, estimate_odometry
from deskdrive.params import (
    RunParams,
    initial_pose_from,
    kld_config_from,
    lidar_spec_from,
    navigator_config_from,
    slam_config_from,
    update_gate_from,
    validate_params,
)
from deskdrive.scenarios import (
    Scenario,
    WaypointDriver,
    body_clearance,
    parking_school,
    parking_school_lap,
)
from deskdrive.simloop import LoopConfig, SimSession
from deskdrive.slam import OCC_THRESHOLD, SlamState, export_grid, \
    rasterize_world, slam_step
from deskdrive.world import load_world

MODES = ("sim", "slam", "localize", "navigate", "park", "record", "replay")

# sim-time budgets applied when the config does not give a duration
_DEFAULT_DURATION = {
    "sim": 5.0,
    "slam": 60.0,
    "localize": 60.0,
    "navigate": 60.0,
    "park": 60.0,
    "record": 60.0,
}

# initial particle cloud spread around the start pose (sigma x, y, yaw);
# wide enough to absorb a hand-placed vehicle, narrow enough that the
# filter locks on within the first few updates
_INIT_SPREAD = (0.12, 0.12, 0.10)

# a run aborts once the navigator reports itself stuck (or the goal
# unreachable) for this long without recovering
_ABORT_AFTER_S = 5.0

# minimum body clearance before a run counts as a collision: half the
# track width, i.e. the footprint edge touching geometry
_COLLISION_CLEARANCE = 0.06


# --------------------------------------------------------------- config


_RUN_KEY_HELP = {
    "mode": "one of " + "|".join(MODES),
    "world": "path to a world file (default: bundled parking lot)",
    "seed": "integer random seed",
    "out": "output directory",
    "bridge": "serve the websocket bridge (true/false)",
    "host": "bridge bind address",
    "port": "bridge port",
    "headless": "run without the bridge (true/false)",
    "duration": "sim-time budget in seconds",
    "noise": "lidar range noise sigma in meters",
    "replay": "path to a recorded dataset",
}


@dataclass
class RunConfig:
    """Everything one invocation needs, after merging file and flags."""

    mode: str
    world: str | None = None
    seed: int = 0
    out_dir: str = "out"
    bridge: bool = False
    host: str = "127.0.0.1"
    port: int = 4567
    duration: float | None = None
    noise: float = 0.003
    replay_path: str | None = None
    overrides: dict[str, str] = field(default_factory=dict)
    params: RunParams = field(default_factory=RunParams.defaults)

    @property
    def headless(self) -> bool:
        return not self.bridge


def _parse_config_text(text: str) -> dict[str, str]:
    """Flat `key = value` lines, `[table]` headers, `#` comments.

    Keys inside a table come back dotted (`table.key`); keys before any
    header are run settings or already-dotted parameter overrides.
    """
    out: dict[str, str] = {}
    table: str | None = None
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            table = line[1:-1].strip()
            if not table:
                raise ConfigError(f"line {ln}: empty table name")
            continue
        key, eq, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not eq or not key:
            raise ConfigError(
                f"line {ln}: expected 'key = value', got {raw.strip()!r}")
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        full = f"{table}.{key}" if table else key
        if full in out:
            raise ConfigError(f"line {ln}: duplicate key {full!r}")
        out[full] = value
    return out


def _parse_bool(value: str, name: str) -> bool:
    text = str(value).strip().lower()
    if text in ("true", "1", "yes", "on"):
        return True
    if text in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{name}: expected a boolean, got {value!r}")


def _parse_set_item(item: str) -> tuple[str, str]:
    key, eq, value = item.partition("=")
    if not eq or not key.strip():
        raise ConfigError(f"--set expects key=value, got {item!r}")
    return key.strip(), value.strip()


def build_config(argv: list[str] | None = None) -> RunConfig:
    """Parse flags and the optional config file into a validated RunConfig."""
    parser = argparse.ArgumentParser(
        prog="deskdrive",
        description="drive the simulated vehicle through one scenario mode",
    )
    parser.add_argument("config", nargs="?", help="optional config file")
    parser.add_argument("--mode", choices=MODES)
    parser.add_argument("--world", help=_RUN_KEY_HELP["world"])
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help=_RUN_KEY_HELP["out"])
    parser.add_argument("--bridge", action="store_true", default=None,
                        help=_RUN_KEY_HELP["bridge"])
    parser.add_argument("--host")
    parser.add_argument("--port", type=int)
    parser.add_argument("--headless", action="store_true", default=None,
                        help=_RUN_KEY_HELP["headless"])
    parser.add_argument("--duration", type=float,
                        help=_RUN_KEY_HELP["duration"])
    parser.add_argument("--replay", help=_RUN_KEY_HELP["replay"])
    parser.add_argument("--set", action="append", default=[], metavar="K=V",
                        help="parameter override, repeatable "
                             "(e.g. --set mcl.kld_err=0.05)")
    args = parser.parse_args(argv)

    settings: dict[str, str] = {}
    overrides: dict[str, str] = {}
    if args.config is not None:
        try:
            with open(args.config, encoding="utf-8") as fh:
                entries = _parse_config_text(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        for key, value in entries.items():
            if "." in key:
                overrides[key] = value
            elif key in _RUN_KEY_HELP:
                settings[key] = value
            else:
                raise ConfigError(
                    f"unknown setting {key!r}; valid settings: "
                    + ", ".join(sorted(_RUN_KEY_HELP)))

    # flags win over the file
    for name, value in (
        ("mode", args.mode), ("world", args.world), ("seed", args.seed),
        ("out", args.out), ("host", args.host), ("port", args.port),
        ("duration", args.duration), ("replay", args.replay),
    ):
        if value is not None:
            settings[name] = str(value)
    if args.bridge is not None:
        settings["bridge"] = "true"
    if args.headless is not None:
        settings["headless"] = "true"
    for item in args.set:
        key, value = _parse_set_item(item)
        overrides[key] = value

    if "mode" not in settings:
        raise ConfigError("no mode given; pass --mode "
                          + "|".join(MODES))
    mode = settings["mode"]
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; valid modes: "
                          + ", ".join(MODES))

    bridge = _parse_bool(settings.get("bridge", "false"), "bridge")
    if "headless" in settings and _parse_bool(settings["headless"],
                                              "headless") and bridge:
        raise ConfigError("--bridge and --headless conflict; the bridge "
                          "needs an interactive run")
    if bridge and mode not in ("sim", "navigate"):
        raise ConfigError(
            f"mode {mode!r} runs headless; the bridge serves sim and "
            "navigate")

    try:
        seed = int(settings.get("seed", "0"))
    except ValueError:
        raise ConfigError(
            f"seed: expected an integer, got {settings['seed']!r}") from None
    duration: float | None = None
    if "duration" in settings:
        try:
            duration = float(settings["duration"])
        except ValueError:
            raise ConfigError("duration: expected a number, got "
                              f"{settings['duration']!r}") from None
        if duration <= 0.0:
            raise ConfigError("duration must be positive")
    try:
        noise = float(settings.get("noise", "0.003"))
    except ValueError:
        raise ConfigError(
            f"noise: expected a number, got {settings['noise']!r}") from None
    if noise < 0.0:
        raise ConfigError("noise must not be negative")
    try:
        port = int(settings.get("port", "4567"))
    except ValueError:
        raise ConfigError(
            f"port: expected an integer, got {settings['port']!r}") from None

    params = RunParams.defaults()
    for key, value in overrides.items():
        params.set(key, value)  # unknown keys raise, listing valid ones
    report = validate_params(params)
    if not report.ok:
        lines = "; ".join(f"{c.name}: {c.detail}" for c in report.failures())
        raise ConfigError(f"parameter validation failed: {lines}")

    return RunConfig(
        mode=mode,
        world=settings.get("world"),
        seed=seed,
        out_dir=settings.get("out", "out"),
        bridge=bridge,
        host=settings.get("host", "127.0.0.1"),
        port=port,
        duration=duration,
        noise=noise,
        replay_path=settings.get("replay"),
        overrides=overrides,
        params=params,
    )


# ------------------------------------------------------------- plumbing


def _resolve_scene(cfg: RunConfig) -> Scenario:
    """The bundled lot, or a world file standing in for both versions."""
    if cfg.world is None:
        return parking_school()
    world = load_world(cfg.world)
    name = os.path.splitext(os.path.basename(cfg.world))[0]
    return Scenario(name=name, mapped=world, live=world)


def _require_bundled(cfg: RunConfig, why: str) -> Scenario:
    if cfg.world is not None:
        raise ConfigError(f"mode {cfg.mode!r} {why}; it runs the bundled "
                          "course and does not accept --world")
    return parking_school()


def _session(cfg: RunConfig, world) -> SimSession:
    loop = LoopConfig(seed=cfg.seed, range_noise_sigma=cfg.noise)
    return SimSession(world, lidar_spec=lidar_spec_from(cfg.params),
                      config=loop)


def _initial_pose(cfg: RunConfig, world) -> Pose2D:
    """Particle cloud center: explicit override wins, else the start pose."""
    if any(key.startswith("mcl.initial_") for key in cfg.overrides):
        return initial_pose_from(cfg.params)
    return world.start_pose


def _duration(cfg: RunConfig) -> float:
    return cfg.duration if cfg.duration is not None \
        else _DEFAULT_DURATION[cfg.mode]


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _pose_dict(pose: Pose2D) -> dict:
    return {"x": float(pose.x), "y": float(pose.y), "yaw": float(pose.yaw)}


def _write_report(cfg: RunConfig, payload: dict) -> str:
    os.makedirs(cfg.out_dir, exist_ok=True)
    payload = {"mode": cfg.mode, "seed": cfg.seed, **payload}
    path = os.path.join(cfg.out_dir, "report.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


class _Pipeline:
    """Scan-fed state estimate: dead-reckoned odometry corrected by the
    particle filter whenever enough motion has accumulated."""

    def __init__(self, cfg: RunConfig, static_map, initial: Pose2D) -> None:
        self.field = build_likelihood_field(static_map)
        self.kld = kld_config_from(cfg.params)
        self.gate = update_gate_from(cfg.params)
        # separate stream from the simulator's: the filter must not be
        # able to steal or reuse the sensor noise draws
        self.rng = np.random.default_rng((cfg.seed, 1))
        self.pset = ParticleSet.gaussian(
            initial, _INIT_SPREAD, self.kld.max_particles, self.rng)
        self.estimate, self.cov = estimate_pose(self.pset)
        self.accum = Pose2D()
        self.odo = OdometryState()
        self.prev_scan = None
        self.updates = 0

    def on_scan(self, scan) -> bool:
        """Fold one scan into the estimate; True when the filter updated."""
        if self.prev_scan is not None and scan.stamp > self.prev_scan.stamp:
            prev_pose = self.odo.pose
            try:
                self.odo = estimate_odometry(
                    self.prev_scan, scan, scan.stamp - self.prev_scan.stamp,
                    state=self.odo)
            except (InsufficientDataError, DegenerateGeometryError):
                pass  # keep dead reckoning through an unusable scan
            else:
                delta = relative_pose(prev_pose, self.odo.pose)
                self.accum = compose(self.accum, delta)
                self.estimate = compose(self.estimate, delta)
        self.prev_scan = scan
        if should_update(self.accum, *self.gate):
            self.pset = amcl_update(self.pset, self.accum, scan, self.field,
                                    self.kld, self.rng)
            self.estimate, self.cov = estimate_pose(self.pset)
            self.accum = Pose2D()
            self.updates += 1
            return True
        return False

    def particle_sample(self, limit: int = 200) -> list[list[float]]:
        """Evenly decimated particle poses, rounded for the wire."""
        poses = self.pset.poses
        stride = max(1, len(poses) // limit)
        return [[round(float(x), 3), round(float(y), 3),
                 round(float(yaw), 3)] for x, y, yaw in poses[::stride]]


def _command_scales(navcfg: NavigatorConfig,
                    session: SimSession) -> tuple[float, float]:
    """Map normalized planner output onto the vehicle's actuator range."""
    return (navcfg.teb.lin_vel_max / session.vehicle_spec.max_speed,
            navcfg.teb.steering_limit / session.vehicle_spec.steering_limit)


# ----------------------------------------------------------- mode: park


def _drive_to_goal(cfg: RunConfig, scen: Scenario,
                   navcfg: NavigatorConfig,
                   success_tol: GoalTolerance) -> dict:
    """Closed-loop drive to the scene goal on the surveyed map.

    The simulator raycasts the live world while planning sees only the
    mapped one, so anything added since the survey must be discovered by
    scan. Success is judged on the true pose against `success_tol` after
    a one-second settle; the report carries the whole story either way.
    """
    static = rasterize_world(scen.mapped)
    session = _session(cfg, scen.live)
    pipe = _Pipeline(cfg, static, _initial_pose(cfg, scen.live))
    goal = scen.live.goal_pose
    nav_state = NavigatorState()
    thr_scale, steer_scale = _command_scales(navcfg, session)
    per_control = max(int(round(session.config.physics_hz
                                / navcfg.control_rate)), 1)
    budget = _duration(cfg)

    cmd = (0.0, 0.0)
    outcome = "timeout"
    trouble_since: float | None = None
    tick = 0
    while session.sim_time < budget:
        if tick % per_control == 0 and session.last_scan is not None:
            trouble = True
            try:
                (tn, sn), _ = navigate_step(pipe.estimate, session.last_scan,
                                            static, goal, nav_state, navcfg)
                cmd = (tn * thr_scale, sn * steer_scale)
                trouble = nav_state.stuck
            except GoalUnreachableError:
                # runtime cells can momentarily seal the map; stop and let
                # the clearing pass reopen it before giving up
                cmd = (0.0, 0.0)
            if nav_state.arrived:
                outcome = "arrived"
                break
            if trouble:
                if trouble_since is None:
                    trouble_since = session.sim_time
                elif session.sim_time - trouble_since > _ABORT_AFTER_S:
                    outcome = "stuck"
                    break
            else:
                trouble_since = None
        for ev in session.advance(*cmd):
            if ev.kind == "scan":
                pipe.on_scan(ev.scan)
        tick += 1
        if body_clearance(session.state.pose, scen.live) < \
                _COLLISION_CLEARANCE:
            outcome = "collision"
            break

    # settle: report the parked pose, not the last commanded one
    for _ in range(int(round(session.config.physics_hz))):
        session.advance(0.0, 0.0)

    pose = session.state.pose
    err_xy = math.hypot(pose.x - goal.x, pose.y - goal.y)
    err_yaw = abs(wrap_angle(pose.yaw - goal.yaw))
    est_err = math.hypot(pose.x - pipe.estimate.x, pose.y - pipe.estimate.y)
    ok = outcome == "arrived" and err_xy <= success_tol.xy \
        and err_yaw <= success_tol.yaw
    return {
        "world": scen.name,
        "outcome": outcome,
        "ok": ok,
        "sim_time": float(session.sim_time),
        "final_pose": _pose_dict(pose),
        "goal": _pose_dict(goal),
        "error_xy_m": float(err_xy),
        "error_yaw_rad": float(err_yaw),
        "estimate_error_m": float(est_err),
        "filter_updates": pipe.updates,
        "particles": len(pipe.pset),
    }


def _run_park(cfg: RunConfig) -> tuple[int, dict]:
    scen = _resolve_scene(cfg)
    if scen.live.goal_pose is None:
        raise ConfigError("the world file has no goal pose")
    # drive to a tighter internal tolerance than the published one so the
    # controller keeps correcting until it is safely inside the window
    published = navigator_config_from(cfg.params).tolerance
    internal = GoalTolerance(xy=min(0.07, published.xy),
                             yaw=min(0.07, published.yaw))
    navcfg = replace(navigator_config_from(cfg.params), tolerance=internal)
    report = _drive_to_goal(cfg, scen, navcfg, published)
    return (0 if report["ok"] else 1), report


# ------------------------------------------------------- mode: navigate


def _run_navigate(cfg: RunConfig) -> tuple[int, dict]:
    scen = _resolve_scene(cfg)
    navcfg = navigator_config_from(cfg.params)
    if cfg.bridge:
        return _serve_bridge(cfg, scen, autopilot=True)
    if scen.live.goal_pose is None:
        raise ConfigError("no goal: the world file has no goal pose and "
                          "the bridge is off")
    report = _drive_to_goal(cfg, scen, navcfg, navcfg.tolerance)
    return (0 if report["ok"] else 1), report


# ------------------------------------------------------------ mode: sim


def _run_sim(cfg: RunConfig) -> tuple[int, dict]:
    scen = _resolve_scene(cfg)
    if cfg.bridge:
        return _serve_bridge(cfg, scen, autopilot=False)
    session = _session(cfg, scen.live)
    budget = _duration(cfg)
    scans = 0
    steps = int(round(budget * session.config.physics_hz))
    for _ in range(steps):
        scans += sum(1 for ev in session.advance(0.0, 0.0)
                     if ev.kind == "scan")
    return 0, {
        "world": scen.name,
        "outcome": "completed",
        "sim_time": float(session.sim_time),
        "physics_steps": steps,
        "scans": scans,
        "final_pose": _pose_dict(session.state.pose),
    }


def _serve_bridge(cfg: RunConfig, scen: Scenario,
                  autopilot: bool) -> tuple[int, dict]:
    """Serve the live world over websockets until duration or interrupt."""
    session = _session(cfg, scen.live)
    bridge_cfg = BridgeConfig(host=cfg.host, port=cfg.port)
    pilot = None
    navcfg = navigator_config_from(cfg.params)
    if autopilot:
        static = rasterize_world(scen.mapped)
        pilot_box: dict = {}

        def _fresh_pilot():
            return {
                "pipe": _Pipeline(cfg, static, _initial_pose(cfg, scen.live)),
                "nav": NavigatorState(),
                "stamp": None,
                "t": -math.inf,
            }

        def pilot(t: float, sess: SimSession, goal: Pose2D | None):
            if not pilot_box or t < pilot_box["state"]["t"]:
                pilot_box["state"] = _fresh_pilot()  # fresh after a reset
            st = pilot_box["state"]
            st["t"] = t
            scan = sess.last_scan
            if scan is not None and (st["stamp"] is None
                                     or scan.stamp > st["stamp"]):
                st["pipe"].on_scan(scan)
                st["stamp"] = scan.stamp
            target = goal if goal is not None else scen.live.goal_pose
            if target is None or scan is None:
                return 0.0, 0.0, None
            thr_scale, steer_scale = _command_scales(navcfg, sess)
            try:
                (tn, sn), diag = navigate_step(
                    st["pipe"].estimate, scan, static, target, st["nav"],
                    navcfg)
            except GoalUnreachableError as exc:
                return 0.0, 0.0, {"error": str(exc)}
            info = diag.to_dict()
            info["estimate"] = _pose_dict(st["pipe"].estimate)
            info["particles"] = st["pipe"].particle_sample()
            return tn * thr_scale, sn * steer_scale, info

    interrupted = False
    frames = 0
    print(f"serving ws://{cfg.host}:{cfg.port}/ "
          f"({'autonomous-capable' if autopilot else 'teleop'}); "
          "interrupt to stop")
    try:
        frames = run_bridge(session, bridge_cfg, autopilot=pilot,
                            control_rate=navcfg.control_rate,
                            duration=cfg.duration, realtime=True)
    except KeyboardInterrupt:
        interrupted = True
    return 0, {
        "world": scen.name,
        "outcome": "interrupted" if interrupted else "completed",
        "endpoint": f"ws://{cfg.host}:{cfg.port}/",
        "frames": frames,
        "sim_time": float(session.sim_time),
    }


# ------------------------------------------------- survey lap machinery


def _lap_session(cfg: RunConfig, scen: Scenario) -> tuple[SimSession,
                                                          WaypointDriver]:
    # the survey happens before anything extra shows up, so the lap drives
    # the mapped world even when the live one differs
    return _session(cfg, scen.mapped), WaypointDriver(parking_school_lap())


def _drive_lap(session: SimSession, driver: WaypointDriver, budget: float,
               on_event) -> None:
    """Step the scripted lap until it finishes or the budget runs out."""
    while session.sim_time < budget and not driver.finished:
        cmd = driver(session.sim_time, session.state)
        for ev in session.advance(*cmd):
            on_event(ev)


# ----------------------------------------------------------- mode: slam


def _slam_from_scans(cfg: RunConfig, scans) -> SlamState:
    state = SlamState.create(slam_config_from(cfg.params))
    for scan in scans:
        state = slam_step(state, scan)
    return state


def _grid_artifact(cfg: RunConfig, state: SlamState) -> dict:
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "map.ogrid")
    export_grid(state.grids[0], path)
    return {
        "map_file": path,
        "map_sha256": _sha256(path),
        "map_updates": state.map_update_count,
        "scans": state.scan_count,
        "final_pose": _pose_dict(state.pose),
    }


def _run_slam(cfg: RunConfig) -> tuple[int, dict]:
    if cfg.replay_path is not None:
        frames = list(replay(cfg.replay_path))
        scans = unique_scans(frames)
        if not scans:
            raise DeskDriveError("recording contains no scans")
        state = _slam_from_scans(cfg, scans)
        report = {"source": cfg.replay_path, "rows": len(frames),
                  "outcome": "mapped", **_grid_artifact(cfg, state)}
        return 0, report

    scen = _require_bundled(cfg, "maps a live lap only on the bundled "
                                 "course (use --replay for other worlds)")
    session, driver = _lap_session(cfg, scen)
    scans: list = []
    _drive_lap(session, driver, _duration(cfg),
               lambda ev: scans.append(ev.scan) if ev.kind == "scan"
               else None)
    state = _slam_from_scans(cfg, scans)

    # the map frame is anchored at the first vehicle pose, so truth gets
    # rasterized about the start and the loop error measured relative
    start = scen.mapped.start_pose
    truth = rasterize_world(scen.mapped, center=(start.x, start.y))
    built = state.grids[0]
    prob, known = built.probability(), built.known
    tprob = truth.probability()
    classes = np.where(prob >= OCC_THRESHOLD, 2,
                       np.where(prob <= 1.0 - OCC_THRESHOLD, 0, 1))
    tclasses = np.where(tprob >= OCC_THRESHOLD, 2,
                        np.where(tprob <= 1.0 - OCC_THRESHOLD, 0, 1))
    agreement = float((classes[known] == tclasses[known]).mean()) \
        if known.any() else 0.0
    true_rel = relative_pose(start, session.state.pose)
    loop_err_xy = math.hypot(state.pose.x - true_rel.x,
                             state.pose.y - true_rel.y)
    loop_err_yaw = abs(wrap_angle(state.pose.yaw - true_rel.yaw))

    report = {
        "world": scen.name,
        "outcome": "mapped" if driver.finished else "lap_incomplete",
        "sim_time": float(session.sim_time),
        "cell_agreement": agreement,
        "loop_error_xy_m": float(loop_err_xy),
        "loop_error_yaw_rad": float(loop_err_yaw),
        **_grid_artifact(cfg, state),
    }
    return (0 if driver.finished else 1), report


# ------------------------------------------------------- mode: localize


def _run_localize(cfg: RunConfig) -> tuple[int, dict]:
    scen = _require_bundled(cfg, "scores the filter on the bundled course")
    static = rasterize_world(scen.mapped)
    session, driver = _lap_session(cfg, scen)
    pipe = _Pipeline(cfg, static, _initial_pose(cfg, scen.mapped))

    errors: list[float] = []
    particle_counts: list[int] = []

    def on_event(ev) -> None:
        if ev.kind != "scan":
            return
        if pipe.on_scan(ev.scan):
            true = ev.state.pose
            errors.append(math.hypot(pipe.estimate.x - true.x,
                                     pipe.estimate.y - true.y))
            particle_counts.append(len(pipe.pset))

    _drive_lap(session, driver, _duration(cfg), on_event)
    if not errors:
        raise DeskDriveError("the lap produced no filter updates")
    report = {
        "world": scen.name,
        "outcome": "completed" if driver.finished else "lap_incomplete",
        "sim_time": float(session.sim_time),
        "filter_updates": len(errors),
        "error_mean_m": float(np.mean(errors)),
        "error_max_m": float(np.max(errors)),
        "error_final_m": float(errors[-1]),
        "particles_min": int(min(particle_counts)),
        "particles_max": int(max(particle_counts)),
    }
    return (0 if driver.finished else 1), report


# --------------------------------------------------------- mode: record


def _run_record(cfg: RunConfig) -> tuple[int, dict]:
    scen = _require_bundled(cfg, "records the bundled survey lap")
    session, driver = _lap_session(cfg, scen)
    budget = _duration(cfg)

    def frames():
        seq = 0
        while session.sim_time < budget and not driver.finished:
            cmd = driver(session.sim_time, session.state)
            for ev in session.advance(*cmd):
                if ev.kind == "telemetry":
                    yield frame_from_state(seq, ev.state, ev.scan)
                    seq += 1

    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "run.csv")
    rows = record_dataset(frames(), path, rate=session.config.telemetry_hz)
    report = {
        "world": scen.name,
        "outcome": "recorded" if driver.finished else "lap_incomplete",
        "sim_time": float(session.sim_time),
        "dataset": path,
        "dataset_sha256": _sha256(path),
        "rows": rows,
    }
    return (0 if driver.finished else 1), report


# --------------------------------------------------------- mode: replay


def _run_replay(cfg: RunConfig) -> tuple[int, dict]:
    if cfg.replay_path is None:
        raise ConfigError("mode 'replay' needs --replay with a dataset path")
    frames = list(replay(cfg.replay_path))
    if not frames:
        raise DeskDriveError("dataset has no rows")
    scans = unique_scans(frames)
    report = {
        "source": cfg.replay_path,
        "source_sha256": _sha256(cfg.replay_path),
        "outcome": "valid",
        "rows": len(frames),
        "scans": len(scans),
        "first_stamp": float(frames[0].sim_time),
        "last_stamp": float(frames[-1].sim_time),
    }
    return 0, report


# ----------------------------------------------------------- entrypoint


_RUNNERS = {
    "sim": _run_sim,
    "slam": _run_slam,
    "localize": _run_localize,
    "navigate": _run_navigate,
    "park": _run_park,
    "record": _run_record,
    "replay": _run_replay,
}


def run(cfg: RunConfig) -> tuple[int, dict]:
    """Execute one mode; returns (exit code, report payload)."""
    return _RUNNERS[cfg.mode](cfg)


def main(argv: list[str] | None = None) -> int:
    try:
        cfg = build_config(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        code, report = run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DeskDriveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        _write_report(cfg, {"outcome": "error", "error": str(exc)})
        return 1

    path = _write_report(cfg, report)
    print(f"{cfg.mode}: {report.get('outcome', 'done')} -> {path}")
    return code


if __name__ == "__main__":
    sys.exit(main())
