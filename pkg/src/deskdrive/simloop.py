"""Fixed-step simulation loop with rate-divided sensor and telemetry events.

The loop advances physics on a fixed grid and emits events when a lower-rate
schedule comes due, checking due-ness before each physics step so an event
scheduled at t=0 fires with the initial state. All randomness flows through
one seeded generator, which makes a run a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterator

import numpy as np

from deskdrive.errors import ConfigError
from deskdrive.geometry import Pose2D
from deskdrive.lidar import LaserScan, LidarSpec, cast_scan
from deskdrive.vehicle import VehicleSpec, VehicleState, step_vehicle
from deskdrive.world import WorldModel

_DUE_EPS = 1e-9

CommandFn = Callable[[float, VehicleState], tuple[float, float]]


@dataclass(frozen=True)
class LoopConfig:
    physics_hz: float = 100.0
    telemetry_hz: float = 15.0
    seed: int = 0
    range_noise_sigma: float = 0.0

    def __post_init__(self) -> None:
        if self.physics_hz <= 0.0:
            raise ConfigError("physics rate must be positive")
        if self.telemetry_hz <= 0.0:
            raise ConfigError("telemetry rate must be positive")


@dataclass
class SimEvent:
    kind: str                      # "scan" or "telemetry"
    state: VehicleState
    scan: LaserScan | None = None  # fresh for "scan", latest for "telemetry"


class SimSession:
    """Steppable simulation core shared by the batch loop and the bridge."""

    def __init__(
        self,
        world: WorldModel,
        vehicle_spec: VehicleSpec | None = None,
        lidar_spec: LidarSpec | None = None,
        config: LoopConfig | None = None,
    ) -> None:
        self.world = world
        self.vehicle_spec = vehicle_spec or VehicleSpec()
        self.lidar_spec = lidar_spec or LidarSpec()
        self.config = config or LoopConfig()
        if self.config.physics_hz < self.lidar_spec.rate:
            raise ConfigError("physics rate must not be below the scan rate")
        if self.config.physics_hz < self.config.telemetry_hz:
            raise ConfigError("physics rate must not be below the telemetry rate")
        self.reset()

    @property
    def dt(self) -> float:
        return 1.0 / self.config.physics_hz

    @property
    def sim_time(self) -> float:
        """Start time of the next physics step."""
        return self._tick * self.dt

    def reset(self, pose: Pose2D | None = None, seed: int | None = None) -> None:
        start = pose if pose is not None else self.world.start_pose
        self.state = VehicleState(pose=start)
        self.rng = np.random.default_rng(self.config.seed if seed is None else seed)
        self.last_scan: LaserScan | None = None
        self._tick = 0
        self._scans_emitted = 0
        self._telemetry_emitted = 0

    def advance(self, throttle: float, steering: float) -> list[SimEvent]:
        """Run one physics tick; return events due at the tick's start time."""
        t = self._tick * self.dt
        events: list[SimEvent] = []

        if t + _DUE_EPS >= self._scans_emitted / self.lidar_spec.rate:
            scan = cast_scan(
                self.world,
                self.state.pose,
                self.lidar_spec,
                stamp=t,
                rng=self.rng,
                noise_sigma=self.config.range_noise_sigma,
            )
            self.last_scan = scan
            self._scans_emitted += 1
            events.append(SimEvent("scan", self.state, scan))

        if t + _DUE_EPS >= self._telemetry_emitted / self.config.telemetry_hz:
            self._telemetry_emitted += 1
            events.append(SimEvent("telemetry", self.state, self.last_scan))

        self.state = replace(
            self.state, commanded_throttle=throttle, commanded_steering=steering
        )
        self.state = step_vehicle(self.state, self.vehicle_spec, self.dt)
        self._tick += 1
        return events


def run_loop(
    world: WorldModel,
    command_fn: CommandFn,
    duration: float,
    vehicle_spec: VehicleSpec | None = None,
    lidar_spec: LidarSpec | None = None,
    config: LoopConfig | None = None,
    start_pose: Pose2D | None = None,
) -> Iterator[SimEvent]:
    """Yield scan and telemetry events for `duration` seconds of sim time."""
    if duration <= 0.0:
        raise ValueError("duration must be positive")
    session = SimSession(world, vehicle_spec, lidar_spec, config)
    if start_pose is not None:
        session.reset(pose=start_pose)
    steps = int(round(duration * session.config.physics_hz))
    for _ in range(steps):
        t = session._tick * session.dt
        throttle, steering = command_fn(t, session.state)
        yield from session.advance(throttle, steering)


def constant_command(throttle: float, steering: float) -> CommandFn:
    return lambda t, state: (throttle, steering)


@dataclass
class ScriptedCommands:
    """Piecewise-constant command profile: each entry holds from its time on."""

    schedule: list[tuple[float, float, float]] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.schedule = sorted(self.schedule, key=lambda e: e[0])

    def __call__(self, t: float, state: VehicleState) -> tuple[float, float]:
        throttle, steering = 0.0, 0.0
        for start, thr, st in self.schedule:
            if t + _DUE_EPS >= start:
                throttle, steering = thr, st
            else:
                break
        return throttle, steering
