"""Ackermann vehicle model: bicycle kinematics, actuator limits, encoders.

The vehicle is rear-axle referenced. Steering is the front-wheel angle of
the bicycle approximation; positive steering turns left (counter-clockwise
yaw rate). Throttle and steering commands are normalized to [-1, 1] and
mapped onto the physical saturation limits by `apply_actuation`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from deskdrive.errors import ConfigError
from deskdrive.geometry import Pose2D, wrap_angle


@dataclass(frozen=True)
class VehicleSpec:
    """Physical constants of the scaled vehicle."""

    wheelbase: float = 0.14154            # m
    steering_limit: float = 0.5236        # rad (30 deg)
    wheel_diameter: float = 0.065         # m
    track_width: float = 0.12             # m
    max_wheel_rpm: float = 130.0          # rev/min at full throttle
    encoder_cpr: int = 1920               # counts per wheel revolution
    throttle_time_constant: float = 0.15  # s, first-order speed lag (0 disables)
    steering_slew_rate: float = 5.5       # rad/s servo travel rate (0 disables)

    def __post_init__(self) -> None:
        if self.wheelbase <= 0.0:
            raise ConfigError("wheelbase must be positive")
        if not 0.0 < self.steering_limit < math.pi / 2:
            raise ConfigError("steering limit must lie in (0, pi/2)")
        if self.encoder_cpr <= 0:
            raise ConfigError("encoder resolution must be positive")

    @property
    def max_speed(self) -> float:
        """Rear-wheel rim speed at full throttle (m/s)."""
        return self.max_wheel_rpm / 60.0 * math.pi * self.wheel_diameter

    @property
    def min_turning_radius(self) -> float:
        """Rear-axle turn radius at full steering lock (m)."""
        return self.wheelbase / math.tan(self.steering_limit)


@dataclass
class VehicleState:
    """Snapshot of the simulated vehicle.

    `wheel_arc_left/right` are continuous signed wheel travel distances; the
    integer tick counters are their quantized views, re-rounded from the
    running totals each step so accumulation carries no per-step drift.
    """

    pose: Pose2D = field(default_factory=Pose2D)
    speed: float = 0.0                 # rear-axle longitudinal, signed (m/s)
    steering: float = 0.0              # rad
    commanded_throttle: float = 0.0    # normalized [-1, 1]
    commanded_steering: float = 0.0    # normalized [-1, 1]
    encoder_ticks_left: int = 0
    encoder_ticks_right: int = 0
    wheel_arc_left: float = 0.0        # m, signed cumulative
    wheel_arc_right: float = 0.0       # m, signed cumulative
    sim_time: float = 0.0


def apply_actuation(throttle: float, steering: float, spec: VehicleSpec) -> tuple[float, float]:
    """Map normalized commands onto (speed target m/s, steering target rad).

    Inputs are clamped to [-1, 1]; scaling is linear up to the saturation
    limits (full throttle is the max wheel rim speed, full steering the
    mechanical steering stop).
    """
    thr = min(max(throttle, -1.0), 1.0)
    st = min(max(steering, -1.0), 1.0)
    return thr * spec.max_speed, st * spec.steering_limit


def step_vehicle(state: VehicleState, spec: VehicleSpec, dt: float) -> VehicleState:
    """Advance the vehicle one fixed physics step.

    Steering slews toward its command at the servo rate (instantly when the
    rate is zero) and is held constant during the step; pose and speed
    integrate jointly with RK4. Speed relaxes toward the throttle target
    with a first-order lag unless the time constant is zero, in which case
    it tracks the target exactly.
    """
    if not 0.0 < dt <= 0.1:
        raise ValueError(f"physics step must lie in (0, 0.1] s, got {dt}")

    speed_target, steering_target = apply_actuation(
        state.commanded_throttle, state.commanded_steering, spec
    )

    if spec.steering_slew_rate > 0.0:
        max_delta = spec.steering_slew_rate * dt
        steer_err = steering_target - state.steering
        steering = state.steering + min(max(steer_err, -max_delta), max_delta)
    else:
        steering = steering_target
    steering = min(max(steering, -spec.steering_limit), spec.steering_limit)

    tau = spec.throttle_time_constant
    lag = tau > 0.0
    v0 = state.speed if lag else speed_target
    tan_steer = math.tan(steering)
    curvature = tan_steer / spec.wheelbase

    # State vector (x, y, yaw, v, s): s is signed rear-axle arc length.
    def deriv(q: tuple[float, ...]) -> tuple[float, ...]:
        _, _, yaw, v, _ = q
        dv = (speed_target - v) / tau if lag else 0.0
        return (v * math.cos(yaw), v * math.sin(yaw), v * curvature, dv, v)

    q0 = (state.pose.x, state.pose.y, state.pose.yaw, v0, 0.0)
    k1 = deriv(q0)
    k2 = deriv(tuple(q0[i] + 0.5 * dt * k1[i] for i in range(5)))
    k3 = deriv(tuple(q0[i] + 0.5 * dt * k2[i] for i in range(5)))
    k4 = deriv(tuple(q0[i] + dt * k3[i] for i in range(5)))
    q1 = tuple(
        q0[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) for i in range(5)
    )

    arc = q1[4]
    diff = 0.5 * spec.track_width * curvature  # differential arc-length factor
    arc_left = state.wheel_arc_left + arc * (1.0 - diff)
    arc_right = state.wheel_arc_right + arc * (1.0 + diff)
    ticks_per_m = spec.encoder_cpr / (math.pi * spec.wheel_diameter)
    return replace(
        state,
        pose=Pose2D(q1[0], q1[1], wrap_angle(q1[2])),
        speed=q1[3],
        steering=steering,
        encoder_ticks_left=int(round(arc_left * ticks_per_m)),
        encoder_ticks_right=int(round(arc_right * ticks_per_m)),
        wheel_arc_left=arc_left,
        wheel_arc_right=arc_right,
        sim_time=state.sim_time + dt,
    )


def simulate_encoders(
    prev: VehicleState, next_state: VehicleState, spec: VehicleSpec
) -> tuple[int, int]:
    """Per-wheel tick increments between two consecutive states."""
    return (
        next_state.encoder_ticks_left - prev.encoder_ticks_left,
        next_state.encoder_ticks_right - prev.encoder_ticks_right,
    )
