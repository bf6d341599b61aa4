"""WebSocket telemetry/command bridge and the CSV dataset recorder.

The server accepts any number of concurrent clients. Every outbound frame
is one complete JSON text message (schema version field "v": 1), built and
serialized on the simulation thread before it is handed to the network
loop, so a frame is never observable half-written. All inbound commands
funnel through one thread-safe queue that the simulation loop drains at
the top of every physics step; the sim thread stays the only writer of
simulation state and command latency is at most one step.

Client to server message types: "drive", "goal", "mode", "reset". Server
to client: "telemetry", "ack", "error". Drive commands are applied
silently (their effect shows up in telemetry and acking at stream rate
would double the chatter); goal, mode and reset get an ack. A drive
command older than 500 ms of sim time is treated as released and the
throttle zeroed: a frozen or disconnected operator must not leave the
vehicle driving.

JSON cannot carry infinities, so no-echo beams are sent as null in
telemetry; the CSV recorder writes them as `inf`, which round-trips
through the replay parser.
"""

from __future__ import annotations

import asyncio
import json
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np
import websockets
from websockets.asyncio.server import broadcast as ws_broadcast
from websockets.asyncio.server import serve as ws_serve

from deskdrive.errors import (
    BridgeStartupError,
    ConfigError,
    DatasetWriteError,
    ReplayFormatError,
)
from deskdrive.geometry import Pose2D
from deskdrive.lidar import LaserScan, LidarSpec
from deskdrive.simloop import SimSession
from deskdrive.vehicle import VehicleState

SCHEMA_VERSION = 1
DRIVE_TIMEOUT_S = 0.5
DATASET_HEADER = (
    "stamp,pos_x,pos_y,yaw,vel,throttle,steering,le_ticks,re_ticks,lidar_ranges"
)

_DUE_EPS = 1e-9

# autopilot contract: called at the control rate with (sim time, session,
# current goal or None), returns (throttle, steering, diagnostics or None)
AutopilotFn = Callable[
    [float, SimSession, "Pose2D | None"], tuple[float, float, "dict | None"]
]


@dataclass(frozen=True)
class BridgeConfig:
    host: str = "127.0.0.1"
    port: int = 4567
    telemetry_rate: float = 15.0  # Hz

    def __post_init__(self) -> None:
        if not 1 <= self.port <= 65535:
            raise ConfigError(f"port must lie in [1, 65535], got {self.port}")
        if self.telemetry_rate <= 0.0:
            raise ConfigError("telemetry rate must be positive")


@dataclass
class TelemetryFrame:
    """One broadcast sample of the vehicle plus its latest scan."""

    seq: int
    sim_time: float
    pose: Pose2D
    vel: float                    # signed rear-axle speed (m/s)
    throttle: float               # commanded, normalized [-1, 1]
    steering: float               # actual front wheel angle (rad)
    encoder_left: int
    encoder_right: int
    scan: LaserScan | None
    nav: dict | None = None      # autopilot diagnostics when available

    def to_message(self) -> dict:
        scan_block = None
        if self.scan is not None:
            spec = self.scan.spec
            scan_block = {
                "stamp": float(self.scan.stamp),
                "angle_min": spec.angle_min,
                "angle_increment": spec.angle_increment,
                "range_min": spec.range_min,
                "range_max": spec.range_max,
                "ranges": [
                    float(r) if math.isfinite(r) else None
                    for r in self.scan.ranges
                ],
            }
        return {
            "v": SCHEMA_VERSION,
            "type": "telemetry",
            "seq": self.seq,
            "sim_time": float(self.sim_time),
            "pose": {
                "x": float(self.pose.x),
                "y": float(self.pose.y),
                "yaw": float(self.pose.yaw),
            },
            "vel": float(self.vel),
            "throttle": float(self.throttle),
            "steering": float(self.steering),
            "encoder_left": int(self.encoder_left),
            "encoder_right": int(self.encoder_right),
            "scan": scan_block,
            "nav": self.nav,
        }

    def to_json(self) -> str:
        # allow_nan=False: a non-finite value anywhere outside the sanitized
        # ranges list is a bug, and emitting bare Infinity would hand
        # clients unparseable JSON
        return json.dumps(self.to_message(), separators=(",", ":"),
                          allow_nan=False)


def frame_from_state(seq: int, state: VehicleState,
                     scan: LaserScan | None,
                     nav: dict | None = None) -> TelemetryFrame:
    return TelemetryFrame(
        seq=seq,
        sim_time=state.sim_time,
        pose=state.pose,
        vel=state.speed,
        throttle=state.commanded_throttle,
        steering=state.steering,
        encoder_left=state.encoder_ticks_left,
        encoder_right=state.encoder_ticks_right,
        scan=scan,
        nav=nav,
    )


def _error_reply(message: str) -> dict:
    return {"v": SCHEMA_VERSION, "type": "error", "message": message}


def _ack_reply(cmd: str) -> dict:
    return {"v": SCHEMA_VERSION, "type": "ack", "cmd": cmd}


def _finite_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) \
        and math.isfinite(value)


class BridgeServer:
    """Network half of the bridge: acceptor, per-client IO, command queue.

    The asyncio event loop runs on a private daemon thread. The simulation
    thread talks to it through exactly two channels: `broadcast_frame`
    (handed to the loop thread for fan-out) and `drain_commands` (a
    thread-safe queue filled by the loop thread). Client registration and
    message routing happen only on the loop thread.
    """

    def __init__(self, cfg: BridgeConfig) -> None:
        self.cfg = cfg
        self.commands: "queue.Queue[dict]" = queue.Queue()
        self._clients: set = set()
        self._loop: asyncio.AbstractEventLoop | None = None
        self._stop_future: asyncio.Future | None = None
        self._thread: threading.Thread | None = None
        self._ready = threading.Event()
        self._startup_exc: BaseException | None = None

    def start(self) -> None:
        """Bring the endpoint up; raises when the socket cannot be bound."""
        self._thread = threading.Thread(
            target=self._thread_main, name="bridge-server", daemon=True
        )
        self._thread.start()
        self._ready.wait()
        if self._startup_exc is not None:
            raise BridgeStartupError(
                f"cannot serve on {self.cfg.host}:{self.cfg.port}: "
                f"{self._startup_exc}"
            )

    def close(self) -> None:
        loop = self._loop
        if loop is not None and not loop.is_closed():
            def _finish() -> None:
                if self._stop_future is not None and not self._stop_future.done():
                    self._stop_future.set_result(None)
            try:
                loop.call_soon_threadsafe(_finish)
            except RuntimeError:
                pass
        if self._thread is not None:
            self._thread.join(timeout=5.0)

    def broadcast_frame(self, frame: TelemetryFrame) -> None:
        """Fan a frame out to every connected client (sim thread entry)."""
        payload = frame.to_json()
        loop = self._loop
        if loop is None or loop.is_closed():
            return
        try:
            loop.call_soon_threadsafe(ws_broadcast, self._clients, payload)
        except RuntimeError:
            pass  # loop shut down between the check and the call

    def drain_commands(self) -> list[dict]:
        out: list[dict] = []
        while True:
            try:
                out.append(self.commands.get_nowait())
            except queue.Empty:
                return out

    def _thread_main(self) -> None:
        asyncio.run(self._main())

    async def _main(self) -> None:
        self._loop = asyncio.get_running_loop()
        self._stop_future = self._loop.create_future()
        try:
            async with ws_serve(self._handle_client, self.cfg.host,
                                self.cfg.port):
                self._ready.set()
                await self._stop_future
        except OSError as exc:
            self._startup_exc = exc
            self._ready.set()

    async def _handle_client(self, ws) -> None:
        self._clients.add(ws)
        try:
            async for raw in ws:
                reply = self._route(raw)
                if reply is not None:
                    await ws.send(json.dumps(reply, separators=(",", ":")))
        except websockets.ConnectionClosed:
            pass
        finally:
            self._clients.discard(ws)

    def _route(self, raw) -> dict | None:
        """Validate one inbound message; queue it when well-formed.

        A malformed message earns an error reply but never the connection:
        the operator fixing a typo in a hand-rolled client should not get
        kicked off the stream.
        """
        try:
            msg = json.loads(raw)
        except (json.JSONDecodeError, UnicodeDecodeError):
            return _error_reply("payload is not valid JSON")
        if not isinstance(msg, dict):
            return _error_reply("payload must be a JSON object")
        version = msg.get("v", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            return _error_reply(f"unsupported schema version {version!r}")
        mtype = msg.get("type")
        if mtype == "drive":
            throttle = msg.get("throttle")
            steering = msg.get("steering")
            if not (_finite_number(throttle) and _finite_number(steering)):
                return _error_reply(
                    "drive requires finite numeric throttle and steering"
                )
            self.commands.put({
                "type": "drive",
                "throttle": float(throttle),
                "steering": float(steering),
            })
            return None
        if mtype == "goal":
            fields = (msg.get("x"), msg.get("y"), msg.get("yaw"))
            if not all(_finite_number(v) for v in fields):
                return _error_reply("goal requires finite numeric x, y, yaw")
            self.commands.put({
                "type": "goal",
                "x": float(fields[0]),
                "y": float(fields[1]),
                "yaw": float(fields[2]),
            })
            return _ack_reply("goal")
        if mtype == "mode":
            mode = msg.get("mode")
            if mode not in ("manual", "autonomous"):
                return _error_reply(
                    'mode must be "manual" or "autonomous"'
                )
            self.commands.put({"type": "mode", "mode": mode})
            return _ack_reply("mode")
        if mtype == "reset":
            self.commands.put({"type": "reset"})
            return _ack_reply("reset")
        return _error_reply(f"unknown message type {mtype!r}")


@dataclass
class CommandState:
    """Latest operator intent, as seen by the simulation loop."""

    throttle: float = 0.0
    steering: float = 0.0
    drive_stamp: float = -math.inf  # sim time of the last drive refresh
    goal: Pose2D | None = None
    mode: str = "manual"


def run_bridge(
    session: SimSession,
    cfg: BridgeConfig,
    autopilot: AutopilotFn | None = None,
    control_rate: float = 10.0,
    duration: float | None = None,
    realtime: bool = True,
    stop: "threading.Event | None" = None,
    server: BridgeServer | None = None,
    sink: "Callable[[TelemetryFrame], None] | None" = None,
) -> int:
    """Serve a simulation session over the bridge until stopped.

    Runs the physics loop, draining the command queue before every step
    and broadcasting a telemetry frame whenever one comes due on the
    configured rate. In manual mode the latest drive command (subject to
    the dead-man timeout) feeds the vehicle; in autonomous mode the
    `autopilot` callable is polled at `control_rate` and its command held
    between polls. `sink` sees every broadcast frame, which is how the
    dataset recorder taps a live run. With `realtime` the loop paces
    itself to the wall clock; otherwise it free-runs.

    Returns the number of frames broadcast. The server is created and torn
    down here unless an already started one is passed in.
    """
    if control_rate <= 0.0:
        raise ConfigError("control rate must be positive")
    own_server = server is None
    if own_server:
        server = BridgeServer(cfg)
        server.start()

    cmd = CommandState()
    seq = 0
    frames_due = 0
    controls_due = 0
    auto_cmd = (0.0, 0.0)
    nav_info: dict | None = None
    t0_sim = session.sim_time  # emission schedules anchor here
    wall_start = time.monotonic() - t0_sim

    try:
        while True:
            if stop is not None and stop.is_set():
                break
            t = session.sim_time
            if duration is not None and t + _DUE_EPS >= duration:
                break

            for c in server.drain_commands():
                if c["type"] == "drive":
                    cmd.throttle = c["throttle"]
                    cmd.steering = c["steering"]
                    cmd.drive_stamp = t
                elif c["type"] == "goal":
                    cmd.goal = Pose2D(c["x"], c["y"], c["yaw"])
                elif c["type"] == "mode":
                    cmd.mode = c["mode"]
                elif c["type"] == "reset":
                    session.reset()
                    cmd = CommandState()
                    frames_due = 0
                    controls_due = 0
                    auto_cmd = (0.0, 0.0)
                    nav_info = None
                    t = t0_sim = session.sim_time
                    wall_start = time.monotonic() - t0_sim

            if cmd.mode == "autonomous":
                if autopilot is not None and \
                        t - t0_sim + _DUE_EPS >= controls_due / control_rate:
                    controls_due += 1
                    throttle, steering, nav_info = autopilot(
                        t, session, cmd.goal
                    )
                    auto_cmd = (throttle, steering)
                throttle, steering = auto_cmd
            else:
                throttle, steering = cmd.throttle, cmd.steering
                if t - cmd.drive_stamp > DRIVE_TIMEOUT_S:
                    throttle = 0.0  # dead-man: stale command stops the car

            emit = t - t0_sim + _DUE_EPS >= frames_due / cfg.telemetry_rate
            state_at_t = session.state
            session.advance(throttle, steering)
            if emit:
                # scan freshness matches the frame stamp: a scan due at t was
                # cast inside the advance above and is already last_scan
                frames_due += 1
                frame = frame_from_state(
                    seq, state_at_t, session.last_scan,
                    nav_info if cmd.mode == "autonomous" else None,
                )
                seq += 1
                server.broadcast_frame(frame)
                if sink is not None:
                    sink(frame)

            if realtime:
                lag = wall_start + session.sim_time - time.monotonic()
                if lag > 0.0:
                    time.sleep(lag)
    finally:
        if own_server:
            server.close()
    return seq


def _fmt(value: float) -> str:
    # repr gives the shortest string that parses back to the same float,
    # which is what makes record -> replay -> record byte-identical
    return repr(float(value))


def record_dataset(stream: Iterable[TelemetryFrame], path: str,
                   rate: float) -> int:
    """Write a telemetry stream to CSV, decimated to at most `rate` rows/s.

    The row schedule is anchored at the first frame's stamp: row k goes out
    with the first frame at or past t0 + k/rate, so a stream already at the
    target rate passes through unthinned. Ranges are semicolon-joined with
    no-echo beams spelled `inf`; a frame with no scan yet leaves the field
    empty. Returns the row count. On a write failure the partial file is
    left in place and the raised error says so.
    """
    if rate <= 0.0:
        raise ConfigError("recording rate must be positive")
    rows = 0
    try:
        fh = open(path, "w", newline="")
    except OSError as exc:
        raise DatasetWriteError(
            f"cannot open {path} for writing: {exc}", partial=False
        ) from exc
    try:
        with fh:
            try:
                fh.write(DATASET_HEADER + "\n")
                t0 = None
                for frame in stream:
                    t = frame.sim_time
                    if t0 is None:
                        t0 = t
                    if t - t0 + _DUE_EPS < rows / rate:
                        continue
                    if frame.scan is not None:
                        ranges = ";".join(_fmt(r) for r in frame.scan.ranges)
                    else:
                        ranges = ""
                    fh.write(",".join((
                        _fmt(t),
                        _fmt(frame.pose.x),
                        _fmt(frame.pose.y),
                        _fmt(frame.pose.yaw),
                        _fmt(frame.vel),
                        _fmt(frame.throttle),
                        _fmt(frame.steering),
                        str(int(frame.encoder_left)),
                        str(int(frame.encoder_right)),
                        ranges,
                    )) + "\n")
                    rows += 1
            except OSError as exc:
                raise DatasetWriteError(
                    f"write to {path} failed after {rows} rows: {exc}",
                    partial=True, rows_written=rows,
                ) from exc
    except OSError as exc:
        # close/flush failure: data may be missing from the tail
        raise DatasetWriteError(
            f"finalizing {path} failed after {rows} rows: {exc}",
            partial=True, rows_written=rows,
        ) from exc
    return rows


def unique_scans(frames: Iterable[TelemetryFrame]) -> list[LaserScan]:
    """Collapse a frame stream to its distinct scans, in order.

    Telemetry runs faster than the sensor, so consecutive frames repeat the
    latest sweep, and the CSV keeps no scan identity of its own. Equality
    of the range arrays is the only repeat signal that survives a record/
    replay cycle; with range noise enabled, distinct sweeps never collide.
    This is the adapter between a frame stream and the scan-fed estimators.
    """
    out: list[LaserScan] = []
    prev: "np.ndarray | None" = None
    for frame in frames:
        scan = frame.scan
        if scan is None:
            continue
        if prev is not None and np.array_equal(prev, scan.ranges):
            continue
        out.append(scan)
        prev = scan.ranges
    return out


def _spec_for_beam_count(count: int) -> LidarSpec:
    """Sensor geometry assumed on replay: the stock full-circle sweep.

    The CSV keeps only the range array, so angular layout is reconstructed
    by convention: beams span the full circle starting at -pi.
    """
    default = LidarSpec()
    if count == default.beam_count:
        return default
    return LidarSpec(beam_count=count,
                     angle_increment=2.0 * math.pi / count)


def replay(path: str, realtime: bool = False) -> Iterator[TelemetryFrame]:
    """Re-emit recorded frames; `realtime` sleeps out the stamp gaps.

    Returns a lazy iterator. The file is opened eagerly so a missing path
    fails at the call site; format errors surface during iteration and
    name the offending data row (the header is row 0).
    """
    fh = open(path, "r", newline="")

    def _frames() -> Iterator[TelemetryFrame]:
        with fh:
            header = fh.readline()
            if header == "":
                return  # zero-byte file: zero frames
            if header.rstrip("\r\n") != DATASET_HEADER:
                raise ReplayFormatError(
                    "header mismatch: file is not in recorder format"
                )
            prev_stamp: float | None = None
            for rownum, line in enumerate(fh, start=1):
                parts = line.rstrip("\r\n").split(",")
                if len(parts) != 10:
                    raise ReplayFormatError(
                        f"row {rownum}: expected 10 fields, got {len(parts)}"
                    )
                try:
                    stamp = float(parts[0])
                    pose = Pose2D(float(parts[1]), float(parts[2]),
                                  float(parts[3]))
                    vel = float(parts[4])
                    throttle = float(parts[5])
                    steering = float(parts[6])
                    ticks_l = int(parts[7])
                    ticks_r = int(parts[8])
                    if parts[9]:
                        ranges = np.array(
                            [float(tok) for tok in parts[9].split(";")]
                        )
                    else:
                        ranges = None
                except ValueError as exc:
                    raise ReplayFormatError(f"row {rownum}: {exc}") from exc
                if ranges is not None and len(ranges) < 2:
                    raise ReplayFormatError(
                        f"row {rownum}: a scan needs at least two beams"
                    )
                scan = None
                if ranges is not None:
                    scan = LaserScan(
                        stamp=stamp, ranges=ranges,
                        spec=_spec_for_beam_count(len(ranges)),
                    )
                if realtime and prev_stamp is not None:
                    gap = stamp - prev_stamp
                    if gap > 0.0:
                        time.sleep(gap)
                prev_stamp = stamp
                yield TelemetryFrame(
                    seq=rownum - 1,
                    sim_time=stamp,
                    pose=pose,
                    vel=vel,
                    throttle=throttle,
                    steering=steering,
                    encoder_left=ticks_l,
                    encoder_right=ticks_r,
                    scan=scan,
                )

    return _frames()
