"""Command-line runner tests: config layering and validation, per-mode
artifacts and reports, exit codes, and the served-bridge autopilot."""

import json
import os
import socket
import subprocess
import sys
import threading
import time

import pytest
from websockets.sync.client import connect as ws_connect

from deskdrive.cli import (
    RunConfig,
    _parse_config_text,
    build_config,
    main,
    run,
)
from deskdrive.errors import ConfigError


def _report(out_dir):
    with open(os.path.join(out_dir, "report.json"), encoding="utf-8") as fh:
        return json.load(fh)


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


# --------------------------------------------------------------- config


def test_flags_build_a_config():
    cfg = build_config(["--mode", "park", "--seed", "3", "--out", "x",
                        "--duration", "30"])
    assert cfg.mode == "park"
    assert cfg.seed == 3
    assert cfg.out_dir == "x"
    assert cfg.duration == 30.0
    assert cfg.headless and not cfg.bridge


def test_config_file_layers_under_flags(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "# comment\n"
        "mode = sim\n"
        "seed = 5\n"
        "out = fromfile\n"
        "\n"
        "[nav]\n"
        "lin_vel_max = 0.3\n",
        encoding="utf-8",
    )
    cfg = build_config([str(path), "--seed", "9"])
    assert cfg.mode == "sim"
    assert cfg.seed == 9                      # flag wins
    assert cfg.out_dir == "fromfile"          # file survives where no flag
    assert cfg.params.get("nav.lin_vel_max") == 0.3


def test_set_overrides_apply_and_reject_unknown_keys():
    cfg = build_config(["--mode", "sim", "--set", "mcl.kld_err=0.05"])
    assert cfg.params.get("mcl.kld_err") == 0.05
    with pytest.raises(ConfigError, match="valid keys"):
        build_config(["--mode", "sim", "--set", "nav.not_a_key=1"])


def test_inconsistent_override_is_a_named_config_error():
    # wheelbase moved without the matching turning radius: the coupling
    # check must name the offending parameter
    with pytest.raises(ConfigError, match="turning_radius_min"):
        build_config(["--mode", "sim", "--set", "nav.vehicle_wheelbase=0.2"])


def test_mode_is_required_and_validated(tmp_path):
    with pytest.raises(ConfigError, match="no mode"):
        build_config([])
    path = tmp_path / "bad.cfg"
    path.write_text("mode = warp\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="unknown mode"):
        build_config([str(path)])


def test_unknown_setting_in_file_is_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("mode = sim\nbogus = 1\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="valid settings"):
        build_config([str(path)])


def test_bridge_is_limited_to_interactive_modes():
    with pytest.raises(ConfigError, match="headless"):
        build_config(["--mode", "park", "--bridge"])
    with pytest.raises(ConfigError, match="conflict"):
        build_config(["--mode", "sim", "--bridge", "--headless"])


def test_config_text_parsing_details():
    parsed = _parse_config_text(
        "a = 1\n"
        "quoted = \"hello world\"  # trailing comment\n"
        "[table]\n"
        "key = 2\n"
    )
    assert parsed == {"a": "1", "quoted": "hello world", "table.key": "2"}
    with pytest.raises(ConfigError, match="duplicate"):
        _parse_config_text("a = 1\na = 2\n")
    with pytest.raises(ConfigError, match="key = value"):
        _parse_config_text("just some words\n")
    with pytest.raises(ConfigError, match="empty table"):
        _parse_config_text("[]\n")


def test_numeric_setting_validation(tmp_path):
    with pytest.raises(ConfigError, match="seed"):
        build_config(["--mode", "sim", *_file(tmp_path, "seed = zebra")])
    with pytest.raises(ConfigError, match="duration"):
        build_config(["--mode", "sim", *_file(tmp_path, "duration = -1")])
    with pytest.raises(ConfigError, match="noise"):
        build_config(["--mode", "sim", *_file(tmp_path, "noise = -0.1")])


def _file(tmp_path, text):
    path = tmp_path / f"{abs(hash(text))}.cfg"
    path.write_text(text + "\n", encoding="utf-8")
    return [str(path)]


# ------------------------------------------------------------ sim mode


def test_sim_mode_free_runs_and_reports(tmp_path):
    out = str(tmp_path / "sim")
    assert main(["--mode", "sim", "--out", out, "--duration", "1"]) == 0
    report = _report(out)
    assert report["outcome"] == "completed"
    assert report["physics_steps"] == 100
    assert report["scans"] == 7
    assert report["world"] == "parking_school"


# --------------------------------------------- record / replay / slam


def test_record_replay_slam_pipeline(tmp_path):
    rec = str(tmp_path / "rec")
    assert main(["--mode", "record", "--out", rec]) == 0
    recorded = _report(rec)
    assert recorded["outcome"] == "recorded"
    assert recorded["rows"] > 500

    rep = str(tmp_path / "rep")
    assert main(["--mode", "replay", "--out", rep,
                 "--replay", os.path.join(rec, "run.csv")]) == 0
    replayed = _report(rep)
    assert replayed["rows"] == recorded["rows"]
    assert replayed["source_sha256"] == recorded["dataset_sha256"]

    sl = str(tmp_path / "slam_rec")
    assert main(["--mode", "slam", "--out", sl,
                 "--replay", os.path.join(rec, "run.csv")]) == 0
    mapped = _report(sl)
    assert mapped["outcome"] == "mapped"
    assert os.path.exists(mapped["map_file"])

    # mapping the recording must equal mapping the live lap byte for byte
    live = str(tmp_path / "slam_live")
    assert main(["--mode", "slam", "--out", live]) == 0
    assert _report(live)["map_sha256"] == mapped["map_sha256"]
    assert _report(live)["cell_agreement"] > 0.9


def test_identical_runs_produce_identical_artifacts(tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    for out in (a, b):
        assert main(["--mode", "record", "--seed", "11", "--out", out]) == 0
    ra, rb = _report(a), _report(b)
    assert ra["dataset_sha256"] == rb["dataset_sha256"]


def test_replay_mode_requires_a_path(tmp_path):
    assert main(["--mode", "replay", "--out", str(tmp_path)]) == 2


def test_lap_modes_reject_custom_worlds(tmp_path):
    world = tmp_path / "w.world"
    world.write_text("wall -1 -1 1 -1\nwall 1 -1 1 1\nwall 1 1 -1 1\n"
                     "wall -1 1 -1 -1\nstart 0 0 0\n", encoding="utf-8")
    for mode in ("record", "localize"):
        assert main(["--mode", mode, "--world", str(world),
                     "--out", str(tmp_path / mode)]) == 2
    # slam accepts custom worlds only through a recording
    assert main(["--mode", "slam", "--world", str(world),
                 "--out", str(tmp_path / "slam")]) == 2


# ------------------------------------------------- localize / navigate


def test_localize_mode_reports_filter_quality(tmp_path):
    out = str(tmp_path / "loc")
    assert main(["--mode", "localize", "--out", out]) == 0
    report = _report(out)
    assert report["outcome"] == "completed"
    assert report["filter_updates"] > 100
    assert report["error_final_m"] < 0.1
    assert 500 <= report["particles_min"] <= report["particles_max"] <= 3000


def test_navigate_needs_a_goal_from_somewhere(tmp_path):
    world = tmp_path / "w.world"
    world.write_text("wall -1 -1 1 -1\nwall 1 -1 1 1\nwall 1 1 -1 1\n"
                     "wall -1 1 -1 -1\nstart -0.5 0 0\n", encoding="utf-8")
    assert main(["--mode", "navigate", "--world", str(world),
                 "--out", str(tmp_path / "nav")]) == 2


# ----------------------------------------------------------- park mode


def test_park_reaches_the_bay(tmp_path):
    out = str(tmp_path / "park")
    assert main(["--mode", "park", "--seed", "3", "--out", out]) == 0
    report = _report(out)
    assert report["outcome"] == "arrived" and report["ok"]
    assert report["error_xy_m"] <= 0.1
    assert report["error_yaw_rad"] <= 0.1
    assert report["filter_updates"] > 50


def test_park_failure_is_structured_not_silent(tmp_path):
    out = str(tmp_path / "short")
    # half a second of budget cannot reach the bay: exit 1, full report
    assert main(["--mode", "park", "--seed", "3", "--out", out,
                 "--duration", "0.5"]) == 1
    report = _report(out)
    assert report["ok"] is False
    assert report["outcome"] == "timeout"
    assert report["error_xy_m"] > 0.1


# --------------------------------------------------------------- bridge


def _recv_until(ws, pred, timeout=10.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        msg = json.loads(ws.recv(timeout=timeout))
        if pred(msg):
            return msg
    raise AssertionError("expected message never arrived")


def test_navigate_bridge_serves_autopilot_diagnostics(tmp_path):
    port = _free_port()
    cfg = build_config(["--mode", "navigate", "--bridge",
                        "--port", str(port), "--duration", "6",
                        "--out", str(tmp_path)])
    result = {}

    def _serve():
        result["code"], result["report"] = run(cfg)

    thread = threading.Thread(target=_serve, daemon=True)
    thread.start()
    try:
        deadline = time.monotonic() + 5.0
        while True:
            try:
                ws = ws_connect(f"ws://127.0.0.1:{port}/", open_timeout=1)
                break
            except OSError:
                if time.monotonic() > deadline:
                    raise
                time.sleep(0.05)
        with ws:
            frame = _recv_until(ws, lambda m: m["type"] == "telemetry")
            assert frame["v"] == 1
            ws.send(json.dumps({"type": "mode", "mode": "autonomous"}))
            nav = _recv_until(
                ws, lambda m: m["type"] == "telemetry"
                and m.get("nav") is not None)
            # with no operator goal the autopilot heads for the scene goal
            assert nav["nav"]["goal"][0] == pytest.approx(1.575)
            assert len(nav["nav"]["global_path"]) > 2
            assert "estimate" in nav["nav"]
    finally:
        thread.join(timeout=30)
    assert result["code"] == 0
    assert result["report"]["frames"] > 0


# ----------------------------------------------------------- entrypoint


def test_module_entrypoint_runs(tmp_path):
    out = str(tmp_path / "sim")
    proc = subprocess.run(
        [sys.executable, "-m", "deskdrive.cli", "--mode", "sim",
         "--out", out, "--duration", "0.5"],
        capture_output=True, text=True, timeout=120,
    )
    assert proc.returncode == 0, proc.stderr
    assert "sim: completed" in proc.stdout
    assert os.path.exists(os.path.join(out, "report.json"))


def test_runconfig_headless_mirrors_bridge():
    assert RunConfig(mode="sim").headless
    assert not RunConfig(mode="sim", bridge=True).headless
