"""CLI behavior: exit codes, emit/sync against a live collector, reports."""

from __future__ import annotations

import json
import socket
import threading
import time
from pathlib import Path

import pytest
import uvicorn
from click.testing import CliRunner

from medlog.cli import main
from medlog.collector import CollectorCore
from medlog.model import envelope_to_wire
from medlog.policy import DEFAULT_POLICY
from medlog.service import create_app
from medlog.store import EventStore

from .conftest import make_outcome, make_output, make_start

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture
def live_collector(tmp_path):
    store = EventStore(tmp_path / "collector-data", durability="never")
    core = CollectorCore(store, DEFAULT_POLICY)
    port = free_port()
    config = uvicorn.Config(
        create_app(core), host="127.0.0.1", port=port, log_level="error", lifespan="on"
    )
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.time() + 10
    while not server.started:
        if time.time() > deadline:
            raise RuntimeError("collector did not start")
        time.sleep(0.02)
    yield f"http://127.0.0.1:{port}", core
    server.should_exit = True
    thread.join(timeout=5)
    core.close()


@pytest.fixture
def runner():
    return CliRunner()


def write_envelope(path: Path, env) -> Path:
    path.write_text(json.dumps(envelope_to_wire(env)))
    return path


# -- validate -----------------------------------------------------------------


def test_validate_ok(runner, tmp_path):
    path = write_envelope(tmp_path / "start.json", make_start())
    result = runner.invoke(main, ["validate", str(path)])
    assert result.exit_code == 0
    assert "ok" in result.output


def test_validate_violation_exits_1(runner, tmp_path):
    path = write_envelope(tmp_path / "bad.json", make_outcome(linkage_strength=1.5))
    result = runner.invoke(main, ["validate", str(path)])
    assert result.exit_code == 1
    assert "linkage_strength" in result.output


def test_usage_error_exits_2(runner):
    result = runner.invoke(main, ["validate"])  # missing argument
    assert result.exit_code == 2
    result = runner.invoke(main, ["emit", "bogus-kind", "--json", "{}"])
    assert result.exit_code == 2


# -- emit / sync / query ---------------------------------------------------------


def test_emit_offline_then_sync_then_query(runner, tmp_path, live_collector):
    url, core = live_collector
    spool_dir = str(tmp_path / "spool")
    start_file = write_envelope(tmp_path / "start.json", make_start("evt-cli-1"))
    output_file = write_envelope(tmp_path / "output.json", make_output("evt-cli-1"))

    result = runner.invoke(
        main, ["emit", "start", "--file", str(start_file), "--spool", spool_dir, "--offline"]
    )
    assert result.exit_code == 0, result.output
    result = runner.invoke(
        main, ["emit", "output", "--file", str(output_file), "--spool", spool_dir, "--offline"]
    )
    assert result.exit_code == 0, result.output
    assert core.read_record("evt-cli-1") is None  # nothing delivered yet

    result = runner.invoke(main, ["sync", "--spool", spool_dir, "--collector", url])
    assert result.exit_code == 0, result.output
    assert "acked=2" in result.output

    wire = core.read_record("evt-cli-1")
    assert wire["record"]["status"] == "completed"

    result = runner.invoke(
        main, ["query", "record", "evt-cli-1", "--collector", url, "--format", "json"]
    )
    assert result.exit_code == 0, result.output
    parsed = json.loads(result.output)
    assert parsed["event_id"] == "evt-cli-1"
    assert parsed["digest"] == wire["digest"]


def test_emit_online_delivers_immediately(runner, tmp_path, live_collector):
    url, core = live_collector
    start_file = write_envelope(tmp_path / "start.json", make_start("evt-cli-2"))
    result = runner.invoke(
        main,
        ["emit", "start", "--file", str(start_file), "--spool", str(tmp_path / "sp"), "--collector", url],
    )
    assert result.exit_code == 0, result.output
    assert core.read_record("evt-cli-2") is not None


def test_emit_rejects_wrong_kind(runner, tmp_path):
    start_file = write_envelope(tmp_path / "start.json", make_start())
    result = runner.invoke(
        main, ["emit", "output", "--file", str(start_file), "--spool", str(tmp_path / "sp"), "--offline"]
    )
    assert result.exit_code == 1
    assert "not 'output'" in result.output


def test_query_list_table(runner, tmp_path, live_collector):
    url, _ = live_collector
    spool = str(tmp_path / "spool")
    for i in range(3):
        f = write_envelope(tmp_path / f"s{i}.json", make_start(f"evt-list-{i}"))
        runner.invoke(main, ["emit", "start", "--file", str(f), "--spool", spool, "--collector", url])
    result = runner.invoke(main, ["query", "list", "--collector", url])
    assert result.exit_code == 0, result.output
    assert result.output.count("evt-list-") == 3


def test_query_unreachable_collector_exits_1(runner):
    result = runner.invoke(
        main, ["query", "record", "evt-x", "--collector", "http://127.0.0.1:9"]
    )
    assert result.exit_code == 1
    assert "unreachable" in result.output


# -- compact ---------------------------------------------------------------------


def test_compact_command(runner, tmp_path):
    data_dir = tmp_path / "data"
    store = EventStore(data_dir, durability="never")
    from .conftest import make_artifact, ts

    store.append(make_start("e1", at=ts(0)))
    store.append(make_artifact("e1", at=ts(1)))
    store.close()

    result = runner.invoke(
        main,
        ["compact", "--data-dir", str(data_dir), "--now", "2024-08-10T00:00:00Z", "--format", "json"],
    )
    assert result.exit_code == 0, result.output
    report = json.loads(result.output)
    assert report["fragments_removed"]["artifact"] == 1


def test_compact_rejects_bad_ttl_order(runner, tmp_path):
    data_dir = tmp_path / "data"
    data_dir.mkdir()
    result = runner.invoke(
        main,
        ["compact", "--data-dir", str(data_dir), "--artifact-ttl-days", "999"],
    )
    assert result.exit_code == 1


# -- drift -----------------------------------------------------------------------


def test_drift_simulate_control_all_stable(runner):
    result = runner.invoke(
        main, ["drift", "simulate", "--scenario", str(SCENARIOS / "ldh_control.json")]
    )
    assert result.exit_code == 0, result.output
    assert "drift" not in [line.split()[-1] for line in result.output.splitlines() if "Q" in line.split()[0]]
    assert "stable" in result.output


def test_drift_simulate_kit_change_reaches_drift(runner):
    result = runner.invoke(
        main,
        ["drift", "simulate", "--scenario", str(SCENARIOS / "ldh_kit_change.json"), "--format", "json"],
    )
    assert result.exit_code == 0, result.output
    wire = json.loads(result.output)
    verdicts = [r["verdict"] for r in wire["reports"]]
    assert "drift" in verdicts
    fractions = wire["impact"]["fraction_exceeding"]
    assert fractions == sorted(fractions, reverse=True)
    assert "density" in wire and len(wire["density"]) == 8  # reference + 7 quarters


def test_drift_report_from_records(runner, tmp_path):
    # Records carrying the feature map are the drift monitor's source.
    import random
    from datetime import datetime, timezone, timedelta

    from .conftest import make_inputs

    data_dir = tmp_path / "data"
    store = EventStore(data_dir, durability="never")
    rng = random.Random(5)
    t0 = datetime(2023, 1, 1, tzinfo=timezone.utc)
    # ~8 invocations/day for 300 days; the lab value steps up on July 1.
    for i in range(2400):
        at = t0 + timedelta(hours=i * 3)
        shifted = 30.0 if at >= datetime(2023, 7, 1, tzinfo=timezone.utc) else 0.0
        value = rng.gauss(100.0 + shifted, 10.0)
        store.append(
            make_start(
                f"e{i:04d}",
                at=at,
                invoked_at=at,
                inputs=make_inputs(features={"creatinine": value}),
            )
        )
    store.close()

    result = runner.invoke(
        main,
        [
            "drift", "report",
            "--data-dir", str(data_dir),
            "--feature", "creatinine",
            "--reference-from", "2023-01-01T00:00:00Z",
            "--reference-to", "2023-04-01T00:00:00Z",
            "--bins", "10",
            "--format", "json",
        ],
    )
    assert result.exit_code == 0, result.output
    wire = json.loads(result.output)
    by_window = {r["window"]: r for r in wire["reports"]}
    assert by_window["2023Q2"]["psi"] < 0.1
    assert by_window["2023Q2"]["verdict"] == "stable"
    assert by_window["2023Q3"]["psi"] > 0.2
    assert by_window["2023Q4"]["verdict"] == "drift"
    assert wire["density"][0]["label"] == "reference"


def test_drift_report_missing_feature_fails(runner, tmp_path):
    data_dir = tmp_path / "data"
    store = EventStore(data_dir, durability="never")
    store.append(make_start("e1"))
    store.close()
    result = runner.invoke(
        main,
        [
            "drift", "report",
            "--data-dir", str(data_dir),
            "--feature", "nonexistent",
            "--reference-from", "2023-01-01T00:00:00Z",
            "--reference-to", "2023-04-01T00:00:00Z",
        ],
    )
    assert result.exit_code == 1
