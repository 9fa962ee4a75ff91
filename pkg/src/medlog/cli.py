"""Operator command line: serve the collector, emit/validate fragments,
query records, run compaction, and produce drift reports.

Every command is a thin wrapper over module operations; exit codes are
0 on success, 1 on domain errors, 2 on usage errors.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path
from typing import Any

import click

from .canonical import CanonicalizationError, parse_rfc3339
from .config import CollectorConfig, ConfigError, load_config
from .drift import (
    DriftMonitor,
    DriftThresholds,
    SynthScenario,
    observe_records,
    run_case_study,
    uniform_edges,
)
from .model import (
    EnvelopeDecodeError,
    envelope_from_wire,
    validate_fragment,
)
from .policy import DEFAULT_POLICY, PolicyError, load_policy
from .spool import (
    Backoff,
    HttpCollectorClient,
    InvalidFragmentError,
    Spool,
    SpoolOrderError,
    SyncReport,
)
from .store import EventStore, RetentionPolicy, ScanFilter

FORMATS = click.Choice(["table", "json"])


def _fail(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def _load_json_file(path: str) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        _fail(f"cannot read {path}: {exc}")
    except json.JSONDecodeError as exc:
        _fail(f"{path} is not valid JSON: {exc}")


@click.group()
def main() -> None:
    """Event-level logging for clinical AI: collector, spool, drift tooling."""


# -- serve ----------------------------------------------------------------------


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), help="Config file (JSON).")
@click.option("--listen", help="host:port override.")
@click.option("--data-dir", help="Data directory override.")
@click.option("--policy-file", type=click.Path(exists=True), help="Capture policy file.")
def serve(config_path, listen, data_dir, policy_file):
    """Run the collector service."""
    import uvicorn

    from .collector import CollectorCore
    from .service import create_app

    try:
        config = load_config(config_path)
    except ConfigError as exc:
        _fail(str(exc))
    if listen:
        try:
            from .config import apply_listen

            config = apply_listen(config, listen)
        except ConfigError as exc:
            _fail(str(exc))
    if data_dir:
        from dataclasses import replace

        config = replace(config, data_dir=data_dir)
    if policy_file:
        from dataclasses import replace

        config = replace(config, policy_file=policy_file)

    if config.policy_file:
        try:
            policy = load_policy(
                config.policy_file, default_buffer_seconds=config.upgrade_buffer_seconds
            )
        except PolicyError as exc:
            _fail(f"policy file rejected: {exc}")
    else:
        policy = DEFAULT_POLICY

    store = EventStore(
        config.data_dir,
        orphan_ttl=config.orphan_ttl,
        durability=config.durability,
        retention=config.retention(),
    )
    core = CollectorCore(store, policy, policy_path=config.policy_file)
    app = create_app(core)
    click.echo(f"collector listening on {config.listen_host}:{config.listen_port}")
    try:
        uvicorn.run(app, host=config.listen_host, port=config.listen_port, log_level="warning")
    finally:
        core.close()


# -- emit / sync -------------------------------------------------------------------


def _print_sync_report(report: SyncReport, output: str) -> None:
    if output == "json":
        click.echo(json.dumps(report.to_wire(), indent=2))
        return
    click.echo(
        f"sent={report.sent} acked={report.acked} duplicates={report.duplicates} "
        f"quarantined={report.quarantined} conflicts={report.conflicts} "
        f"dead_lettered={report.dead_lettered} still_pending={report.still_pending} "
        f"duration={report.duration:.2f}s"
    )


@main.command()
@click.argument("kind", type=click.Choice(["start", "artifact", "output", "outcome", "feedback"]))
@click.option("--file", "file_path", type=click.Path(exists=True), help="Envelope JSON file.")
@click.option("--json", "inline_json", help="Envelope JSON inline.")
@click.option("--spool", "spool_dir", default="./medlog-spool", show_default=True)
@click.option("--collector", default="http://127.0.0.1:8400", show_default=True)
@click.option("--offline", is_flag=True, help="Enqueue only; do not sync.")
@click.option("--start-elsewhere", is_flag=True, help="Allow appends whose start was emitted elsewhere.")
@click.option("--format", "output", type=FORMATS, default="table", show_default=True)
def emit(kind, file_path, inline_json, spool_dir, collector, offline, start_elsewhere, output):
    """Enqueue one fragment to the local spool (and sync unless --offline)."""
    if (file_path is None) == (inline_json is None):
        raise click.UsageError("provide exactly one of --file / --json")
    body = _load_json_file(file_path) if file_path else None
    if body is None:
        try:
            body = json.loads(inline_json)
        except json.JSONDecodeError as exc:
            _fail(f"--json is not valid JSON: {exc}")
    try:
        env = envelope_from_wire(body)
    except EnvelopeDecodeError as exc:
        _fail(f"envelope rejected: {exc}")
    if env.fragment_kind.value != kind:
        _fail(f"envelope is a {env.fragment_kind.value!r} fragment, not {kind!r}")

    spool = Spool(spool_dir)
    try:
        position = spool.enqueue(env, start_elsewhere=start_elsewhere)
    except (InvalidFragmentError, SpoolOrderError) as exc:
        _fail(str(exc))
    click.echo(f"spooled {env.fragment_id} at position {position}")
    if offline:
        spool.close()
        return
    client = HttpCollectorClient(collector)
    report = spool.sync(client)
    _print_sync_report(report, output)
    spool.close()
    if report.still_pending or spool.pending():
        sys.exit(1)


@main.command()
@click.option("--spool", "spool_dir", default="./medlog-spool", show_default=True)
@click.option("--collector", default="http://127.0.0.1:8400", show_default=True)
@click.option("--batch-size", default=100, show_default=True)
@click.option("--format", "output", type=FORMATS, default="table", show_default=True)
def sync(spool_dir, collector, batch_size, output):
    """Deliver pending spool entries to the collector."""
    spool = Spool(spool_dir)
    client = HttpCollectorClient(collector)
    report = spool.sync(client, batch_size=batch_size, backoff=Backoff())
    _print_sync_report(report, output)
    remaining = len(spool.pending())
    spool.close()
    if remaining:
        click.echo(f"{remaining} entries still pending", err=True)
        sys.exit(1)


# -- validate ---------------------------------------------------------------------


@main.command()
@click.argument("file_path", type=click.Path(exists=True))
def validate(file_path):
    """Validate a fragment envelope file; nonzero exit on violations."""
    body = _load_json_file(file_path)
    try:
        env = envelope_from_wire(body)
    except EnvelopeDecodeError as exc:
        for violation in exc.violations:
            click.echo(f"violation: {violation}")
        sys.exit(1)
    result = validate_fragment(env)
    if not result.ok:
        for violation in result.violations:
            click.echo(f"violation: {violation}")
        sys.exit(1)
    click.echo("ok")


# -- query ------------------------------------------------------------------------


def _http_get(url: str) -> Any:
    import httpx

    try:
        response = httpx.get(url, timeout=10.0)
    except httpx.HTTPError as exc:
        _fail(f"collector unreachable: {exc}")
    if response.status_code == 404:
        _fail(response.json().get("detail", "not found"))
    if response.status_code != 200:
        _fail(f"collector returned {response.status_code}: {response.text}")
    return response.json()


def _print_record_line(wire: dict[str, Any]) -> None:
    if wire.get("summarized"):
        header = wire.get("header", {})
        click.echo(
            f"{wire['event_id']}  summarized  conformance={wire['conformance']} "
            f"invoked_at={header.get('invoked_at', '?')} digest={wire['digest'][:12]}…"
        )
        return
    rec = wire["record"]
    click.echo(
        f"{wire['event_id']}  status={rec['status']} conformance={wire['conformance']} "
        f"model={rec.get('model', {}).get('model_id', '?')} "
        f"outputs={len(rec.get('outputs', []))} digest={wire['digest'][:12]}…"
    )


@main.group()
def query() -> None:
    """Read records, runs, and filtered listings from a collector."""


@query.command("record")
@click.argument("event_id")
@click.option("--collector", default="http://127.0.0.1:8400", show_default=True)
@click.option("--format", "output", type=FORMATS, default="json", show_default=True)
def query_record(event_id, collector, output):
    wire = _http_get(f"{collector}/v1/records/{event_id}")
    if output == "json":
        click.echo(json.dumps(wire, indent=2))
    else:
        _print_record_line(wire)


@query.command("run")
@click.argument("run_id")
@click.option("--collector", default="http://127.0.0.1:8400", show_default=True)
@click.option("--format", "output", type=FORMATS, default="json", show_default=True)
def query_run(run_id, collector, output):
    wire = _http_get(f"{collector}/v1/runs/{run_id}")
    if output == "json":
        click.echo(json.dumps(wire, indent=2))
        return
    click.echo(f"run {wire['run_id']}: roots={','.join(wire['roots'])}")
    for parent, children in wire["edges"].items():
        for child in children:
            click.echo(f"  {parent} -> {child}")
    for record in wire["records"]:
        _print_record_line(record)


@query.command("list")
@click.option("--collector", default="http://127.0.0.1:8400", show_default=True)
@click.option("--model-id")
@click.option("--run-id")
@click.option("--status")
@click.option("--conformance")
@click.option("--from", "from_ts")
@click.option("--to", "to_ts")
@click.option("--page-token")
@click.option("--page-size", type=int)
@click.option("--format", "output", type=FORMATS, default="table", show_default=True)
def query_list(collector, model_id, run_id, status, conformance, from_ts, to_ts, page_token, page_size, output):
    import urllib.parse

    params = {
        "model_id": model_id,
        "run_id": run_id,
        "status": status,
        "conformance": conformance,
        "from": from_ts,
        "to": to_ts,
        "page_token": page_token,
        "page_size": page_size,
    }
    qs = urllib.parse.urlencode({k: v for k, v in params.items() if v is not None})
    wire = _http_get(f"{collector}/v1/records" + (f"?{qs}" if qs else ""))
    if output == "json":
        click.echo(json.dumps(wire, indent=2))
        return
    for record in wire["records"]:
        _print_record_line(record)
    if wire.get("next_page_token"):
        click.echo(f"next_page_token: {wire['next_page_token']}")


# -- compact ----------------------------------------------------------------------


@main.command()
@click.option("--data-dir", required=True, type=click.Path(exists=True))
@click.option("--now", "now_text", help="Clock override (RFC 3339), for audits and tests.")
@click.option("--summary-ttl-days", type=float, default=3650.0, show_default=True)
@click.option("--content-ttl-days", type=float, default=365.0, show_default=True)
@click.option("--artifact-ttl-days", type=float, default=90.0, show_default=True)
@click.option("--format", "output", type=FORMATS, default="table", show_default=True)
def compact(data_dir, now_text, summary_ttl_days, content_ttl_days, artifact_ttl_days, output):
    """Apply tiered retention to a data directory (collector must be stopped)."""
    from datetime import timedelta

    now = None
    if now_text:
        try:
            now = parse_rfc3339(now_text)
        except CanonicalizationError as exc:
            _fail(str(exc))
    try:
        policy = RetentionPolicy(
            summary_ttl=timedelta(days=summary_ttl_days),
            content_ttl=timedelta(days=content_ttl_days),
            artifact_ttl=timedelta(days=artifact_ttl_days),
        )
    except ValueError as exc:
        _fail(str(exc))
    store = EventStore(data_dir, durability="batch")
    report = store.compact(now=now, policy=policy)
    store.close()
    if output == "json":
        click.echo(json.dumps(report.to_wire(), indent=2))
        return
    removed = report.fragments_removed
    click.echo(
        f"artifacts_removed={removed['artifact']} content_stubbed={removed['content']} "
        f"summarized_fragments={removed['summary']} summaries_written={report.summaries_written} "
        f"blobs_removed={report.blobs_removed} wall_clock={report.wall_clock:.3f}s"
    )


# -- drift ------------------------------------------------------------------------


@main.group()
def drift() -> None:
    """Feature-drift reports and the synthetic case-study simulation."""


def _print_drift_reports(reports, output: str) -> None:
    if output == "json":
        click.echo(json.dumps([r.to_wire() for r in reports], indent=2))
        return
    click.echo(f"{'window':<10} {'n':>6} {'psi':>10} {'ks':>8} {'breaches':>8}  verdict")
    for r in reports:
        click.echo(
            f"{r.window_label:<10} {r.n_current:>6} {r.psi:>10.4f} {r.ks:>8.4f} "
            f"{r.consecutive_breaches:>8}  {r.verdict.value}"
        )


@drift.command("report")
@click.option("--data-dir", required=True, type=click.Path(exists=True))
@click.option("--feature", required=True)
@click.option("--reference-from", required=True, help="Training-period start (RFC 3339).")
@click.option("--reference-to", required=True, help="Training-period end (RFC 3339).")
@click.option("--bins", type=int, default=20, show_default=True)
@click.option("--psi-warn", type=float, default=0.1, show_default=True)
@click.option("--psi-drift", type=float, default=0.2, show_default=True)
@click.option("--consecutive", type=int, default=2, show_default=True)
@click.option("--format", "output", type=FORMATS, default="table", show_default=True)
def drift_report(data_dir, feature, reference_from, reference_to, bins, psi_warn, psi_drift, consecutive, output):
    """Windows/PSI/KS table for one feature across stored records."""
    try:
        ref_start = parse_rfc3339(reference_from)
        ref_end = parse_rfc3339(reference_to)
    except CanonicalizationError as exc:
        _fail(str(exc))

    store = EventStore(data_dir, durability="never")
    items, _ = store.scan(page_size=1_000_000)
    records = [it.record for it in items if it.record is not None]
    values = [
        rec.inputs.features[feature]
        for rec in records
        if rec.inputs is not None and rec.inputs.features and feature in rec.inputs.features
    ]
    if not values:
        store.close()
        _fail(f"no records carry feature {feature!r}")
    lo, hi = min(values), max(values)
    span = (hi - lo) or 1.0
    monitor = DriftMonitor(
        feature,
        uniform_edges(lo - 0.05 * span, hi + 0.05 * span, bins),
        reference_start=ref_start,
        reference_end=ref_end,
    )
    fed = observe_records(monitor, records)
    store.close()
    if monitor.reference.count == 0:
        _fail("no observations fall inside the reference period")
    thresholds = DriftThresholds(psi_warn=psi_warn, psi_drift=psi_drift, consecutive_required=consecutive)
    reports = monitor.reports(thresholds)
    if output == "json":
        click.echo(
            json.dumps(
                {
                    "feature": feature,
                    "observations": fed,
                    "reports": [r.to_wire() for r in reports],
                    "density": monitor.density_data(),
                },
                indent=2,
            )
        )
        return
    click.echo(f"feature {feature}: {fed} observations, reference n={monitor.reference.count}")
    _print_drift_reports(reports, output)


@drift.command("simulate")
@click.option("--scenario", "scenario_path", type=click.Path(exists=True), help="Scenario JSON file.")
@click.option("--psi-warn", type=float, default=0.1, show_default=True)
@click.option("--psi-drift", type=float, default=0.2, show_default=True)
@click.option("--consecutive", type=int, default=2, show_default=True)
@click.option("--format", "output", type=FORMATS, default="table", show_default=True)
def drift_simulate(scenario_path, psi_warn, psi_drift, consecutive, output):
    """Run the synthetic gradually-shifting lab-value case study end to end."""
    from .drift import DriftError

    scenario = SynthScenario()
    if scenario_path:
        try:
            scenario = SynthScenario.from_wire(_load_json_file(scenario_path))
        except (DriftError, CanonicalizationError, TypeError) as exc:
            _fail(f"scenario rejected: {exc}")
    thresholds = DriftThresholds(psi_warn=psi_warn, psi_drift=psi_drift, consecutive_required=consecutive)
    result = run_case_study(scenario, thresholds)
    if output == "json":
        click.echo(json.dumps(result.to_wire(), indent=2))
        return
    click.echo(
        f"scenario: {scenario.feature} ramp={scenario.ramp_sd_per_quarter} sd/quarter "
        f"onset={scenario.onset.date()} seed={scenario.seed}"
    )
    _print_drift_reports(result.reports, output)
    click.echo("impact (|score delta| exceeding threshold):")
    for threshold, fraction in zip(result.impact.thresholds, result.impact.fraction_exceeding):
        click.echo(f"  > {threshold}: {fraction:.4f} of {result.impact.n}")


if __name__ == "__main__":
    main()
