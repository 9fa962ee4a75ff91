"""Shared builders for protocol fragments used across the test suite."""

from __future__ import annotations

from datetime import datetime, timedelta, timezone

import pytest


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "criterion(n, desc): marks a test as one acceptance criterion"
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker and report.when == "call":
        report._criterion = (marker.kwargs["n"], marker.kwargs["desc"])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = []
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            criterion = getattr(report, "_criterion", None)
            if criterion:
                rows.append((criterion[0], "PASS" if status == "passed" else "FAIL", criterion[1]))
    if rows:
        terminalreporter.write_sep("-", "acceptance criteria")
        for n, verdict, desc in sorted(rows):
            terminalreporter.write_line(f"criterion {n:>2}: {verdict}  {desc}")

from medlog.model import (
    ArtifactKind,
    ArtifactPayload,
    FeedbackPayload,
    FragmentEnvelope,
    FragmentKind,
    Header,
    InputMode,
    Inputs,
    LinkageBasis,
    MedLogRecord,
    ModelInstance,
    OutcomePayload,
    OutputModality,
    OutputPayload,
    Principal,
    PrincipalKind,
    RecordEntry,
    StartPayload,
    TargetIdentity,
    TargetKind,
    UserIdentity,
)

T0 = datetime(2024, 5, 1, 12, 0, 0, tzinfo=timezone.utc)


def ts(seconds: float = 0.0) -> datetime:
    return T0 + timedelta(seconds=seconds)


def make_header(**kw) -> Header:
    defaults = dict(server_id="icu-node-1", invoked_at=ts())
    defaults.update(kw)
    return Header(**defaults)


def make_model(**kw) -> ModelInstance:
    defaults = dict(model_id="hosp-risk", model_version="2.4.0")
    defaults.update(kw)
    return ModelInstance(**defaults)


def make_user() -> UserIdentity:
    return UserIdentity(
        chain=(
            Principal(PrincipalKind.SERVICE, "triage-batch", "service-registry"),
            Principal(PrincipalKind.HUMAN, "1093817465", "NPI"),
        )
    )


def make_target() -> TargetIdentity:
    return TargetIdentity(TargetKind.PATIENT, "MRN-88491", "MRN")


def make_inputs(**kw) -> Inputs:
    defaults = dict(
        mode=InputMode.INLINE,
        media_type="application/json",
        content={"age": 71, "ldh_last_value": 212.5},
        features={"age": 71.0, "ldh_last_value": 212.5},
    )
    defaults.update(kw)
    return Inputs(**defaults)


def make_start(
    event_id: str = "evt-0001",
    fragment_id: str | None = None,
    sequence: int = 0,
    at: datetime | None = None,
    run_id: str | None = None,
    parent_event_id: str | None = None,
    target: TargetIdentity | None = None,
    inputs: Inputs | None = None,
    model: ModelInstance | None = None,
    invoked_at: datetime | None = None,
) -> FragmentEnvelope:
    at = at or ts()
    return FragmentEnvelope(
        event_id=event_id,
        fragment_id=fragment_id or f"{event_id}/start",
        fragment_kind=FragmentKind.START,
        sequence=sequence,
        emitted_at=at,
        payload=StartPayload(
            header=make_header(
                run_id=run_id, parent_event_id=parent_event_id, invoked_at=invoked_at or at
            ),
            model=model or make_model(),
            user=make_user(),
            inputs=inputs or make_inputs(),
            target=target if target is not None else make_target(),
        ),
    )


def make_artifact(
    event_id: str = "evt-0001",
    fragment_id: str | None = None,
    sequence: int = 1,
    at: datetime | None = None,
    body=None,
) -> FragmentEnvelope:
    return FragmentEnvelope(
        event_id=event_id,
        fragment_id=fragment_id or f"{event_id}/art-{sequence}",
        fragment_kind=FragmentKind.ARTIFACT,
        sequence=sequence,
        emitted_at=at or ts(1),
        payload=ArtifactPayload(
            artifact_kind=ArtifactKind.REASONING_TRACE,
            body=body if body is not None else "considered LDH trend and age",
        ),
    )


def make_output(
    event_id: str = "evt-0001",
    fragment_id: str | None = None,
    sequence: int = 2,
    at: datetime | None = None,
    terminal: bool = True,
    failure: bool = False,
    triage_flag: bool = False,
    risk_score: float | None = None,
    confidence: float | None = 0.92,
    body=None,
) -> FragmentEnvelope:
    return FragmentEnvelope(
        event_id=event_id,
        fragment_id=fragment_id or f"{event_id}/out-{sequence}",
        fragment_kind=FragmentKind.OUTPUT,
        sequence=sequence,
        emitted_at=at or ts(2),
        payload=OutputPayload(
            modality=OutputModality.PREDICTION,
            body=body if body is not None else {"hospitalization_risk": 0.18},
            confidence=confidence,
            risk_score=risk_score,
            triage_flag=triage_flag,
            terminal=terminal,
            failure=failure,
        ),
    )


def make_outcome(
    event_id: str = "evt-0001",
    fragment_id: str | None = None,
    sequence: int = 3,
    at: datetime | None = None,
    linkage_strength: float = 0.8,
) -> FragmentEnvelope:
    return FragmentEnvelope(
        event_id=event_id,
        fragment_id=fragment_id or f"{event_id}/outc-{sequence}",
        fragment_kind=FragmentKind.OUTCOME,
        sequence=sequence,
        emitted_at=at or ts(3),
        payload=OutcomePayload(
            action_taken="nurse follow-up scheduled",
            observed_result="no hospitalization within 90 days",
            observed_at=at or ts(3),
            linkage_basis=LinkageBasis.ATTESTATION,
            linkage_strength=linkage_strength,
        ),
    )


def make_feedback(
    event_id: str = "evt-0001",
    fragment_id: str | None = None,
    sequence: int = 4,
    at: datetime | None = None,
    rating: int | None = 4,
    free_text: str | None = None,
) -> FragmentEnvelope:
    return FragmentEnvelope(
        event_id=event_id,
        fragment_id=fragment_id or f"{event_id}/fb-{sequence}",
        fragment_kind=FragmentKind.FEEDBACK,
        sequence=sequence,
        emitted_at=at or ts(4),
        payload=FeedbackPayload(rating=rating, free_text=free_text),
    )


def entry_for(env: FragmentEnvelope) -> RecordEntry:
    return RecordEntry(
        sequence=env.sequence,
        fragment_id=env.fragment_id,
        emitted_at=env.emitted_at,
        payload=env.payload,
    )


@pytest.fixture
def start_env() -> FragmentEnvelope:
    return make_start()


@pytest.fixture
def full_fragment_set() -> list[FragmentEnvelope]:
    return [
        make_start(),
        make_artifact(),
        make_output(),
        make_outcome(),
        make_feedback(),
    ]
