"""Collector core: the transport-agnostic ingestion/read pipeline.

Composes validation, capture policy, the durable store, and assembly.
Ingestion is serialized per event_id (striped locks) while distinct events
proceed in parallel; re-sent fragments collapse to one stored copy, so
at-least-once clients get exactly-once effects.

Artifacts dropped by a sampling or summary-only decision are acknowledged
with a drop marker and held in a bounded in-memory buffer; a later flagged
output (triage flag or risk score at/over the rule threshold) upgrades the
event to full capture and persists whatever is still buffered.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Any

from . import assembly as asm
from .model import (
    FragmentEnvelope,
    FragmentKind,
    MedLogRecord,
    OutputPayload,
    StartPayload,
    Violation,
    canonicalize,
    conformance_level,
    envelope_from_wire,
    EnvelopeDecodeError,
    record_digest_hex,
    record_to_wire,
    stub_inline_content,
    validate_fragment,
)
from .policy import (
    CaptureDecision,
    CapturePolicy,
    Decision,
    PolicyError,
    capture_decision,
    load_policy,
    upgrade_on_flag,
)
from .store import EventStore, RecordSummary, ScanFilter, utcnow

_STRIPES = 128


class CollectorDrainingError(RuntimeError):
    """New ingestion refused while the collector drains for shutdown."""


@dataclass(frozen=True)
class IngestResponse:
    status: str  # accepted | duplicate | quarantined | conflict | invalid
    event_id: str | None = None
    fragment_id: str | None = None
    dropped: bool = False
    violations: tuple[Violation, ...] = ()
    durability_mark: int | None = None  # internal, never serialized

    def to_wire(self) -> dict[str, Any]:
        wire: dict[str, Any] = {
            "status": self.status,
            "event_id": self.event_id,
            "fragment_id": self.fragment_id,
            "dropped": self.dropped,
        }
        if self.violations:
            wire["violations"] = [{"field": v.field, "rule": v.rule} for v in self.violations]
        return wire


@dataclass
class _BufferedArtifact:
    envelope: FragmentEnvelope
    canonical: bytes
    deadline: datetime


_OUTCOME_STATUS = {
    asm.ApplyOutcome.APPLIED: "accepted",
    asm.ApplyOutcome.DUPLICATE: "duplicate",
    asm.ApplyOutcome.QUARANTINED: "quarantined",
    asm.ApplyOutcome.CONFLICT: "conflict",
}


class CollectorCore:
    def __init__(
        self,
        store: EventStore,
        policy: CapturePolicy,
        policy_path: str | None = None,
        clock=utcnow,
    ) -> None:
        self.store = store
        self.policy = policy
        self.policy_path = policy_path
        self.clock = clock
        self._policy_lock = threading.Lock()
        self._locks = [threading.Lock() for _ in range(_STRIPES)]
        self._decisions: dict[str, CaptureDecision] = {}
        self._buffers: dict[str, list[_BufferedArtifact]] = {}
        self._draining = False
        self._in_flight = 0
        self._gauge_lock = threading.Lock()

    # -- helpers -----------------------------------------------------------

    def _lock_for(self, event_id: str) -> threading.Lock:
        return self._locks[hash(event_id) % _STRIPES]

    def _current_policy(self) -> CapturePolicy:
        with self._policy_lock:
            return self.policy

    def _decision_for(self, event_id: str, policy: CapturePolicy) -> CaptureDecision | None:
        decision = self._decisions.get(event_id)
        if decision is not None:
            return decision
        rec = self.store.get_record(event_id)
        if not isinstance(rec, MedLogRecord) or rec.model is None:
            return None
        # Decisions are pure functions of (event_id, rule): rebuilding after
        # a restart lands on the same verdict the original start got.
        start = StartPayload(
            header=rec.header, model=rec.model, user=rec.user, inputs=rec.inputs, target=rec.target
        )
        decision = capture_decision(start, event_id, policy)
        self._decisions[event_id] = decision
        return decision

    # -- ingestion ---------------------------------------------------------

    def ingest(self, kind: str, body: Any, wait_durable: bool = True) -> IngestResponse:
        """Validate, decide, persist, and fold one fragment.

        With wait_durable=False the response carries a durability_mark the
        caller must pass to wait_durable() before acknowledging the client.
        """
        if self._draining:
            raise CollectorDrainingError("collector is draining")
        with self._gauge_lock:
            self._in_flight += 1
        try:
            return self._ingest(kind, body, wait_durable)
        finally:
            with self._gauge_lock:
                self._in_flight -= 1

    def wait_durable(self, mark: int) -> None:
        self.store.wait_durable(mark)

    def _ingest(self, kind: str, body: Any, wait_durable: bool = True) -> IngestResponse:
        try:
            env = envelope_from_wire(body)
        except EnvelopeDecodeError as exc:
            return IngestResponse(status="invalid", violations=exc.violations)
        if env.fragment_kind.value != kind:
            return IngestResponse(
                status="invalid",
                event_id=env.event_id,
                fragment_id=env.fragment_id,
                violations=(
                    Violation("fragment_kind", f"does not match the {kind!r} endpoint"),
                ),
            )
        result = validate_fragment(env)
        if not result.ok:
            return IngestResponse(
                status="invalid",
                event_id=env.event_id,
                fragment_id=env.fragment_id,
                violations=result.violations,
            )

        canonical = canonicalize(env, validate=False)
        policy = self._current_policy()
        with self._lock_for(env.event_id):
            if env.fragment_kind is FragmentKind.START:
                return self._ingest_start(env, canonical, policy, wait_durable)
            if env.fragment_kind is FragmentKind.ARTIFACT:
                return self._ingest_artifact(env, canonical, policy, wait_durable)
            if env.fragment_kind is FragmentKind.OUTPUT:
                return self._ingest_output(env, canonical, policy, wait_durable)
            return self._ingest_late_fragment(env, canonical, policy, wait_durable)

    def _response(
        self,
        env: FragmentEnvelope,
        outcome: asm.ApplyOutcome,
        dropped=False,
        mark: int | None = None,
    ) -> IngestResponse:
        return IngestResponse(
            status=_OUTCOME_STATUS[outcome],
            event_id=env.event_id,
            fragment_id=env.fragment_id,
            dropped=dropped,
            durability_mark=mark,
        )

    def _ingest_start(
        self, env: FragmentEnvelope, canonical: bytes, policy: CapturePolicy, wait_durable: bool
    ) -> IngestResponse:
        result = self.store.ingest(env, canonical, wait_durable=wait_durable)
        if result.outcome is asm.ApplyOutcome.APPLIED:
            payload = env.payload
            assert isinstance(payload, StartPayload)
            self._decisions[env.event_id] = capture_decision(payload, env.event_id, policy)
        return self._response(env, result.outcome, mark=result.durability_mark)

    def _ingest_artifact(
        self, env: FragmentEnvelope, canonical: bytes, policy: CapturePolicy, wait_durable: bool
    ) -> IngestResponse:
        decision = self._decision_for(env.event_id, policy)
        if decision is None or decision.decision is Decision.CAPTURE_FULL:
            # Unknown events quarantine durably; fully captured events store.
            result = self.store.ingest(env, canonical, wait_durable=wait_durable)
            return self._response(env, result.outcome, mark=result.durability_mark)
        # Sampled out or summary-only: acknowledge with a drop marker and
        # keep the bytes briefly in case a flagged output upgrades us.
        deadline = self.clock() + timedelta(seconds=policy.upgrade_buffer_seconds)
        bucket = self._buffers.setdefault(env.event_id, [])
        if all(b.envelope.fragment_id != env.fragment_id for b in bucket):
            bucket.append(_BufferedArtifact(env, canonical, deadline))
        return IngestResponse(
            status="accepted", event_id=env.event_id, fragment_id=env.fragment_id, dropped=True
        )

    def _ingest_output(
        self, env: FragmentEnvelope, canonical: bytes, policy: CapturePolicy, wait_durable: bool
    ) -> IngestResponse:
        decision = self._decision_for(env.event_id, policy)
        payload = env.payload
        assert isinstance(payload, OutputPayload)
        if decision is not None:
            rec = self.store.get_record(env.event_id)
            model_id = rec.model.model_id if isinstance(rec, MedLogRecord) and rec.model else None
            if model_id is not None:
                rule = policy.match(model_id)
                upgraded = upgrade_on_flag(decision, payload, rule)
                if upgraded is not decision:
                    self._decisions[env.event_id] = upgraded
                    decision = upgraded
                    self._flush_buffered(env.event_id)
        persist = None
        if decision is not None and decision.decision is Decision.CAPTURE_SUMMARY:
            # Summary-only capture keeps output metadata; bodies become stubs.
            stubbed = stub_inline_content(env)
            persist = stubbed if stubbed is not env else None
        result = self.store.ingest(env, canonical, persist_env=persist, wait_durable=wait_durable)
        return self._response(
            env, result.outcome, dropped=persist is not None, mark=result.durability_mark
        )

    def _ingest_late_fragment(
        self, env: FragmentEnvelope, canonical: bytes, policy: CapturePolicy, wait_durable: bool
    ) -> IngestResponse:
        # Outcomes and feedback. Summary-only events keep start + outputs
        # only, so these are acknowledged and dropped unless upgraded.
        decision = self._decision_for(env.event_id, policy)
        if decision is not None and decision.decision is Decision.CAPTURE_SUMMARY:
            return IngestResponse(
                status="accepted",
                event_id=env.event_id,
                fragment_id=env.fragment_id,
                dropped=True,
            )
        result = self.store.ingest(env, canonical, wait_durable=wait_durable)
        return self._response(env, result.outcome, mark=result.durability_mark)

    def _flush_buffered(self, event_id: str) -> int:
        """Persist artifacts still held for an event that just upgraded."""
        now = self.clock()
        flushed = 0
        for item in self._buffers.pop(event_id, []):
            if item.deadline < now:
                continue
            self.store.ingest(item.envelope, item.canonical)
            flushed += 1
        return flushed

    # -- reads -------------------------------------------------------------

    def read_record(self, event_id: str) -> dict[str, Any] | None:
        rec = self.store.get_record(event_id)
        if rec is None:
            return None
        return self._record_wire(rec)

    def _record_wire(self, rec: MedLogRecord | RecordSummary) -> dict[str, Any]:
        if isinstance(rec, RecordSummary):
            wire = rec.to_wire()
            wire["summarized"] = True
            return wire
        return {
            "event_id": rec.event_id,
            "record": record_to_wire(rec),
            "conformance": conformance_level(rec).token,
            "digest": record_digest_hex(rec),
            "summarized": False,
        }

    def read_run(self, run_id: str) -> dict[str, Any] | None:
        records = self.store.records_for_run(run_id)
        if not records:
            return None
        tree = asm.build_run_tree(run_id, records)
        return {
            "run_id": run_id,
            "roots": list(tree.roots),
            "edges": {parent: list(children) for parent, children in tree.edges.items()},
            "records": [self._record_wire(rec) for rec in records],
        }

    def query(
        self,
        flt: ScanFilter,
        page_size: int = 100,
        page_token: str | None = None,
    ) -> dict[str, Any]:
        items, next_token = self.store.scan(flt, page_size=page_size, page_token=page_token)
        return {
            "records": [
                self._record_wire(it.record if it.record is not None else it.summary)
                for it in items
            ],
            "next_page_token": next_token,
        }

    # -- administration ------------------------------------------------------

    def health(self) -> dict[str, Any]:
        writable, reason = self.store.probe_writable()
        healthy = writable and not self._draining
        return {
            "healthy": healthy,
            "store_writable": writable,
            "draining": self._draining,
            "records": self.store.record_count(),
            "orphan_fragments": self.store.orphan_count(),
            "upgrade_buffered": sum(len(b) for b in self._buffers.values()),
            "ingest_in_flight": self._in_flight,
            "reason": reason,
        }

    def reload_policy(self) -> tuple[bool, str | None]:
        """Swap in the policy file atomically; keep the old one on failure."""
        if self.policy_path is None:
            return False, "no policy file configured"
        try:
            fresh = load_policy(self.policy_path)
        except PolicyError as exc:
            return False, str(exc)
        with self._policy_lock:
            self.policy = fresh
        return True, None

    def expire(self, now: datetime | None = None) -> int:
        """Expire quarantined orphans and stale upgrade buffers."""
        now = now or self.clock()
        expired = len(self.store.expire_orphans(now))
        for event_id in list(self._buffers):
            bucket = [b for b in self._buffers[event_id] if b.deadline >= now]
            if bucket:
                self._buffers[event_id] = bucket
            else:
                del self._buffers[event_id]
        return expired

    def begin_drain(self) -> None:
        self._draining = True

    def close(self) -> None:
        self.begin_drain()
        self.store.close()
