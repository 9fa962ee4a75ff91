"""Durable persistence: fragment log, blob store, summaries, compaction.

Source of truth is the append-only fragment log; records are materialized
by the assembly fold (rebuilt by replay on open). Orphaned fragments live
in a separate journal until their event starts or they expire to the
dead-letter file. Compaction rewrites the log into a new generation
directory and commits it with an atomic manifest swap.

Data directory layout:
    manifest.json           {"generation": N}
    gen-N/                  fragment segments (current generation)
    orphans/                orphan journal segments + consumed.jsonl
    blobs/ab/<hex>          content-addressed payloads
    summaries.jsonl         long-term record summaries (append-only)
    deadletter.jsonl        expired orphans
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Any, Iterator

from . import assembly as asm
from .canonical import canonical_bytes, format_rfc3339, parse_rfc3339
from .model import (
    ArtifactPayload,
    ConformanceProfile,
    ContentAddress,
    FragmentEnvelope,
    FragmentKind,
    Header,
    MedLogRecord,
    ModelInstance,
    OutputPayload,
    RecordStatus,
    StartPayload,
    TargetIdentity,
    UserIdentity,
    canonicalize,
    conformance_level,
    envelope_from_wire,
    envelope_to_wire,
    fragment_digest_hex,
    header_from_wire,
    header_to_wire,
    model_from_wire,
    model_to_wire,
    record_digest_hex,
    stub_inline_content,
    target_from_wire,
    target_to_wire,
    user_from_wire,
    user_to_wire,
)
from .segments import SegmentLog


class StoreError(RuntimeError):
    pass


class FragmentConflictError(StoreError):
    """Same fragment_id re-appended with different canonical bytes."""


class BlobNotFoundError(StoreError):
    pass


def utcnow() -> datetime:
    return datetime.now(timezone.utc)


# ---------------------------------------------------------------------------
# Retention


@dataclass(frozen=True)
class RetentionPolicy:
    """Tiered time-to-live: artifacts die first, summaries live longest."""

    summary_ttl: timedelta = timedelta(days=3650)
    content_ttl: timedelta = timedelta(days=365)
    artifact_ttl: timedelta = timedelta(days=90)

    def __post_init__(self) -> None:
        if not (self.artifact_ttl <= self.content_ttl <= self.summary_ttl):
            raise ValueError("retention tiers must satisfy artifact <= content <= summary")


@dataclass
class CompactionReport:
    fragments_removed: dict[str, int] = field(
        default_factory=lambda: {"artifact": 0, "content": 0, "summary": 0}
    )
    blobs_removed: int = 0
    summaries_written: int = 0
    wall_clock: float = 0.0

    def to_wire(self) -> dict[str, Any]:
        return {
            "fragments_removed": dict(self.fragments_removed),
            "blobs_removed": self.blobs_removed,
            "summaries_written": self.summaries_written,
            "wall_clock": self.wall_clock,
        }


# ---------------------------------------------------------------------------
# Blob store


class BlobStore:
    """Content-addressed payload storage: one copy per distinct byte string."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, digest: str) -> Path:
        return self.root / digest[:2] / digest

    def put(self, data: bytes) -> ContentAddress:
        addr = ContentAddress.for_bytes(data)
        path = self._path(addr.digest)
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(data)
            os.replace(tmp, path)
        return addr

    def get(self, addr: ContentAddress) -> bytes:
        path = self._path(addr.digest)
        if not path.exists():
            raise BlobNotFoundError(f"no blob for {addr.algorithm}:{addr.digest}")
        return path.read_bytes()

    def contains(self, digest: str) -> bool:
        return self._path(digest).exists()

    def delete(self, digest: str) -> bool:
        path = self._path(digest)
        if path.exists():
            path.unlink()
            return True
        return False

    def digests(self) -> Iterator[str]:
        for sub in sorted(self.root.iterdir()):
            if sub.is_dir():
                for blob in sorted(sub.iterdir()):
                    if not blob.name.endswith(".tmp"):
                        yield blob.name


# ---------------------------------------------------------------------------
# Record summaries


@dataclass(frozen=True)
class RecordSummary:
    """Long-term remnant of a record after its fragments aged out."""

    event_id: str
    header: Header
    model: ModelInstance | None
    user: UserIdentity | None
    target: TargetIdentity | None
    conformance: ConformanceProfile
    digest: str
    summarized_at: datetime

    def to_wire(self) -> dict[str, Any]:
        wire: dict[str, Any] = {
            "event_id": self.event_id,
            "header": header_to_wire(self.header),
            "conformance": self.conformance.token,
            "digest": self.digest,
            "summarized_at": format_rfc3339(self.summarized_at),
        }
        if self.model is not None:
            wire["model"] = model_to_wire(self.model)
        if self.user is not None:
            wire["user"] = user_to_wire(self.user)
        if self.target is not None:
            wire["target"] = target_to_wire(self.target)
        return wire

    @classmethod
    def from_wire(cls, obj: dict[str, Any]) -> "RecordSummary":
        return cls(
            event_id=obj["event_id"],
            header=header_from_wire(obj["header"]),
            model=model_from_wire(obj["model"]) if "model" in obj else None,
            user=user_from_wire(obj["user"]) if "user" in obj else None,
            target=target_from_wire(obj["target"]) if "target" in obj else None,
            conformance=ConformanceProfile.from_token(obj["conformance"]),
            digest=obj["digest"],
            summarized_at=parse_rfc3339(obj["summarized_at"]),
        )


def summarize_record(rec: MedLogRecord, now: datetime) -> RecordSummary:
    assert rec.header is not None
    return RecordSummary(
        event_id=rec.event_id,
        header=rec.header,
        model=rec.model,
        user=rec.user,
        target=rec.target,
        conformance=conformance_level(rec),
        digest=record_digest_hex(rec),
        summarized_at=now,
    )


# ---------------------------------------------------------------------------
# Scan filters and paging


@dataclass(frozen=True)
class ScanFilter:
    model_id: str | None = None
    run_id: str | None = None
    status: RecordStatus | None = None
    conformance: ConformanceProfile | None = None
    invoked_from: datetime | None = None
    invoked_to: datetime | None = None


@dataclass(frozen=True)
class ScanItem:
    """One scan hit: either a live record or a long-term summary."""

    event_id: str
    invoked_at: datetime
    record: MedLogRecord | None = None
    summary: RecordSummary | None = None

    @property
    def conformance(self) -> ConformanceProfile:
        if self.record is not None:
            return conformance_level(self.record)
        assert self.summary is not None
        return self.summary.conformance


class BadPageTokenError(StoreError):
    pass


def _encode_token(invoked_at: datetime, event_id: str) -> str:
    import base64

    raw = canonical_bytes({"a": format_rfc3339(invoked_at), "e": event_id})
    return base64.urlsafe_b64encode(raw).decode("ascii")


def _decode_token(token: str) -> tuple[datetime, str]:
    import base64

    try:
        obj = json.loads(base64.urlsafe_b64decode(token.encode("ascii")))
        return parse_rfc3339(obj["a"]), obj["e"]
    except Exception as exc:
        raise BadPageTokenError(f"malformed page token: {exc}") from exc


# ---------------------------------------------------------------------------
# Orphan journal

_TTL_SENTINEL = "deadline"


class OrphanJournal:
    """Durable quarantine: envelopes wrapped with their reconcile deadline.

    Consumed/expired entries get a tombstone row in consumed.jsonl; replay
    is journal frames minus tombstones.
    """

    def __init__(self, root: Path, durability: str) -> None:
        self.log = SegmentLog(root, prefix="orphan", durability=durability)
        self._consumed_path = root / "consumed.jsonl"
        self._consumed: set[int] = set()
        if self._consumed_path.exists():
            with open(self._consumed_path) as f:
                for line in f:
                    line = line.strip()
                    if line:
                        self._consumed.add(json.loads(line)["p"])
        self._consumed_file = open(self._consumed_path, "a")
        self._positions: dict[tuple[str, str], int] = {}

    def append(self, env: FragmentEnvelope, deadline: datetime) -> int:
        frame = canonical_bytes(
            {_TTL_SENTINEL: format_rfc3339(deadline), "envelope": envelope_to_wire(env)}
        )
        position, mark = self.log.append_buffered(frame)
        self._positions[(env.event_id, env.fragment_id)] = position
        self.log.wait_mark(mark)
        return position

    def tombstone(self, env: FragmentEnvelope) -> None:
        position = self._positions.pop((env.event_id, env.fragment_id), None)
        if position is None:
            return
        self._consumed.add(position)
        self._consumed_file.write(json.dumps({"p": position}) + "\n")
        self._consumed_file.flush()

    def replay(self) -> Iterator[tuple[int, FragmentEnvelope, datetime]]:
        for position, frame in self.log.frames():
            if position in self._consumed:
                continue
            obj = json.loads(frame)
            env = envelope_from_wire(obj["envelope"])
            deadline = parse_rfc3339(obj[_TTL_SENTINEL])
            self._positions[(env.event_id, env.fragment_id)] = position
            yield position, env, deadline

    def close(self) -> None:
        self.log.close()
        self._consumed_file.close()


# ---------------------------------------------------------------------------
# Event store


@dataclass(frozen=True)
class FragmentPosition:
    area: str  # "log" | "orphan"
    index: int


@dataclass(frozen=True)
class IngestResult:
    outcome: asm.ApplyOutcome
    position: FragmentPosition | None
    durability_mark: int | None = None  # set when the caller deferred the wait


class EventStore:
    """Append-only fragment store with materialized records.

    Thread-safe: a store-level lock guards index state; the group-commit
    fsync wait happens outside it so concurrent appenders share syncs.
    Callers wanting per-event serialization (the collector) add their own
    per-event locks on top.
    """

    def __init__(
        self,
        data_dir: str | Path,
        orphan_ttl: timedelta = asm.DEFAULT_ORPHAN_TTL,
        durability: str = "batch",
        retention: RetentionPolicy | None = None,
        clock=utcnow,
    ) -> None:
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.durability = durability
        self.retention = retention or RetentionPolicy()
        self.clock = clock
        self._lock = threading.RLock()

        self._manifest_path = self.data_dir / "manifest.json"
        self.generation = self._load_manifest()
        self._log = SegmentLog(self._gen_dir(self.generation), durability=durability)
        self._orphans = OrphanJournal(self.data_dir / "orphans", durability=durability)
        self.blobs = BlobStore(self.data_dir / "blobs")

        self._assembly = asm.AssemblyState(orphan_ttl=orphan_ttl)
        self._positions: dict[tuple[str, str], FragmentPosition] = {}
        self._frag_meta: dict[int, tuple[str, str]] = {}  # log position -> (eid, fid)
        self._runs: dict[str, set[str]] = {}
        self._summaries: dict[str, RecordSummary] = {}
        self._summaries_path = self.data_dir / "summaries.jsonl"
        self._deadletter_path = self.data_dir / "deadletter.jsonl"

        self._load_summaries()
        self._replay()

    # -- open/recovery -----------------------------------------------------

    def _gen_dir(self, generation: int) -> Path:
        return self.data_dir / f"gen-{generation}"

    def _load_manifest(self) -> int:
        if self._manifest_path.exists():
            return json.loads(self._manifest_path.read_text())["generation"]
        self._write_manifest(0)
        return 0

    def _write_manifest(self, generation: int) -> None:
        tmp = self._manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"generation": generation}))
        with open(tmp, "r+b") as f:
            os.fsync(f.fileno())
        os.replace(tmp, self._manifest_path)

    def _load_summaries(self) -> None:
        if not self._summaries_path.exists():
            return
        with open(self._summaries_path) as f:
            for line in f:
                line = line.strip()
                if line:
                    summary = RecordSummary.from_wire(json.loads(line))
                    self._summaries[summary.event_id] = summary

    def _replay(self) -> None:
        for position, frame in self._log.frames():
            env = envelope_from_wire(json.loads(frame))
            hexd = fragment_digest_hex(frame)
            _, outcome = asm.apply_fragment(self._assembly, env, utcnow(), canonical_hex=hexd)
            if outcome in (asm.ApplyOutcome.APPLIED, asm.ApplyOutcome.DUPLICATE):
                self._index_fragment(env, FragmentPosition("log", position))
        for position, env, deadline in self._orphans.replay():
            # If the event started later in the log, the journal entry was
            # never tombstoned (crash window); folding is a no-op duplicate
            # when the log already holds a promoted copy.
            hexd = fragment_digest_hex(canonicalize(env))
            asm.apply_fragment(
                self._assembly, env, deadline - self._assembly.orphan_ttl, canonical_hex=hexd
            )
            self._positions.setdefault(
                (env.event_id, env.fragment_id), FragmentPosition("orphan", position)
            )

    def _index_fragment(self, env: FragmentEnvelope, position: FragmentPosition) -> None:
        key = (env.event_id, env.fragment_id)
        self._positions.setdefault(key, position)
        if position.area == "log":
            self._frag_meta[position.index] = key
        if env.fragment_kind is FragmentKind.START:
            payload = env.payload
            assert isinstance(payload, StartPayload)
            if payload.header.run_id:
                self._runs.setdefault(payload.header.run_id, set()).add(env.event_id)

    # -- append ------------------------------------------------------------

    def ingest(
        self,
        env: FragmentEnvelope,
        canonical: bytes | None = None,
        persist_env: FragmentEnvelope | None = None,
        wait_durable: bool = True,
    ) -> IngestResult:
        """Durably append one validated fragment and fold it into its record.

        Idempotent by (event_id, fragment_id, canonical bytes): duplicates
        return the original position; the same fragment_id with different
        bytes is a conflict. persist_env, when given, is the transformed
        envelope actually written (summary-only body stubbing); dedup still
        keys on the original bytes.

        With wait_durable=False the caller must pass the returned
        durability_mark to wait_durable() before acknowledging; deferring
        the wait lets many concurrent requests share one group-commit
        fsync instead of taking turns.
        """
        if canonical is None:
            canonical = canonicalize(env)
        hexd = fragment_digest_hex(canonical)
        now = self.clock()

        with self._lock:
            if env.event_id in self._summaries:
                # The record was reduced to a summary; its fragment set is
                # gone, so nothing can be idempotently reconciled anymore.
                return IngestResult(asm.ApplyOutcome.CONFLICT, None)
            outcome = asm.classify_fragment(self._assembly, env, hexd)
            if outcome is asm.ApplyOutcome.DUPLICATE:
                return IngestResult(outcome, self._positions.get((env.event_id, env.fragment_id)))
            if outcome is asm.ApplyOutcome.CONFLICT:
                return IngestResult(outcome, None)

            if outcome is asm.ApplyOutcome.QUARANTINED:
                key = (env.event_id, env.fragment_id)
                already = key in self._positions
                asm.apply_fragment(self._assembly, env, now, canonical_hex=hexd)
                if already:
                    return IngestResult(outcome, self._positions[key])
                deadline = now + self._assembly.orphan_ttl
                position = self._orphans.append(env, deadline)
                pos = FragmentPosition("orphan", position)
                self._positions[key] = pos
                return IngestResult(outcome, pos)

            # APPLIED: write the frame, fold, and promote any orphans the
            # start just adopted from the journal into the main log. The
            # persisted envelope is also the one folded, so a replay from
            # disk materializes the identical record; dedup still keys on
            # the original bytes via canonical_hex.
            to_write = persist_env if persist_env is not None else env
            frame = canonical if persist_env is None else canonicalize(persist_env)
            position, mark = self._log.append_buffered(frame)
            asm.apply_fragment(self._assembly, to_write, now, canonical_hex=hexd)
            pos = FragmentPosition("log", position)
            self._positions[(env.event_id, env.fragment_id)] = pos
            self._index_fragment(to_write, pos)

            if env.fragment_kind is FragmentKind.START:
                rec = self._assembly.records[env.event_id]
                for adopted in rec.fragments:
                    if adopted.fragment_kind is FragmentKind.START:
                        continue
                    key = (adopted.event_id, adopted.fragment_id)
                    existing = self._positions.get(key)
                    if existing is not None and existing.area == "orphan":
                        adopted_frame = canonicalize(adopted)
                        new_pos, mark = self._log.append_buffered(adopted_frame)
                        self._positions[key] = FragmentPosition("log", new_pos)
                        self._frag_meta[new_pos] = key
                        self._orphans.tombstone(adopted)

        if not wait_durable:
            return IngestResult(asm.ApplyOutcome.APPLIED, pos, durability_mark=mark)
        self._log.wait_mark(mark)
        return IngestResult(asm.ApplyOutcome.APPLIED, pos)

    def wait_durable(self, mark: int) -> None:
        self._log.wait_mark(mark)

    def on_durable(self, mark: int, callback) -> None:
        self._log.on_durable(mark, callback)

    def append(self, env: FragmentEnvelope, canonical: bytes | None = None) -> FragmentPosition:
        """Append per the write contract: conflict raises, position returns."""
        result = self.ingest(env, canonical)
        if result.outcome is asm.ApplyOutcome.CONFLICT:
            raise FragmentConflictError(
                f"fragment_id {env.fragment_id!r} already appended with different bytes"
            )
        assert result.position is not None
        return result.position

    # -- blobs -------------------------------------------------------------

    def put_blob(self, data: bytes) -> ContentAddress:
        return self.blobs.put(data)

    def get_blob(self, addr: ContentAddress) -> bytes:
        return self.blobs.get(addr)

    # -- reads -------------------------------------------------------------

    def get_record(self, event_id: str) -> MedLogRecord | RecordSummary | None:
        with self._lock:
            rec = self._assembly.records.get(event_id)
            if rec is not None:
                return rec
            return self._summaries.get(event_id)

    def records_for_run(self, run_id: str) -> list[MedLogRecord]:
        with self._lock:
            ids = self._runs.get(run_id, set())
            return [self._assembly.records[eid] for eid in sorted(ids) if eid in self._assembly.records]

    def scan(
        self,
        flt: ScanFilter | None = None,
        page_size: int = 100,
        page_token: str | None = None,
    ) -> tuple[list[ScanItem], str | None]:
        """All records matching every supplied predicate, (invoked_at, event_id) order."""
        flt = flt or ScanFilter()
        with self._lock:
            items = [
                ScanItem(rec.event_id, rec.header.invoked_at, record=rec)
                for rec in self._assembly.records.values()
                if rec.header is not None
            ]
            items.extend(
                ScanItem(s.event_id, s.header.invoked_at, summary=s)
                for s in self._summaries.values()
            )
        items.sort(key=lambda it: (it.invoked_at, it.event_id))

        def keep(it: ScanItem) -> bool:
            if flt.invoked_from is not None and it.invoked_at < flt.invoked_from:
                return False
            if flt.invoked_to is not None and it.invoked_at >= flt.invoked_to:
                return False
            if flt.model_id is not None:
                model = it.record.model if it.record else it.summary.model
                if model is None or model.model_id != flt.model_id:
                    return False
            if flt.run_id is not None:
                header = it.record.header if it.record else it.summary.header
                if header.run_id != flt.run_id:
                    return False
            if flt.status is not None:
                if it.record is None or it.record.status is not flt.status:
                    return False
            if flt.conformance is not None and it.conformance is not flt.conformance:
                return False
            return True

        matched = [it for it in items if keep(it)]
        if page_token is not None:
            after = _decode_token(page_token)
            matched = [it for it in matched if (it.invoked_at, it.event_id) > after]
        page = matched[:page_size]
        next_token = None
        if len(matched) > page_size and page:
            next_token = _encode_token(page[-1].invoked_at, page[-1].event_id)
        return page, next_token

    def record_count(self) -> int:
        with self._lock:
            return len(self._assembly.records)

    def orphan_count(self) -> int:
        with self._lock:
            return sum(len(b) for b in self._assembly.orphans.values())

    def state_digest(self) -> str:
        """Digest of the whole store state: records, orphans, summaries."""
        with self._lock:
            state = {
                "records": {
                    eid: record_digest_hex(rec)
                    for eid, rec in self._assembly.records.items()
                },
                "orphans": {
                    eid: sorted(q.canonical_hex for q in bucket)
                    for eid, bucket in self._assembly.orphans.items()
                },
                "summaries": {eid: s.digest for eid, s in self._summaries.items()},
            }
        return hashlib.sha256(canonical_bytes(state)).hexdigest()

    # -- orphan expiry -----------------------------------------------------

    def expire_orphans(self, now: datetime | None = None) -> list[FragmentEnvelope]:
        """Move quarantine-expired fragments to the dead-letter file."""
        now = now or self.clock()
        with self._lock:
            _, expired = asm.expire_orphans(self._assembly, now)
            if not expired:
                return []
            with open(self._deadletter_path, "a") as f:
                for env in expired:
                    row = {
                        "expired_at": format_rfc3339(now),
                        "envelope": envelope_to_wire(env),
                    }
                    f.write(json.dumps(row, separators=(",", ":")) + "\n")
                f.flush()
                os.fsync(f.fileno())
            for env in expired:
                self._orphans.tombstone(env)
                self._positions.pop((env.event_id, env.fragment_id), None)
        return expired

    def dead_letter_envelopes(self) -> list[FragmentEnvelope]:
        if not self._deadletter_path.exists():
            return []
        out = []
        with open(self._deadletter_path) as f:
            for line in f:
                line = line.strip()
                if line:
                    out.append(envelope_from_wire(json.loads(line)["envelope"]))
        return out

    # -- health ------------------------------------------------------------

    def probe_writable(self) -> tuple[bool, str | None]:
        probe = self.data_dir / ".writable-probe"
        try:
            probe.write_bytes(b"ok")
            probe.unlink()
            return True, None
        except OSError as exc:
            return False, str(exc)

    # -- compaction --------------------------------------------------------

    def compact(self, now: datetime | None = None, policy: RetentionPolicy | None = None) -> CompactionReport:
        """Apply tiered retention in one exclusive pass.

        Artifacts past their TTL are dropped; inline input/output bodies
        past the content TTL are replaced by content-address stubs (and
        referenced blobs deleted); whole records past the summary TTL are
        reduced to immutable summary rows. Unreferenced blobs are GC'd.
        """
        now = now or self.clock()
        policy = policy or self.retention
        report = CompactionReport()
        t0 = time.perf_counter()

        with self._lock:
            artifact_cutoff = now - policy.artifact_ttl
            content_cutoff = now - policy.content_ttl
            summary_cutoff = now - policy.summary_ttl

            to_summarize = {
                eid
                for eid, rec in self._assembly.records.items()
                if rec.header is not None and rec.header.invoked_at < summary_cutoff
            }
            new_summaries: list[RecordSummary] = []
            for eid in sorted(to_summarize):
                rec = self._assembly.records[eid]
                new_summaries.append(summarize_record(rec, now))
                report.fragments_removed["summary"] += len(rec.fragments)
                report.summaries_written += 1

            # Rewrite surviving fragments, preserving log order.
            fragment_by_key: dict[tuple[str, str], FragmentEnvelope] = {}
            for rec in self._assembly.records.values():
                for env in rec.fragments:
                    fragment_by_key[(env.event_id, env.fragment_id)] = env

            survivors: list[bytes] = []
            survivor_envs: list[FragmentEnvelope] = []
            for position in range(len(self._log)):
                key = self._frag_meta.get(position)
                if key is None:
                    continue  # superseded copy (orphan promoted twice etc.)
                eid, _ = key
                if eid in to_summarize or eid not in self._assembly.records:
                    continue
                env = fragment_by_key.get(key)
                if env is None:
                    continue
                if (
                    env.fragment_kind is FragmentKind.ARTIFACT
                    and env.emitted_at < artifact_cutoff
                ):
                    report.fragments_removed["artifact"] += 1
                    continue
                if (
                    env.fragment_kind in (FragmentKind.START, FragmentKind.OUTPUT)
                    and env.emitted_at < content_cutoff
                ):
                    stubbed = stub_inline_content(env)
                    if stubbed is not env:
                        report.fragments_removed["content"] += 1
                        env = stubbed
                survivors.append(canonicalize(env))
                survivor_envs.append(env)

            # Commit: summaries first, then the new generation manifest.
            if new_summaries:
                with open(self._summaries_path, "a") as f:
                    for summary in new_summaries:
                        f.write(json.dumps(summary.to_wire(), separators=(",", ":")) + "\n")
                    f.flush()
                    os.fsync(f.fileno())
                for summary in new_summaries:
                    self._summaries[summary.event_id] = summary

            new_gen = self.generation + 1
            new_dir = self._gen_dir(new_gen)
            if new_dir.exists():
                shutil.rmtree(new_dir)
            new_log = SegmentLog(new_dir, durability="never")
            for frame in survivors:
                new_log.append(frame)
            new_log.durability = self.durability if self.durability != "never" else "never"
            new_log.sync()
            new_log._fsync_dir()
            self._write_manifest(new_gen)

            old_dir = self._gen_dir(self.generation)
            self._log.close()
            self._log = new_log
            self.generation = new_gen
            shutil.rmtree(old_dir, ignore_errors=True)

            # Rebuild in-memory state from the surviving fragments.
            orphan_state = self._assembly.orphans
            self._assembly = asm.AssemblyState(orphan_ttl=self._assembly.orphan_ttl)
            self._assembly.orphans = orphan_state
            self._positions = {
                key: pos for key, pos in self._positions.items() if pos.area == "orphan"
            }
            self._frag_meta = {}
            self._runs = {}
            for position, env in enumerate(survivor_envs):
                hexd = fragment_digest_hex(survivors[position])
                asm.apply_fragment(self._assembly, env, now, canonical_hex=hexd)
                self._index_fragment(env, FragmentPosition("log", position))
                self._positions[(env.event_id, env.fragment_id)] = FragmentPosition(
                    "log", position
                )

            # Blob GC: only references young enough to keep their content
            # (or held by surviving artifacts/orphans) stay live.
            live: set[str] = set()
            for env in survivor_envs:
                live.update(_live_blob_refs(env, content_cutoff))
            for bucket in self._assembly.orphans.values():
                for q in bucket:
                    live.update(_live_blob_refs(q.envelope, content_cutoff))
            for digest in list(self.blobs.digests()):
                if digest not in live:
                    self.blobs.delete(digest)
                    report.blobs_removed += 1

        report.wall_clock = time.perf_counter() - t0
        return report

    def close(self) -> None:
        self._log.close()
        self._orphans.close()


def _live_blob_refs(env: FragmentEnvelope, content_cutoff: datetime) -> set[str]:
    refs: set[str] = set()
    payload = env.payload
    if isinstance(payload, StartPayload):
        addr = payload.inputs.content_address
        if addr is not None and env.emitted_at >= content_cutoff:
            refs.add(addr.digest)
    elif isinstance(payload, OutputPayload):
        if isinstance(payload.body, ContentAddress) and env.emitted_at >= content_cutoff:
            refs.add(payload.body.digest)
    elif isinstance(payload, ArtifactPayload) and isinstance(payload.body, ContentAddress):
        # Surviving artifacts are younger than the artifact TTL, which is
        # never longer than the content TTL; their references stay live.
        refs.add(payload.body.digest)
    return refs
