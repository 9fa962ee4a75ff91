"""Order-insensitive folding of fragments into records, plus run trees.

Fragments may arrive in any order: append-kind fragments that precede their
event's start are quarantined as orphans until the start shows up or a TTL
expires. Folding is idempotent (dedup by fragment_id + canonical bytes) and
monotone (a fragment never removes data from a record).
"""

from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from typing import Iterable

from .model import (
    FragmentEnvelope,
    FragmentKind,
    MedLogRecord,
    OutputPayload,
    RecordEntry,
    RecordStatus,
    StartPayload,
    canonicalize,
    digest_sort_key,
    fragment_digest_hex,
)

DEFAULT_ORPHAN_TTL = timedelta(hours=72)


class ApplyOutcome(enum.Enum):
    APPLIED = "applied"
    DUPLICATE = "duplicate"
    QUARANTINED = "quarantined"
    CONFLICT = "conflict"


@dataclass
class QuarantinedFragment:
    envelope: FragmentEnvelope
    deadline: datetime
    canonical_hex: str


@dataclass
class AssemblyState:
    """Working state of the fold.

    An event_id lives in `records` xor `orphans`; `seen` maps each folded
    fragment_id to the hex digest of its canonical bytes (the idempotency
    check distinguishes duplicates from conflicting reuse of an id).
    """

    records: dict[str, MedLogRecord] = field(default_factory=dict)
    orphans: dict[str, list[QuarantinedFragment]] = field(default_factory=dict)
    seen: dict[str, dict[str, str]] = field(default_factory=dict)
    orphan_ttl: timedelta = DEFAULT_ORPHAN_TTL


def _insert_entry(entries: tuple[RecordEntry, ...], entry: RecordEntry) -> tuple[RecordEntry, ...]:
    keys = [e.sort_key for e in entries]
    i = bisect.bisect_right(keys, entry.sort_key)
    return entries[:i] + (entry,) + entries[i:]


def _insert_fragment(
    fragments: tuple[FragmentEnvelope, ...], env: FragmentEnvelope
) -> tuple[FragmentEnvelope, ...]:
    keys = [digest_sort_key(f) for f in fragments]
    i = bisect.bisect_right(keys, digest_sort_key(env))
    return fragments[:i] + (env,) + fragments[i:]


def _record_from_start(env: FragmentEnvelope) -> MedLogRecord:
    payload = env.payload
    assert isinstance(payload, StartPayload)
    return MedLogRecord(
        event_id=env.event_id,
        header=payload.header,
        model=payload.model,
        user=payload.user,
        target=payload.target,
        inputs=payload.inputs,
        fragments=(env,),
    )


def _fold_append(rec: MedLogRecord, env: FragmentEnvelope) -> MedLogRecord:
    entry = RecordEntry(
        sequence=env.sequence,
        fragment_id=env.fragment_id,
        emitted_at=env.emitted_at,
        payload=env.payload,
    )
    fragments = _insert_fragment(rec.fragments, env)
    kind = env.fragment_kind
    if kind is FragmentKind.ARTIFACT:
        return replace(rec, artifacts=_insert_entry(rec.artifacts, entry), fragments=fragments)
    if kind is FragmentKind.OUTPUT:
        status = rec.status
        payload = env.payload
        assert isinstance(payload, OutputPayload)
        # Status is set by the first terminal output and kept thereafter.
        if payload.terminal and status is RecordStatus.OPEN:
            status = RecordStatus.FAILED if payload.failure else RecordStatus.COMPLETED
        return replace(rec, outputs=_insert_entry(rec.outputs, entry), status=status, fragments=fragments)
    if kind is FragmentKind.OUTCOME:
        return replace(rec, outcomes=_insert_entry(rec.outcomes, entry), fragments=fragments)
    return replace(rec, feedback=_insert_entry(rec.feedback, entry), fragments=fragments)


def apply_fragment(
    state: AssemblyState,
    env: FragmentEnvelope,
    now: datetime,
    canonical_hex: str | None = None,
) -> tuple[AssemblyState, ApplyOutcome]:
    """Fold one validated fragment into the state (updated in place).

    The caller is responsible for per-event serialization when calling
    concurrently; distinct event_ids may be folded in parallel.
    """
    if canonical_hex is None:
        canonical_hex = fragment_digest_hex(canonicalize(env))
    eid = env.event_id

    if env.fragment_kind is FragmentKind.START:
        if eid in state.records:
            if env.fragment_id in state.seen[eid]:
                if state.seen[eid][env.fragment_id] == canonical_hex:
                    return state, ApplyOutcome.DUPLICATE
                return state, ApplyOutcome.CONFLICT
            # A different fragment_id necessarily means different bytes: a
            # second, conflicting start for an already-started event.
            return state, ApplyOutcome.CONFLICT
        rec = _record_from_start(env)
        state.seen.setdefault(eid, {})[env.fragment_id] = canonical_hex
        quarantined = state.orphans.pop(eid, [])
        for q in quarantined:
            rec = _fold_append(rec, q.envelope)
            state.seen[eid][q.envelope.fragment_id] = q.canonical_hex
        state.records[eid] = rec
        return state, ApplyOutcome.APPLIED

    # Append kinds.
    if eid in state.records:
        seen = state.seen[eid]
        if env.fragment_id in seen:
            if seen[env.fragment_id] == canonical_hex:
                return state, ApplyOutcome.DUPLICATE
            return state, ApplyOutcome.CONFLICT
        state.records[eid] = _fold_append(state.records[eid], env)
        seen[env.fragment_id] = canonical_hex
        return state, ApplyOutcome.APPLIED

    # Unknown event: quarantine until the start arrives.
    bucket = state.orphans.setdefault(eid, [])
    for q in bucket:
        if q.envelope.fragment_id == env.fragment_id:
            if q.canonical_hex == canonical_hex:
                return state, ApplyOutcome.QUARANTINED
            return state, ApplyOutcome.CONFLICT
    bucket.append(QuarantinedFragment(env, now + state.orphan_ttl, canonical_hex))
    return state, ApplyOutcome.QUARANTINED


def classify_fragment(
    state: AssemblyState, env: FragmentEnvelope, canonical_hex: str
) -> ApplyOutcome:
    """Predict apply_fragment's outcome without mutating the state.

    Lets a durable store write (or skip) the fragment before folding it;
    kept next to apply_fragment so the two decision trees stay in lockstep.
    """
    eid = env.event_id
    if env.fragment_kind is FragmentKind.START:
        if eid in state.records:
            known = state.seen[eid].get(env.fragment_id)
            if known == canonical_hex:
                return ApplyOutcome.DUPLICATE
            return ApplyOutcome.CONFLICT
        return ApplyOutcome.APPLIED
    if eid in state.records:
        known = state.seen[eid].get(env.fragment_id)
        if known is None:
            return ApplyOutcome.APPLIED
        if known == canonical_hex:
            return ApplyOutcome.DUPLICATE
        return ApplyOutcome.CONFLICT
    for q in state.orphans.get(eid, ()):
        if q.envelope.fragment_id == env.fragment_id:
            if q.canonical_hex == canonical_hex:
                return ApplyOutcome.QUARANTINED
            return ApplyOutcome.CONFLICT
    return ApplyOutcome.QUARANTINED


def _start_fragment_id(rec: MedLogRecord) -> str:
    for env in rec.fragments:
        if env.fragment_kind is FragmentKind.START:
            return env.fragment_id
    raise LookupError(f"record {rec.event_id} has no start fragment")


def assemble(
    fragments: Iterable[FragmentEnvelope],
) -> tuple[dict[str, MedLogRecord], dict[str, list[FragmentEnvelope]]]:
    """Fold a complete fragment multiset; any fold order yields equal records.

    Returns (records, unassemblable) where unassemblable holds the fragments
    of events whose start is absent from the multiset.
    """
    state = AssemblyState()
    epoch = datetime.fromtimestamp(0, tz=timezone.utc)
    for env in fragments:
        apply_fragment(state, env, epoch)
    unassemblable = {
        eid: [q.envelope for q in bucket] for eid, bucket in state.orphans.items()
    }
    return state.records, unassemblable


def expire_orphans(
    state: AssemblyState, now: datetime
) -> tuple[AssemblyState, list[FragmentEnvelope]]:
    """Drop quarantined fragments whose deadline has passed and return them."""
    expired: list[FragmentEnvelope] = []
    for eid in list(state.orphans):
        bucket = state.orphans[eid]
        keep = [q for q in bucket if q.deadline >= now]
        if len(keep) != len(bucket):
            expired.extend(q.envelope for q in bucket if q.deadline < now)
        if keep:
            state.orphans[eid] = keep
        else:
            del state.orphans[eid]
    return state, expired


# ---------------------------------------------------------------------------
# Run trees


@dataclass(frozen=True)
class RunTree:
    """Forest of events linked by parent_event_id within one run."""

    run_id: str
    nodes: frozenset[str]
    edges: dict[str, tuple[str, ...]]  # parent event_id -> children
    roots: tuple[str, ...]


class RunCycleError(ValueError):
    def __init__(self, cycle: list[str]):
        self.cycle = cycle
        super().__init__(f"parent links form a cycle: {' -> '.join(cycle)}")


def build_run_tree(run_id: str, records: Iterable[MedLogRecord]) -> RunTree:
    """Link a run's events into a forest; parents outside the set become roots."""
    members = {
        rec.event_id: rec
        for rec in records
        if rec.header is not None and rec.header.run_id == run_id
    }
    parent: dict[str, str | None] = {}
    for eid, rec in members.items():
        p = rec.header.parent_event_id if rec.header else None
        parent[eid] = p if p in members and p != eid else None

    # Each node has at most one parent, so any cycle is a parent-chain loop.
    resolved: set[str] = set()
    for start_node in parent:
        path: list[str] = []
        on_path: set[str] = set()
        node: str | None = start_node
        while node is not None and node not in resolved:
            if node in on_path:
                cycle = path[path.index(node):] + [node]
                raise RunCycleError(cycle)
            path.append(node)
            on_path.add(node)
            node = parent[node]
        resolved.update(path)

    edges: dict[str, list[str]] = {}
    roots = []
    for eid in sorted(members):
        p = parent[eid]
        if p is None:
            roots.append(eid)
        else:
            edges.setdefault(p, []).append(eid)
    return RunTree(
        run_id=run_id,
        nodes=frozenset(members),
        edges={p: tuple(sorted(children)) for p, children in edges.items()},
        roots=tuple(roots),
    )
