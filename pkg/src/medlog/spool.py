"""Durable write-behind client queue with delayed synchronization.

Fragments are validated and persisted locally before enqueue returns, then
delivered oldest-first when a collector is reachable. Delivery is
at-least-once: the collector's idempotent ingestion turns re-sends into
duplicates, so entries acked as accepted/duplicate/quarantined never go
out again. Conflicts (a logic bug, not weather) retry up to max_attempts
and then dead-letter; transport failures retry forever.

The spool file reuses the store's segment frame format; entry state lives
in a jsonl sidecar so another process can rebuild the queue by replay.
"""

from __future__ import annotations

import enum
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Protocol

from .model import (
    FragmentEnvelope,
    FragmentKind,
    canonicalize,
    envelope_from_wire,
    validate_fragment,
)
from .segments import SegmentLog

DEFAULT_MAX_ATTEMPTS = 10


class SpoolError(RuntimeError):
    pass


class SpoolOrderError(SpoolError):
    """Append enqueued before its event's start (and no start-elsewhere flag)."""


class InvalidFragmentError(SpoolError):
    def __init__(self, violations):
        self.violations = violations
        super().__init__("; ".join(str(v) for v in violations))


class EntryState(str, enum.Enum):
    PENDING = "pending"
    ACKED = "acked"
    DEAD = "dead"


@dataclass
class SpoolEntry:
    position: int
    event_id: str
    fragment_id: str
    kind: FragmentKind
    state: EntryState = EntryState.PENDING
    attempts: int = 0


@dataclass
class SyncReport:
    """Outcome counts for one sync call; sent partitions into the rest."""

    sent: int = 0
    acked: int = 0
    duplicates: int = 0
    quarantined: int = 0
    conflicts: int = 0
    dead_lettered: int = 0
    still_pending: int = 0
    duration: float = 0.0

    def merge(self, other: "SyncReport") -> None:
        self.sent += other.sent
        self.acked += other.acked
        self.duplicates += other.duplicates
        self.quarantined += other.quarantined
        self.conflicts += other.conflicts
        self.dead_lettered += other.dead_lettered
        self.still_pending += other.still_pending

    def to_wire(self) -> dict[str, Any]:
        return {
            "sent": self.sent,
            "acked": self.acked,
            "duplicates": self.duplicates,
            "quarantined": self.quarantined,
            "conflicts": self.conflicts,
            "dead_lettered": self.dead_lettered,
            "still_pending": self.still_pending,
            "duration": self.duration,
        }


# -- transport ---------------------------------------------------------------


@dataclass(frozen=True)
class IngestAck:
    status: str  # accepted | duplicate | quarantined | conflict | invalid
    dropped: bool = False


class CollectorUnreachableError(SpoolError):
    """Connection could not be established; nothing was transmitted."""


class TransportError(SpoolError):
    """The request may or may not have reached the collector."""


class CollectorClient(Protocol):
    def send_fragment(self, kind: str, body: dict) -> IngestAck: ...


class HttpCollectorClient:
    """Synchronous HTTP client for the collector's ingestion endpoints."""

    def __init__(self, base_url: str, client=None, timeout: float = 10.0) -> None:
        import httpx

        self._client = client or httpx.Client(base_url=base_url, timeout=timeout)

    def send_fragment(self, kind: str, body: dict) -> IngestAck:
        import httpx

        try:
            response = self._client.post(f"/v1/fragments/{kind}", json=body)
        except httpx.ConnectError as exc:
            raise CollectorUnreachableError(str(exc)) from exc
        except httpx.HTTPError as exc:
            raise TransportError(str(exc)) from exc
        if response.status_code >= 500:
            raise TransportError(f"collector error {response.status_code}")
        try:
            payload = response.json()
        except ValueError as exc:
            raise TransportError(f"undecodable collector response: {exc}") from exc
        return IngestAck(status=payload["status"], dropped=payload.get("dropped", False))

    def close(self) -> None:
        self._client.close()


@dataclass
class Backoff:
    base_delay: float = 0.2
    factor: float = 2.0
    max_delay: float = 30.0

    def delay(self, attempt: int) -> float:
        return min(self.max_delay, self.base_delay * self.factor**attempt)


# -- spool ---------------------------------------------------------------------


class Spool:
    def __init__(
        self,
        directory: str | Path,
        durability: str = "always",
        max_attempts: int = DEFAULT_MAX_ATTEMPTS,
    ) -> None:
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.max_attempts = max_attempts
        self._log = SegmentLog(self.directory, prefix="spool", durability=durability)
        self._state_path = self.directory / "state.jsonl"
        self._entries: list[SpoolEntry] = []
        self._events_with_start: set[str] = set()
        self._replay()
        self._state_file = open(self._state_path, "a")

    def _replay(self) -> None:
        for position, frame in self._log.frames():
            env = envelope_from_wire(json.loads(frame))
            self._entries.append(
                SpoolEntry(position, env.event_id, env.fragment_id, env.fragment_kind)
            )
            if env.fragment_kind is FragmentKind.START:
                self._events_with_start.add(env.event_id)
        if self._state_path.exists():
            with open(self._state_path) as f:
                for line in f:
                    line = line.strip()
                    if not line:
                        continue
                    row = json.loads(line)
                    entry = self._entries[row["p"]]
                    entry.state = EntryState(row["s"])
                    entry.attempts = max(entry.attempts, row.get("a", 0))

    def _write_state(self, entry: SpoolEntry) -> None:
        self._state_file.write(
            json.dumps({"p": entry.position, "s": entry.state.value, "a": entry.attempts}) + "\n"
        )

    def _flush_state(self) -> None:
        self._state_file.flush()
        os.fsync(self._state_file.fileno())

    # -- enqueue ----------------------------------------------------------------

    def enqueue(self, env: FragmentEnvelope, start_elsewhere: bool = False) -> int:
        """Validate and persist one fragment; durable before return.

        Per-event ordering is enforced here: an append for an event whose
        start this spool has never seen is rejected unless the caller
        asserts the start was emitted through another channel.
        """
        result = validate_fragment(env)
        if not result.ok:
            raise InvalidFragmentError(result.violations)
        if (
            env.fragment_kind is not FragmentKind.START
            and env.event_id not in self._events_with_start
            and not start_elsewhere
        ):
            raise SpoolOrderError(
                f"append for {env.event_id!r} enqueued before its start; "
                "pass start_elsewhere=True if the start was emitted elsewhere"
            )
        frame = canonicalize(env)
        position = self._log.append(frame)
        self._entries.append(SpoolEntry(position, env.event_id, env.fragment_id, env.fragment_kind))
        if env.fragment_kind is FragmentKind.START:
            self._events_with_start.add(env.event_id)
        return position

    def pending(self) -> list[SpoolEntry]:
        return [e for e in self._entries if e.state is EntryState.PENDING]

    def entry(self, position: int) -> SpoolEntry:
        return self._entries[position]

    def envelope_body(self, position: int) -> dict:
        return json.loads(self._log.read(position))

    # -- sync --------------------------------------------------------------------

    def sync(
        self,
        client: CollectorClient,
        batch_size: int = 100,
        backoff: Backoff | None = None,
        max_passes: int = 12,
        sleep: Callable[[float], None] = time.sleep,
    ) -> SyncReport:
        """Deliver pending entries oldest-first; safe with no connectivity.

        A pass walks all pending entries in batches. Passes repeat while
        anything advanced (acks, or conflict attempts ticking toward the
        dead-letter limit); transport trouble backs off exponentially
        between passes, and an unreachable collector ends the call.
        """
        backoff = backoff or Backoff()
        report = SyncReport()
        start = time.perf_counter()
        failed_passes = 0
        for _ in range(max_passes):
            pass_report, advanced, unreachable = self._sync_pass(client, batch_size)
            report.merge(pass_report)
            if not self.pending():
                break
            if unreachable and not advanced:
                break
            if advanced:
                failed_passes = 0
            else:
                sleep(backoff.delay(failed_passes))
                failed_passes += 1
        report.duration = time.perf_counter() - start
        return report

    def _sync_pass(self, client: CollectorClient, batch_size: int) -> tuple[SyncReport, bool, bool]:
        report = SyncReport()
        advanced = False
        unreachable = False
        pending = self.pending()
        for batch_start in range(0, len(pending), batch_size):
            batch = pending[batch_start : batch_start + batch_size]
            for entry in batch:
                body = self.envelope_body(entry.position)
                try:
                    ack = client.send_fragment(entry.kind.value, body)
                except CollectorUnreachableError:
                    unreachable = True
                    break
                except TransportError:
                    report.sent += 1
                    report.still_pending += 1
                    continue
                report.sent += 1
                if ack.status == "accepted":
                    report.acked += 1
                    entry.state = EntryState.ACKED
                    advanced = True
                elif ack.status == "duplicate":
                    report.duplicates += 1
                    entry.state = EntryState.ACKED
                    advanced = True
                elif ack.status == "quarantined":
                    # Accepted for later reconciliation: delivered.
                    report.quarantined += 1
                    entry.state = EntryState.ACKED
                    advanced = True
                else:  # conflict / invalid: deterministic rejection
                    entry.attempts += 1
                    advanced = True
                    if entry.attempts >= self.max_attempts:
                        entry.state = EntryState.DEAD
                        report.dead_lettered += 1
                    else:
                        report.conflicts += 1
                self._write_state(entry)
            else:
                self._flush_state()
                continue
            self._flush_state()
            break
        return report, advanced, unreachable

    def close(self) -> None:
        self._log.close()
        self._state_file.close()
