"""Nine-field record schema: fragment envelopes, payloads, validation, digests.

A record describes one model invocation and is assembled from immutable
fragments. The initial ``start`` fragment carries the five fields known at
inference time (header, model, user, target, inputs); artifacts, outputs,
outcomes, and feedback arrive as separate append fragments that reference
the same event_id.

Everything here is an immutable value; every operation is a pure function.
Validation never raises for bad data — violations are returned as values.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Any, Iterable, Union

from .canonical import (
    CanonicalizationError,
    canonical_bytes,
    format_rfc3339,
    parse_rfc3339,
)

SPEC_VERSION = "medlog/0.1"

_ID_MIN, _ID_MAX = 1, 128


class FragmentKind(str, enum.Enum):
    START = "start"
    ARTIFACT = "artifact"
    OUTPUT = "output"
    OUTCOME = "outcome"
    FEEDBACK = "feedback"


# Digest ordering for fragment kinds (declaration order, start first).
KIND_ORDER = {kind: i for i, kind in enumerate(FragmentKind)}

APPEND_KINDS = (
    FragmentKind.ARTIFACT,
    FragmentKind.OUTPUT,
    FragmentKind.OUTCOME,
    FragmentKind.FEEDBACK,
)


class PrincipalKind(str, enum.Enum):
    HUMAN = "human"
    SERVICE = "service"
    AGENT = "agent"
    SCHEDULED_JOB = "scheduled_job"


class TargetKind(str, enum.Enum):
    PATIENT = "patient"
    CLAIM = "claim"
    ENCOUNTER = "encounter"
    OTHER = "other"


class InputMode(str, enum.Enum):
    INLINE = "inline"
    REFERENCE = "reference"


class ArtifactKind(str, enum.Enum):
    REASONING_TRACE = "reasoning_trace"
    RETRIEVAL_CONTEXT = "retrieval_context"
    AGENT_TRACE = "agent_trace"
    UNCERTAINTY = "uncertainty"
    INTERPRETABILITY = "interpretability"
    MODEL_STATE_SNAPSHOT = "model_state_snapshot"


class OutputModality(str, enum.Enum):
    PREDICTION = "prediction"
    TEXT = "text"
    IMAGE_REF = "image_ref"
    RECOMMENDATION = "recommendation"
    EXPLANATION = "explanation"


class LinkageBasis(str, enum.Enum):
    ATTESTATION = "attestation"
    TEMPORAL_PROXIMITY = "temporal_proximity"
    AUTOMATED_QUERY = "automated_query"
    TRIAL_EMULATION = "trial_emulation"


class RecordStatus(str, enum.Enum):
    OPEN = "open"
    FAILED = "failed"
    COMPLETED = "completed"


class ConformanceProfile(enum.IntEnum):
    """Field-completeness tiers; totally ordered."""

    NONCONFORMANT = 0
    MINIMAL = 1
    STANDARD = 2
    FULL = 3

    @property
    def token(self) -> str:
        return self.name.lower()

    @classmethod
    def from_token(cls, token: str) -> "ConformanceProfile":
        try:
            return cls[token.upper()]
        except KeyError:
            raise ValueError(f"unknown conformance profile: {token!r}") from None


@dataclass(frozen=True)
class ContentAddress:
    """Hash-based reference to a payload stored once, in place of raw media."""

    algorithm: str
    digest: str  # hex-encoded
    size: int

    @classmethod
    def for_bytes(cls, data: bytes) -> "ContentAddress":
        return cls("sha-256", hashlib.sha256(data).hexdigest(), len(data))


InlineContent = Union[str, dict]
Body = Union[str, dict, ContentAddress]


@dataclass(frozen=True)
class Header:
    server_id: str
    invoked_at: datetime
    spec_version: str = SPEC_VERSION
    input_retrieved_at: datetime | None = None
    run_id: str | None = None
    parent_event_id: str | None = None


@dataclass(frozen=True)
class ModelInstance:
    model_id: str
    model_version: str
    model_card_ref: str | None = None
    data_sheet_ref: str | None = None
    training_data_version: str | None = None
    retrieval_sources: tuple[str, ...] | None = None
    test_time_edits: str | None = None


@dataclass(frozen=True)
class Principal:
    kind: PrincipalKind
    id: str
    id_system: str


@dataclass(frozen=True)
class UserIdentity:
    """Provenance chain, immediate caller first, most-upstream initiator last."""

    chain: tuple[Principal, ...]


@dataclass(frozen=True)
class TargetIdentity:
    kind: TargetKind
    id: str
    id_system: str


@dataclass(frozen=True)
class Inputs:
    mode: InputMode
    media_type: str
    content: InlineContent | None = None
    content_address: ContentAddress | None = None
    features: dict[str, float] | None = None


@dataclass(frozen=True)
class StartPayload:
    header: Header
    model: ModelInstance
    user: UserIdentity
    inputs: Inputs
    target: TargetIdentity | None = None


@dataclass(frozen=True)
class ArtifactPayload:
    artifact_kind: ArtifactKind
    body: Body


@dataclass(frozen=True)
class OutputPayload:
    modality: OutputModality
    body: Body
    confidence: float | None = None
    risk_score: float | None = None
    triage_flag: bool = False
    terminal: bool = False
    failure: bool = False


@dataclass(frozen=True)
class OutcomePayload:
    action_taken: str
    observed_at: datetime
    linkage_basis: LinkageBasis
    linkage_strength: float
    observed_result: str | None = None


@dataclass(frozen=True)
class FeedbackPayload:
    rating: int | None = None
    free_text: str | None = None
    rater: Principal | None = None


Payload = Union[StartPayload, ArtifactPayload, OutputPayload, OutcomePayload, FeedbackPayload]

_PAYLOAD_TYPES: dict[FragmentKind, type] = {
    FragmentKind.START: StartPayload,
    FragmentKind.ARTIFACT: ArtifactPayload,
    FragmentKind.OUTPUT: OutputPayload,
    FragmentKind.OUTCOME: OutcomePayload,
    FragmentKind.FEEDBACK: FeedbackPayload,
}


@dataclass(frozen=True)
class FragmentEnvelope:
    """One immutable protocol message contributing to a record."""

    event_id: str
    fragment_id: str
    fragment_kind: FragmentKind
    sequence: int
    emitted_at: datetime
    payload: Payload
    spec_version: str = SPEC_VERSION


@dataclass(frozen=True)
class RecordEntry:
    """One appended fragment's payload plus its position in the record."""

    sequence: int
    fragment_id: str
    emitted_at: datetime
    payload: Payload

    @property
    def sort_key(self) -> tuple[int, str]:
        return (self.sequence, self.fragment_id)


@dataclass(frozen=True)
class MedLogRecord:
    """The assembled nine-field record for one model invocation."""

    event_id: str
    header: Header | None = None
    model: ModelInstance | None = None
    user: UserIdentity | None = None
    target: TargetIdentity | None = None
    inputs: Inputs | None = None
    artifacts: tuple[RecordEntry, ...] = ()
    outputs: tuple[RecordEntry, ...] = ()
    outcomes: tuple[RecordEntry, ...] = ()
    feedback: tuple[RecordEntry, ...] = ()
    status: RecordStatus = RecordStatus.OPEN
    fragments: tuple[FragmentEnvelope, ...] = ()  # constituents, digest-sorted


# ---------------------------------------------------------------------------
# Validation


@dataclass(frozen=True)
class Violation:
    field: str
    rule: str

    def __str__(self) -> str:
        return f"{self.field}: {self.rule}"


@dataclass(frozen=True)
class ValidationResult:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def _valid_id(value: Any) -> bool:
    return (
        isinstance(value, str)
        and _ID_MIN <= len(value) <= _ID_MAX
        and all("!" <= c <= "~" for c in value)
    )


def _check_timestamp(value: Any, field_name: str, out: list[Violation]) -> None:
    if not isinstance(value, datetime) or value.tzinfo is None:
        out.append(Violation(field_name, "must be a timezone-aware timestamp"))


def _check_address(addr: ContentAddress, field_name: str, out: list[Violation]) -> None:
    if addr.algorithm != "sha-256":
        out.append(Violation(f"{field_name}.algorithm", "unsupported algorithm"))
    if not (
        isinstance(addr.digest, str)
        and len(addr.digest) == 64
        and all(c in "0123456789abcdef" for c in addr.digest)
    ):
        out.append(Violation(f"{field_name}.digest", "must be 64 lowercase hex chars"))
    if not isinstance(addr.size, int) or addr.size < 0:
        out.append(Violation(f"{field_name}.size", "must be a non-negative byte count"))


def _check_body(body: Any, field_name: str, out: list[Violation]) -> None:
    if isinstance(body, ContentAddress):
        _check_address(body, field_name, out)
    elif not isinstance(body, (str, dict)):
        out.append(Violation(field_name, "must be inline text, key-value data, or a content address"))


def _is_finite_number(value: Any) -> bool:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        return False
    return value == value and value not in (float("inf"), float("-inf"))


def validate_fragment(env: FragmentEnvelope) -> ValidationResult:
    """Check every schema invariant; violations are data, not faults."""
    v: list[Violation] = []

    if env.spec_version != SPEC_VERSION:
        v.append(Violation("spec_version", f"unrecognized protocol version (expected {SPEC_VERSION})"))
    if not _valid_id(env.event_id):
        v.append(Violation("event_id", "must be 1-128 printable ASCII chars without whitespace"))
    if not _valid_id(env.fragment_id):
        v.append(Violation("fragment_id", "must be 1-128 printable ASCII chars without whitespace"))
    if not isinstance(env.sequence, int) or isinstance(env.sequence, bool) or env.sequence < 0:
        v.append(Violation("sequence", "must be a non-negative integer"))
    _check_timestamp(env.emitted_at, "emitted_at", v)

    expected = _PAYLOAD_TYPES.get(env.fragment_kind)
    if expected is None:
        v.append(Violation("fragment_kind", "unknown fragment kind"))
        return ValidationResult(tuple(v))
    if not isinstance(env.payload, expected):
        v.append(Violation("payload", "payload/kind mismatch"))
        return ValidationResult(tuple(v))

    p = env.payload
    if isinstance(p, StartPayload):
        _validate_start(env, p, v)
    elif isinstance(p, ArtifactPayload):
        if not isinstance(p.artifact_kind, ArtifactKind):
            v.append(Violation("payload.artifact_kind", "unknown artifact kind"))
        _check_body(p.body, "payload.body", v)
    elif isinstance(p, OutputPayload):
        if not isinstance(p.modality, OutputModality):
            v.append(Violation("payload.modality", "unknown output modality"))
        _check_body(p.body, "payload.body", v)
        if p.confidence is not None and not (
            _is_finite_number(p.confidence) and 0.0 <= p.confidence <= 1.0
        ):
            v.append(Violation("payload.confidence", "confidence out of [0,1]"))
        if p.risk_score is not None and not _is_finite_number(p.risk_score):
            v.append(Violation("payload.risk_score", "must be a finite number"))
    elif isinstance(p, OutcomePayload):
        if not isinstance(p.linkage_basis, LinkageBasis):
            v.append(Violation("payload.linkage_basis", "unknown linkage basis"))
        if not (_is_finite_number(p.linkage_strength) and 0.0 <= p.linkage_strength <= 1.0):
            v.append(Violation("payload.linkage_strength", "linkage_strength out of [0,1]"))
        _check_timestamp(p.observed_at, "payload.observed_at", v)
        if not isinstance(p.action_taken, str):
            v.append(Violation("payload.action_taken", "must be text"))
    elif isinstance(p, FeedbackPayload):
        if p.rating is None and p.free_text is None:
            v.append(Violation("payload", "at least one of rating/free_text required"))
        if p.rating is not None and not (
            isinstance(p.rating, int) and not isinstance(p.rating, bool) and 1 <= p.rating <= 5
        ):
            v.append(Violation("payload.rating", "rating out of 1-5"))

    return ValidationResult(tuple(v))


def _validate_start(env: FragmentEnvelope, p: StartPayload, v: list[Violation]) -> None:
    h = p.header
    if h.spec_version != env.spec_version:
        v.append(Violation("payload.header.spec_version", "must match envelope spec_version"))
    _check_timestamp(h.invoked_at, "payload.header.invoked_at", v)
    if h.input_retrieved_at is not None:
        _check_timestamp(h.input_retrieved_at, "payload.header.input_retrieved_at", v)
    if h.parent_event_id is not None and h.parent_event_id == env.event_id:
        v.append(Violation("payload.header.parent_event_id", "must not equal the record's own event_id"))
    if not isinstance(h.server_id, str):
        v.append(Violation("payload.header.server_id", "must be a string"))

    if not p.model.model_id:
        v.append(Violation("payload.model.model_id", "must be non-empty"))
    if not p.model.model_version:
        v.append(Violation("payload.model.model_version", "must be non-empty"))

    if not p.user.chain:
        v.append(Violation("payload.user.chain", "provenance chain must be non-empty"))
    for i, principal in enumerate(p.user.chain):
        if not isinstance(principal.kind, PrincipalKind):
            v.append(Violation(f"payload.user.chain[{i}].kind", "unknown principal kind"))
        if not principal.id:
            v.append(Violation(f"payload.user.chain[{i}].id", "must be non-empty"))

    if p.target is not None:
        if not isinstance(p.target.kind, TargetKind):
            v.append(Violation("payload.target.kind", "unknown target kind"))
        if not p.target.id:
            v.append(Violation("payload.target.id", "must be non-empty when target is present"))

    inp = p.inputs
    if not isinstance(inp.mode, InputMode):
        v.append(Violation("payload.inputs.mode", "unknown input mode"))
    elif inp.mode is InputMode.INLINE:
        if inp.content is None or inp.content_address is not None:
            v.append(Violation("payload.inputs", "inline mode requires content and no content_address"))
    else:
        if inp.content_address is None or inp.content is not None:
            v.append(Violation("payload.inputs", "reference mode requires content_address and no content"))
    if inp.content is not None and not isinstance(inp.content, (str, dict)):
        v.append(Violation("payload.inputs.content", "must be text or a key-value map"))
    if inp.content_address is not None:
        _check_address(inp.content_address, "payload.inputs.content_address", v)
    if inp.features is not None:
        for name, value in inp.features.items():
            if not _is_finite_number(value):
                v.append(Violation(f"payload.inputs.features[{name!r}]", "must be a finite number"))


# ---------------------------------------------------------------------------
# Wire form


def _omit_none(d: dict[str, Any]) -> dict[str, Any]:
    return {k: x for k, x in d.items() if x is not None}


def address_to_wire(addr: ContentAddress) -> dict[str, Any]:
    return {"algorithm": addr.algorithm, "digest": addr.digest, "size": addr.size}


def body_to_wire(body: Body) -> dict[str, Any]:
    if isinstance(body, ContentAddress):
        return {"content_address": address_to_wire(body)}
    return {"inline": body}


def header_to_wire(h: Header) -> dict[str, Any]:
    return _omit_none(
        {
            "server_id": h.server_id,
            "invoked_at": format_rfc3339(h.invoked_at),
            "spec_version": h.spec_version,
            "input_retrieved_at": format_rfc3339(h.input_retrieved_at) if h.input_retrieved_at else None,
            "run_id": h.run_id,
            "parent_event_id": h.parent_event_id,
        }
    )


def model_to_wire(m: ModelInstance) -> dict[str, Any]:
    return _omit_none(
        {
            "model_id": m.model_id,
            "model_version": m.model_version,
            "model_card_ref": m.model_card_ref,
            "data_sheet_ref": m.data_sheet_ref,
            "training_data_version": m.training_data_version,
            "retrieval_sources": list(m.retrieval_sources) if m.retrieval_sources is not None else None,
            "test_time_edits": m.test_time_edits,
        }
    )


def principal_to_wire(p: Principal) -> dict[str, Any]:
    return {"kind": p.kind.value, "id": p.id, "id_system": p.id_system}


def inputs_to_wire(i: Inputs) -> dict[str, Any]:
    return _omit_none(
        {
            "mode": i.mode.value,
            "media_type": i.media_type,
            "content": i.content,
            "content_address": address_to_wire(i.content_address) if i.content_address else None,
            "features": dict(i.features) if i.features is not None else None,
        }
    )


def payload_to_wire(payload: Payload) -> dict[str, Any]:
    if isinstance(payload, StartPayload):
        wire: dict[str, Any] = {
            "header": header_to_wire(payload.header),
            "model": model_to_wire(payload.model),
            "user": user_to_wire(payload.user),
            "inputs": inputs_to_wire(payload.inputs),
        }
        if payload.target is not None:
            wire["target"] = target_to_wire(payload.target)
        return wire
    if isinstance(payload, ArtifactPayload):
        return {"artifact_kind": payload.artifact_kind.value, "body": body_to_wire(payload.body)}
    if isinstance(payload, OutputPayload):
        return _omit_none(
            {
                "modality": payload.modality.value,
                "body": body_to_wire(payload.body),
                "confidence": payload.confidence,
                "risk_score": payload.risk_score,
                "triage_flag": payload.triage_flag,
                "terminal": payload.terminal,
                "failure": payload.failure,
            }
        )
    if isinstance(payload, OutcomePayload):
        return _omit_none(
            {
                "action_taken": payload.action_taken,
                "observed_result": payload.observed_result,
                "observed_at": format_rfc3339(payload.observed_at),
                "linkage_basis": payload.linkage_basis.value,
                "linkage_strength": payload.linkage_strength,
            }
        )
    if isinstance(payload, FeedbackPayload):
        return _omit_none(
            {
                "rating": payload.rating,
                "free_text": payload.free_text,
                "rater": principal_to_wire(payload.rater) if payload.rater else None,
            }
        )
    raise CanonicalizationError(f"unknown payload type {type(payload).__name__}")


def envelope_to_wire(env: FragmentEnvelope) -> dict[str, Any]:
    """Plain-JSON form of an envelope (not yet canonical bytes)."""
    return {
        "spec_version": env.spec_version,
        "event_id": env.event_id,
        "fragment_id": env.fragment_id,
        "fragment_kind": env.fragment_kind.value,
        "sequence": env.sequence,
        "emitted_at": format_rfc3339(env.emitted_at),
        "payload": payload_to_wire(env.payload),
    }


def canonicalize(env: FragmentEnvelope, validate: bool = True) -> bytes:
    """Deterministic byte encoding of a validated envelope.

    validate=False skips the validity re-check for callers that just ran
    validate_fragment themselves; the contract is unchanged otherwise.
    """
    if validate:
        result = validate_fragment(env)
        if not result.ok:
            raise CanonicalizationError(
                "cannot canonicalize invalid fragment: "
                + "; ".join(str(x) for x in result.violations)
            )
    return canonical_bytes(envelope_to_wire(env))


def fragment_digest_hex(canonical: bytes) -> str:
    return hashlib.sha256(canonical).hexdigest()


# ---------------------------------------------------------------------------
# Wire decoding


class EnvelopeDecodeError(ValueError):
    """The body cannot be decoded into a fragment envelope."""

    def __init__(self, violations: Iterable[Violation]):
        self.violations = tuple(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


class _Decoder:
    def __init__(self) -> None:
        self.violations: list[Violation] = []

    def fail(self, field_name: str, rule: str) -> None:
        self.violations.append(Violation(field_name, rule))

    def require(self, obj: dict, key: str, path: str) -> Any:
        if key not in obj:
            self.fail(f"{path}{key}", "missing required field")
            raise EnvelopeDecodeError(self.violations)
        return obj[key]

    def str_field(self, obj: dict, key: str, path: str, optional: bool = False) -> str | None:
        value = obj.get(key)
        if value is None:
            if not optional:
                self.fail(f"{path}{key}", "missing required field")
                raise EnvelopeDecodeError(self.violations)
            return None
        if not isinstance(value, str):
            self.fail(f"{path}{key}", "must be a string")
            raise EnvelopeDecodeError(self.violations)
        return value

    def int_field(self, obj: dict, key: str, path: str, optional: bool = False) -> int | None:
        value = obj.get(key)
        if value is None:
            if not optional:
                self.fail(f"{path}{key}", "missing required field")
                raise EnvelopeDecodeError(self.violations)
            return None
        if isinstance(value, bool):
            self.fail(f"{path}{key}", "must be an integer")
            raise EnvelopeDecodeError(self.violations)
        if isinstance(value, float):
            if value != int(value):
                self.fail(f"{path}{key}", "must be an integer")
                raise EnvelopeDecodeError(self.violations)
            value = int(value)
        if not isinstance(value, int):
            self.fail(f"{path}{key}", "must be an integer")
            raise EnvelopeDecodeError(self.violations)
        return value

    def num_field(self, obj: dict, key: str, path: str, optional: bool = False) -> float | None:
        value = obj.get(key)
        if value is None:
            if not optional:
                self.fail(f"{path}{key}", "missing required field")
                raise EnvelopeDecodeError(self.violations)
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(f"{path}{key}", "must be a number")
            raise EnvelopeDecodeError(self.violations)
        return float(value)

    def bool_field(self, obj: dict, key: str, path: str, default: bool = False) -> bool:
        value = obj.get(key)
        if value is None:
            return default
        if not isinstance(value, bool):
            self.fail(f"{path}{key}", "must be a boolean")
            raise EnvelopeDecodeError(self.violations)
        return value

    def ts_field(self, obj: dict, key: str, path: str, optional: bool = False) -> datetime | None:
        text = self.str_field(obj, key, path, optional=optional)
        if text is None:
            return None
        try:
            return parse_rfc3339(text)
        except CanonicalizationError:
            self.fail(f"{path}{key}", "must be an RFC 3339 timestamp")
            raise EnvelopeDecodeError(self.violations) from None

    def enum_field(self, obj: dict, key: str, path: str, enum_cls: type, optional: bool = False):
        text = self.str_field(obj, key, path, optional=optional)
        if text is None:
            return None
        try:
            return enum_cls(text)
        except ValueError:
            self.fail(f"{path}{key}", f"unknown {enum_cls.__name__} value {text!r}")
            raise EnvelopeDecodeError(self.violations) from None

    def check_keys(self, obj: dict, allowed: set[str], path: str) -> None:
        unknown = sorted(set(obj) - allowed)
        if unknown:
            self.fail(path.rstrip(".") or "envelope", f"unknown fields: {', '.join(unknown)}")
            raise EnvelopeDecodeError(self.violations)

    def object_field(self, obj: dict, key: str, path: str, optional: bool = False) -> dict | None:
        value = obj.get(key)
        if value is None:
            if not optional:
                self.fail(f"{path}{key}", "missing required field")
                raise EnvelopeDecodeError(self.violations)
            return None
        if not isinstance(value, dict):
            self.fail(f"{path}{key}", "must be an object")
            raise EnvelopeDecodeError(self.violations)
        return value


def _decode_address(d: _Decoder, obj: dict, path: str) -> ContentAddress:
    d.check_keys(obj, {"algorithm", "digest", "size"}, path)
    return ContentAddress(
        algorithm=d.str_field(obj, "algorithm", path),
        digest=d.str_field(obj, "digest", path),
        size=d.int_field(obj, "size", path),
    )


def _decode_body(d: _Decoder, obj: dict, path: str) -> Body:
    d.check_keys(obj, {"inline", "content_address"}, path)
    has_inline = "inline" in obj
    has_addr = "content_address" in obj
    if has_inline == has_addr:
        d.fail(path.rstrip("."), "body must carry exactly one of inline/content_address")
        raise EnvelopeDecodeError(d.violations)
    if has_addr:
        addr = d.object_field(obj, "content_address", path)
        return _decode_address(d, addr, path + "content_address.")
    inline = obj["inline"]
    if not isinstance(inline, (str, dict)):
        d.fail(path + "inline", "must be text or a key-value map")
        raise EnvelopeDecodeError(d.violations)
    return inline


def _decode_principal(d: _Decoder, obj: dict, path: str) -> Principal:
    d.check_keys(obj, {"kind", "id", "id_system"}, path)
    return Principal(
        kind=d.enum_field(obj, "kind", path, PrincipalKind),
        id=d.str_field(obj, "id", path),
        id_system=d.str_field(obj, "id_system", path),
    )


def _decode_header(d: _Decoder, h: dict, path: str = "payload.header.") -> Header:
    d.check_keys(
        h,
        {"server_id", "invoked_at", "spec_version", "input_retrieved_at", "run_id", "parent_event_id"},
        path,
    )
    return Header(
        server_id=d.str_field(h, "server_id", path),
        invoked_at=d.ts_field(h, "invoked_at", path),
        spec_version=d.str_field(h, "spec_version", path),
        input_retrieved_at=d.ts_field(h, "input_retrieved_at", path, optional=True),
        run_id=d.str_field(h, "run_id", path, optional=True),
        parent_event_id=d.str_field(h, "parent_event_id", path, optional=True),
    )


def _decode_model(d: _Decoder, m: dict, path: str = "payload.model.") -> ModelInstance:
    d.check_keys(
        m,
        {
            "model_id",
            "model_version",
            "model_card_ref",
            "data_sheet_ref",
            "training_data_version",
            "retrieval_sources",
            "test_time_edits",
        },
        path,
    )
    sources = m.get("retrieval_sources")
    if sources is not None and not (
        isinstance(sources, list) and all(isinstance(s, str) for s in sources)
    ):
        d.fail(path + "retrieval_sources", "must be a list of URI strings")
        raise EnvelopeDecodeError(d.violations)
    return ModelInstance(
        model_id=d.str_field(m, "model_id", path),
        model_version=d.str_field(m, "model_version", path),
        model_card_ref=d.str_field(m, "model_card_ref", path, optional=True),
        data_sheet_ref=d.str_field(m, "data_sheet_ref", path, optional=True),
        training_data_version=d.str_field(m, "training_data_version", path, optional=True),
        retrieval_sources=tuple(sources) if sources is not None else None,
        test_time_edits=d.str_field(m, "test_time_edits", path, optional=True),
    )


def _decode_user(d: _Decoder, u: dict, path: str = "payload.user.") -> UserIdentity:
    d.check_keys(u, {"chain"}, path)
    chain = u.get("chain")
    if not isinstance(chain, list):
        d.fail(path + "chain", "must be a list")
        raise EnvelopeDecodeError(d.violations)
    principals = []
    for i, entry in enumerate(chain):
        if not isinstance(entry, dict):
            d.fail(f"{path}chain[{i}]", "must be an object")
            raise EnvelopeDecodeError(d.violations)
        principals.append(_decode_principal(d, entry, f"{path}chain[{i}]."))
    return UserIdentity(chain=tuple(principals))


def _decode_target(d: _Decoder, t: dict, path: str = "payload.target.") -> TargetIdentity:
    d.check_keys(t, {"kind", "id", "id_system"}, path)
    return TargetIdentity(
        kind=d.enum_field(t, "kind", path, TargetKind),
        id=d.str_field(t, "id", path),
        id_system=d.str_field(t, "id_system", path),
    )


def _decode_start(d: _Decoder, obj: dict) -> StartPayload:
    d.check_keys(obj, {"header", "model", "user", "target", "inputs"}, "payload.")
    header = _decode_header(d, d.object_field(obj, "header", "payload."))
    model = _decode_model(d, d.object_field(obj, "model", "payload."))
    user = _decode_user(d, d.object_field(obj, "user", "payload."))

    target = None
    t = d.object_field(obj, "target", "payload.", optional=True)
    if t is not None:
        target = _decode_target(d, t)

    i = d.object_field(obj, "inputs", "payload.")
    d.check_keys(i, {"mode", "media_type", "content", "content_address", "features"}, "payload.inputs.")
    content = i.get("content")
    if content is not None and not isinstance(content, (str, dict)):
        d.fail("payload.inputs.content", "must be text or a key-value map")
        raise EnvelopeDecodeError(d.violations)
    addr_obj = d.object_field(i, "content_address", "payload.inputs.", optional=True)
    features = i.get("features")
    if features is not None:
        if not isinstance(features, dict):
            d.fail("payload.inputs.features", "must be a map of feature name to number")
            raise EnvelopeDecodeError(d.violations)
        coerced: dict[str, float] = {}
        for name, value in features.items():
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                d.fail(f"payload.inputs.features[{name!r}]", "must be a number")
                raise EnvelopeDecodeError(d.violations)
            coerced[name] = float(value)
        features = coerced
    inputs = Inputs(
        mode=d.enum_field(i, "mode", "payload.inputs.", InputMode),
        media_type=d.str_field(i, "media_type", "payload.inputs."),
        content=content,
        content_address=_decode_address(d, addr_obj, "payload.inputs.content_address.")
        if addr_obj is not None
        else None,
        features=features,
    )
    return StartPayload(header=header, model=model, user=user, inputs=inputs, target=target)


def _decode_payload(d: _Decoder, kind: FragmentKind, obj: dict) -> Payload:
    if kind is FragmentKind.START:
        return _decode_start(d, obj)
    if kind is FragmentKind.ARTIFACT:
        d.check_keys(obj, {"artifact_kind", "body"}, "payload.")
        body = d.object_field(obj, "body", "payload.")
        return ArtifactPayload(
            artifact_kind=d.enum_field(obj, "artifact_kind", "payload.", ArtifactKind),
            body=_decode_body(d, body, "payload.body."),
        )
    if kind is FragmentKind.OUTPUT:
        d.check_keys(
            obj,
            {"modality", "body", "confidence", "risk_score", "triage_flag", "terminal", "failure"},
            "payload.",
        )
        body = d.object_field(obj, "body", "payload.")
        return OutputPayload(
            modality=d.enum_field(obj, "modality", "payload.", OutputModality),
            body=_decode_body(d, body, "payload.body."),
            confidence=d.num_field(obj, "confidence", "payload.", optional=True),
            risk_score=d.num_field(obj, "risk_score", "payload.", optional=True),
            triage_flag=d.bool_field(obj, "triage_flag", "payload."),
            terminal=d.bool_field(obj, "terminal", "payload."),
            failure=d.bool_field(obj, "failure", "payload."),
        )
    if kind is FragmentKind.OUTCOME:
        d.check_keys(
            obj,
            {"action_taken", "observed_result", "observed_at", "linkage_basis", "linkage_strength"},
            "payload.",
        )
        return OutcomePayload(
            action_taken=d.str_field(obj, "action_taken", "payload."),
            observed_result=d.str_field(obj, "observed_result", "payload.", optional=True),
            observed_at=d.ts_field(obj, "observed_at", "payload."),
            linkage_basis=d.enum_field(obj, "linkage_basis", "payload.", LinkageBasis),
            linkage_strength=d.num_field(obj, "linkage_strength", "payload."),
        )
    d.check_keys(obj, {"rating", "free_text", "rater"}, "payload.")
    rater = d.object_field(obj, "rater", "payload.", optional=True)
    return FeedbackPayload(
        rating=d.int_field(obj, "rating", "payload.", optional=True),
        free_text=d.str_field(obj, "free_text", "payload.", optional=True),
        rater=_decode_principal(d, rater, "payload.rater.") if rater is not None else None,
    )


def header_from_wire(obj: dict) -> Header:
    return _decode_header(_Decoder(), obj, "header.")


def model_from_wire(obj: dict) -> ModelInstance:
    return _decode_model(_Decoder(), obj, "model.")


def user_from_wire(obj: dict) -> UserIdentity:
    return _decode_user(_Decoder(), obj, "user.")


def target_from_wire(obj: dict) -> TargetIdentity:
    return _decode_target(_Decoder(), obj, "target.")


def user_to_wire(u: UserIdentity) -> dict[str, Any]:
    return {"chain": [principal_to_wire(p) for p in u.chain]}


def target_to_wire(t: TargetIdentity) -> dict[str, Any]:
    return {"kind": t.kind.value, "id": t.id, "id_system": t.id_system}


def envelope_from_wire(obj: Any) -> FragmentEnvelope:
    """Decode a parsed JSON object into an envelope.

    Raises EnvelopeDecodeError for structural problems (missing/unknown
    fields, wrong JSON types, unknown enum values, malformed timestamps).
    Semantic invariants are left to validate_fragment.
    """
    d = _Decoder()
    if not isinstance(obj, dict):
        d.fail("envelope", "must be a JSON object")
        raise EnvelopeDecodeError(d.violations)
    d.check_keys(
        obj,
        {"spec_version", "event_id", "fragment_id", "fragment_kind", "sequence", "emitted_at", "payload"},
        "",
    )
    kind = d.enum_field(obj, "fragment_kind", "", FragmentKind)
    payload_obj = d.object_field(obj, "payload", "")
    return FragmentEnvelope(
        spec_version=d.str_field(obj, "spec_version", ""),
        event_id=d.str_field(obj, "event_id", ""),
        fragment_id=d.str_field(obj, "fragment_id", ""),
        fragment_kind=kind,
        sequence=d.int_field(obj, "sequence", ""),
        emitted_at=d.ts_field(obj, "emitted_at", ""),
        payload=_decode_payload(d, kind, payload_obj),
    )


# ---------------------------------------------------------------------------
# Record-level operations


def conformance_level(rec: MedLogRecord) -> ConformanceProfile:
    """Classify field completeness: minimal = header + model + >=1 output."""
    has = {
        "header": rec.header is not None,
        "model": rec.model is not None,
        "user": rec.user is not None,
        "target": rec.target is not None,
        "inputs": rec.inputs is not None,
        "artifacts": len(rec.artifacts) > 0,
        "outputs": len(rec.outputs) > 0,
        "outcomes": len(rec.outcomes) > 0,
        "feedback": len(rec.feedback) > 0,
    }
    if all(has.values()):
        return ConformanceProfile.FULL
    if not (has["header"] and has["model"] and has["outputs"]):
        return ConformanceProfile.NONCONFORMANT
    if has["user"] and has["inputs"]:
        return ConformanceProfile.STANDARD
    return ConformanceProfile.MINIMAL


def digest_sort_key(env: FragmentEnvelope) -> tuple[int, int, str]:
    return (KIND_ORDER[env.fragment_kind], env.sequence, env.fragment_id)


def record_digest(rec: MedLogRecord) -> bytes:
    """SHA-256 over length-prefixed canonical fragment bytes, digest-sorted.

    Sorting by (fragment_kind, sequence, fragment_id) makes the digest
    invariant under any fragment arrival order.
    """
    h = hashlib.sha256()
    for env in sorted(rec.fragments, key=digest_sort_key):
        data = canonicalize(env)
        h.update(len(data).to_bytes(8, "big"))
        h.update(data)
    return h.digest()


def record_digest_hex(rec: MedLogRecord) -> str:
    return record_digest(rec).hex()


def _entry_to_wire(entry: RecordEntry) -> dict[str, Any]:
    wire = payload_to_wire(entry.payload)
    wire["sequence"] = entry.sequence
    wire["fragment_id"] = entry.fragment_id
    wire["emitted_at"] = format_rfc3339(entry.emitted_at)
    return wire


def record_to_wire(rec: MedLogRecord) -> dict[str, Any]:
    """Plain-JSON form of an assembled record (for read APIs and reports)."""
    wire: dict[str, Any] = {"event_id": rec.event_id, "status": rec.status.value}
    if rec.header is not None:
        wire["header"] = header_to_wire(rec.header)
    if rec.model is not None:
        wire["model"] = model_to_wire(rec.model)
    if rec.user is not None:
        wire["user"] = user_to_wire(rec.user)
    if rec.target is not None:
        wire["target"] = target_to_wire(rec.target)
    if rec.inputs is not None:
        wire["inputs"] = inputs_to_wire(rec.inputs)
    wire["artifacts"] = [_entry_to_wire(e) for e in rec.artifacts]
    wire["outputs"] = [_entry_to_wire(e) for e in rec.outputs]
    wire["outcomes"] = [_entry_to_wire(e) for e in rec.outcomes]
    wire["feedback"] = [_entry_to_wire(e) for e in rec.feedback]
    return wire


def stub_inline_content(env: FragmentEnvelope) -> FragmentEnvelope:
    """Replace an inline input/output body with its content-address stub.

    Used by retention compaction and summary-only capture. The stub keeps
    the digest and size of the removed bytes so the record remains
    verifiable without holding the content.
    """
    payload = env.payload
    if isinstance(payload, StartPayload) and payload.inputs.mode is InputMode.INLINE:
        inputs = payload.inputs
        data = inline_bytes(inputs.content)
        new_inputs = replace(
            inputs,
            mode=InputMode.REFERENCE,
            content=None,
            content_address=ContentAddress.for_bytes(data),
        )
        return replace(env, payload=replace(payload, inputs=new_inputs))
    if isinstance(payload, OutputPayload) and not isinstance(payload.body, ContentAddress):
        data = inline_bytes(payload.body)
        return replace(env, payload=replace(payload, body=ContentAddress.for_bytes(data)))
    return env


def inline_bytes(content: InlineContent) -> bytes:
    """The byte form of inline content: UTF-8 text, or canonical JSON for maps."""
    if isinstance(content, str):
        return content.encode("utf-8")
    return canonical_bytes(content)
