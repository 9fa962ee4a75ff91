"""Record schema: validation, canonicalization goldens, conformance, digests."""

from __future__ import annotations

import hashlib
import json
from dataclasses import replace
from pathlib import Path

import pytest

from medlog.canonical import CanonicalizationError
from medlog.model import (
    ConformanceProfile,
    ContentAddress,
    EnvelopeDecodeError,
    FragmentEnvelope,
    FragmentKind,
    MedLogRecord,
    RecordStatus,
    canonicalize,
    conformance_level,
    envelope_from_wire,
    envelope_to_wire,
    record_digest,
    record_digest_hex,
    stub_inline_content,
    validate_fragment,
)

from .conftest import (
    entry_for,
    make_artifact,
    make_feedback,
    make_header,
    make_inputs,
    make_model,
    make_outcome,
    make_output,
    make_start,
    make_target,
    make_user,
    ts,
)

GOLDEN = Path(__file__).resolve().parent.parent / "fixtures" / "golden"


# -- validation --------------------------------------------------------------


def test_valid_start_passes(start_env):
    assert validate_fragment(start_env).ok


def test_all_five_kinds_validate(full_fragment_set):
    for env in full_fragment_set:
        result = validate_fragment(env)
        assert result.ok, result.violations


def test_linkage_strength_out_of_range():
    env = make_outcome(linkage_strength=1.5)
    result = validate_fragment(env)
    assert not result.ok
    assert any("linkage_strength out of [0,1]" in v.rule for v in result.violations)


def test_payload_kind_mismatch():
    artifact = make_artifact()
    env = replace(artifact, fragment_kind=FragmentKind.OUTPUT)
    result = validate_fragment(env)
    assert any(v.rule == "payload/kind mismatch" for v in result.violations)


def test_unknown_spec_version_rejected(start_env):
    env = replace(start_env, spec_version="medlog/9.9")
    assert not validate_fragment(env).ok


def test_header_spec_version_must_match_envelope(start_env):
    payload = replace(start_env.payload, header=make_header(spec_version="medlog/0.0"))
    assert not validate_fragment(replace(start_env, payload=payload)).ok


def test_parent_event_id_must_differ(start_env):
    payload = replace(start_env.payload, header=make_header(parent_event_id=start_env.event_id))
    result = validate_fragment(replace(start_env, payload=payload))
    assert any("parent_event_id" in v.field for v in result.violations)


@pytest.mark.parametrize("bad_id", ["", "a" * 129, "has space", "tab\tsep", "nl\n"])
def test_id_charset_and_length(bad_id, start_env):
    assert not validate_fragment(replace(start_env, event_id=bad_id)).ok
    assert not validate_fragment(replace(start_env, fragment_id=bad_id)).ok


def test_negative_sequence_rejected(start_env):
    assert not validate_fragment(replace(start_env, sequence=-1)).ok


def test_confidence_bounds():
    assert validate_fragment(make_output(confidence=0.0)).ok
    assert validate_fragment(make_output(confidence=1.0)).ok
    assert not validate_fragment(make_output(confidence=1.01)).ok
    assert not validate_fragment(make_output(confidence=-0.1)).ok


def test_feedback_needs_rating_or_text():
    assert not validate_fragment(make_feedback(rating=None, free_text=None)).ok
    assert validate_fragment(make_feedback(rating=None, free_text="helpful")).ok
    assert not validate_fragment(make_feedback(rating=6)).ok
    assert not validate_fragment(make_feedback(rating=0)).ok


def test_inputs_mode_consistency(start_env):
    from medlog.model import InputMode

    bad = make_inputs(content=None)  # inline mode but no content
    assert not validate_fragment(replace(start_env, payload=replace(start_env.payload, inputs=bad))).ok
    addr = ContentAddress.for_bytes(b"imaging-study")
    ref = make_inputs(mode=InputMode.REFERENCE, content=None, content_address=addr, features=None)
    assert validate_fragment(replace(start_env, payload=replace(start_env.payload, inputs=ref))).ok
    both = make_inputs(content_address=addr)  # inline mode with both populated
    assert not validate_fragment(
        replace(start_env, payload=replace(start_env.payload, inputs=both))
    ).ok


def test_empty_model_fields_rejected(start_env):
    payload = replace(start_env.payload, model=make_model(model_id=""))
    assert not validate_fragment(replace(start_env, payload=payload)).ok


def test_validation_is_pure(start_env):
    first = validate_fragment(start_env)
    second = validate_fragment(start_env)
    assert first == second


# -- canonical goldens --------------------------------------------------------


@pytest.mark.parametrize("name", ["start", "artifact", "output", "outcome", "feedback"])
def test_golden_canonical_bytes(name):
    wire = json.loads((GOLDEN / f"{name}.json").read_text())
    expected = (GOLDEN / f"{name}.canonical").read_bytes()
    env = envelope_from_wire(wire)
    assert canonicalize(env) == expected


def test_golden_round_trip():
    for name in ("start", "artifact", "output", "outcome", "feedback"):
        expected = (GOLDEN / f"{name}.canonical").read_bytes()
        env = envelope_from_wire(json.loads(expected))
        assert canonicalize(env) == expected


def test_canonicalize_field_order_independent(start_env):
    wire = envelope_to_wire(start_env)
    shuffled = json.loads(json.dumps(wire))
    shuffled = dict(reversed(list(shuffled.items())))
    assert canonicalize(envelope_from_wire(shuffled)) == canonicalize(start_env)


def test_canonicalize_differs_on_emitted_at(start_env):
    later = replace(start_env, emitted_at=ts(60))
    assert canonicalize(start_env) != canonicalize(later)


def test_canonicalize_normalizes_offsets(start_env):
    # Same instant with a +02:00 spelling on the wire.
    wire = envelope_to_wire(start_env)
    wire["emitted_at"] = "2024-05-01T14:00:00+02:00"
    assert canonicalize(envelope_from_wire(wire)) == canonicalize(start_env)


def test_canonicalize_rejects_invalid(start_env):
    env = replace(start_env, sequence=-5)
    with pytest.raises(CanonicalizationError):
        canonicalize(env)


def test_decode_rejects_unknown_fields(start_env):
    wire = envelope_to_wire(start_env)
    wire["extra"] = 1
    with pytest.raises(EnvelopeDecodeError):
        envelope_from_wire(wire)


def test_decode_reports_field_names(start_env):
    wire = envelope_to_wire(start_env)
    del wire["event_id"]
    with pytest.raises(EnvelopeDecodeError) as err:
        envelope_from_wire(wire)
    assert any(v.field == "event_id" for v in err.value.violations)


# -- conformance ---------------------------------------------------------------


def _record(**kw) -> MedLogRecord:
    return MedLogRecord(event_id="evt-c", **kw)


def test_conformance_minimal():
    rec = _record(header=make_header(), model=make_model(), outputs=(entry_for(make_output()),))
    assert conformance_level(rec) is ConformanceProfile.MINIMAL


def test_conformance_standard():
    rec = _record(
        header=make_header(),
        model=make_model(),
        user=make_user(),
        inputs=make_inputs(),
        outputs=(entry_for(make_output()),),
    )
    assert conformance_level(rec) is ConformanceProfile.STANDARD


def test_conformance_full():
    rec = _record(
        header=make_header(),
        model=make_model(),
        user=make_user(),
        target=make_target(),
        inputs=make_inputs(),
        artifacts=(entry_for(make_artifact()),),
        outputs=(entry_for(make_output()),),
        outcomes=(entry_for(make_outcome()),),
        feedback=(entry_for(make_feedback()),),
    )
    assert conformance_level(rec) is ConformanceProfile.FULL


def test_conformance_header_only_is_nonconformant():
    rec = _record(header=make_header())
    assert conformance_level(rec) is ConformanceProfile.NONCONFORMANT


def test_conformance_order():
    assert (
        ConformanceProfile.NONCONFORMANT
        < ConformanceProfile.MINIMAL
        < ConformanceProfile.STANDARD
        < ConformanceProfile.FULL
    )


# -- record digest --------------------------------------------------------------


def _assembled(fragments) -> MedLogRecord:
    from medlog.assembly import assemble

    records, _ = assemble(fragments)
    assert len(records) == 1
    return next(iter(records.values()))


def test_digest_arrival_order_invariant(full_fragment_set):
    import itertools

    digests = set()
    for perm in itertools.permutations(full_fragment_set):
        digests.add(record_digest(_assembled(perm)))
    assert len(digests) == 1


def test_digest_changes_when_fragment_added(full_fragment_set):
    base = _assembled(full_fragment_set[:3])
    extended = _assembled(full_fragment_set[:4])
    assert record_digest(base) != record_digest(extended)


def test_golden_record_digest():
    wire_names = ("start", "output", "outcome")
    envs = [envelope_from_wire(json.loads((GOLDEN / f"{n}.json").read_text())) for n in wire_names]
    rec = _assembled(envs)
    pinned = (GOLDEN / "record_digest.txt").read_text().strip()
    assert record_digest_hex(rec) == pinned
    # Independent oracle: hash the golden canonical files directly.
    h = hashlib.sha256()
    for name in wire_names:
        data = (GOLDEN / f"{name}.canonical").read_bytes()
        h.update(len(data).to_bytes(8, "big"))
        h.update(data)
    assert h.hexdigest() == pinned


# -- inline stubbing -------------------------------------------------------------


def test_stub_inline_inputs(start_env):
    stubbed = stub_inline_content(start_env)
    inputs = stubbed.payload.inputs
    assert inputs.content is None
    assert inputs.content_address is not None
    assert inputs.content_address.algorithm == "sha-256"
    assert validate_fragment(stubbed).ok
    # Digest matches an independent hash of the canonical content bytes.
    from medlog.canonical import canonical_bytes

    original = start_env.payload.inputs.content
    assert inputs.content_address.digest == hashlib.sha256(canonical_bytes(original)).hexdigest()


def test_stub_output_body():
    env = make_output(body="discharge summary draft")
    stubbed = stub_inline_content(env)
    assert isinstance(stubbed.payload.body, ContentAddress)
    assert stubbed.payload.body.size == len(b"discharge summary draft")
    # Already-referenced bodies are left alone.
    assert stub_inline_content(stubbed) is stubbed


def test_empty_content_address_matches_spec_vector():
    addr = ContentAddress.for_bytes(b"")
    assert addr.digest == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
