"""Capture policy: deterministic sampling, rule matching, flag upgrades."""

from __future__ import annotations

import hashlib

import pytest

from medlog.policy import (
    CaptureDecision,
    CaptureMode,
    CapturePolicy,
    Decision,
    LifecyclePhase,
    PolicyError,
    PolicyRule,
    capture_decision,
    parse_policy,
    sampling_draw,
    upgrade_on_flag,
)

from .conftest import make_output, make_start

# Derived independently: int.from_bytes(sha256(b"evt-0001")[:8], "big") / 2**64
DRAW_EVT_0001 = 0.4448105463144476


def rule(**kw) -> PolicyRule:
    defaults = dict(
        rule_id="r",
        model_pattern="*",
        phase=LifecyclePhase.STEADY_STATE,
        mode=CaptureMode.SAMPLED,
        sample_rate=0.5,
    )
    defaults.update(kw)
    return PolicyRule(**defaults)


def policy_with(*rules: PolicyRule) -> CapturePolicy:
    return CapturePolicy(rules=tuple(rules))


def start_payload(model_id="hosp-risk"):
    from .conftest import make_model

    return make_start(model=make_model(model_id=model_id)).payload


def test_draw_fixture_pinned():
    assert sampling_draw("evt-0001") == pytest.approx(DRAW_EVT_0001, abs=0)
    # Re-derive with an independent hash call.
    expected = int.from_bytes(hashlib.sha256(b"evt-0001").digest()[:8], "big") / 2**64
    assert sampling_draw("evt-0001") == expected


def test_rate_one_always_captures():
    p = policy_with(rule(sample_rate=1.0))
    for i in range(100):
        d = capture_decision(start_payload(), f"evt-{i}", p)
        assert d.decision is Decision.CAPTURE_FULL


def test_rate_zero_always_drops():
    p = policy_with(rule(sample_rate=0.0))
    for i in range(100):
        d = capture_decision(start_payload(), f"evt-{i}", p)
        assert d.decision is Decision.DROP_ARTIFACTS


def test_fixture_event_decision():
    p = policy_with(rule(sample_rate=0.5))
    d = capture_decision(start_payload(), "evt-0001", p)
    assert d.deterministic_draw == pytest.approx(DRAW_EVT_0001, abs=0)
    assert d.decision is Decision.CAPTURE_FULL  # 0.4448... < 0.5
    tighter = policy_with(rule(sample_rate=0.4))
    assert capture_decision(start_payload(), "evt-0001", tighter).decision is Decision.DROP_ARTIFACTS


def test_pilot_phase_overrides_sampling():
    p = policy_with(rule(phase=LifecyclePhase.PILOT, sample_rate=0.0))
    d = capture_decision(start_payload(), "evt-0001", p)
    assert d.decision is Decision.CAPTURE_FULL
    p2 = policy_with(rule(phase=LifecyclePhase.POST_UPDATE, sample_rate=0.0))
    assert capture_decision(start_payload(), "evt-0001", p2).decision is Decision.CAPTURE_FULL


def test_summary_only_mode():
    p = policy_with(rule(mode=CaptureMode.SUMMARY_ONLY))
    d = capture_decision(start_payload(), "evt-0001", p)
    assert d.decision is Decision.CAPTURE_SUMMARY


def test_first_match_wins():
    p = policy_with(
        rule(rule_id="llm", model_pattern="llm-*", mode=CaptureMode.FULL),
        rule(rule_id="fallback", model_pattern="*", sample_rate=0.0),
    )
    d = capture_decision(start_payload(model_id="llm-scribe"), "e", p)
    assert d.decided_by == "llm"
    assert d.decision is Decision.CAPTURE_FULL
    d2 = capture_decision(start_payload(model_id="other"), "e", p)
    assert d2.decided_by == "fallback"


def test_catch_all_required():
    with pytest.raises(PolicyError):
        policy_with(rule(model_pattern="llm-*"))


def test_sample_rate_bounds_enforced():
    with pytest.raises(PolicyError):
        policy_with(rule(sample_rate=1.5))


def test_decisions_replay_stable():
    p = policy_with(rule(sample_rate=0.37))
    first = [capture_decision(start_payload(), f"evt-{i}", p) for i in range(500)]
    second = [capture_decision(start_payload(), f"evt-{i}", p) for i in range(500)]
    assert first == second


@pytest.mark.parametrize("rate", [0.1, 0.5, 0.9])
def test_capture_fraction_near_rate(rate):
    p = policy_with(rule(sample_rate=rate))
    n = 100_000
    captured = sum(
        1
        for i in range(n)
        if capture_decision(start_payload(), f"evt-{i:06d}", p).decision is Decision.CAPTURE_FULL
    )
    assert abs(captured / n - rate) < 0.01


# -- upgrades -------------------------------------------------------------------


def dropped() -> CaptureDecision:
    return CaptureDecision(Decision.DROP_ARTIFACTS, "r", 0.9)


def test_triage_flag_upgrades():
    r = rule(flag_upgrades=True)
    out = make_output(triage_flag=True).payload
    d = upgrade_on_flag(dropped(), out, r)
    assert d.decision is Decision.CAPTURE_FULL and d.upgraded


def test_plain_output_does_not_upgrade():
    r = rule(flag_upgrades=True, risk_threshold=0.9)
    out = make_output().payload
    assert upgrade_on_flag(dropped(), out, r) == dropped()


def test_risk_threshold_boundary_inclusive():
    r = rule(flag_upgrades=True, risk_threshold=0.9)
    at = upgrade_on_flag(dropped(), make_output(risk_score=0.90).payload, r)
    above = upgrade_on_flag(dropped(), make_output(risk_score=0.92).payload, r)
    below = upgrade_on_flag(dropped(), make_output(risk_score=0.89).payload, r)
    assert at.decision is Decision.CAPTURE_FULL
    assert above.decision is Decision.CAPTURE_FULL
    assert below.decision is Decision.DROP_ARTIFACTS


def test_upgrade_requires_flag_upgrades():
    r = rule(flag_upgrades=False)
    out = make_output(triage_flag=True).payload
    assert upgrade_on_flag(dropped(), out, r) == dropped()


def test_upgrade_never_downgrades():
    r = rule(flag_upgrades=True, risk_threshold=0.9)
    full = CaptureDecision(Decision.CAPTURE_FULL, "r", 0.1)
    assert upgrade_on_flag(full, make_output().payload, r) == full


# -- policy documents -------------------------------------------------------------


def test_parse_policy_document():
    p = parse_policy(
        {
            "rules": [
                {
                    "rule_id": "pilot-llm",
                    "model_pattern": "llm-*",
                    "phase": "pilot",
                    "mode": "full",
                },
                {
                    "rule_id": "default",
                    "model_pattern": "*",
                    "phase": "steady_state",
                    "mode": "sampled",
                    "sample_rate": 0.25,
                    "risk_threshold": 0.8,
                    "flag_upgrades": True,
                },
            ],
            "upgrade_buffer_seconds": 30,
        }
    )
    assert p.upgrade_buffer_seconds == 30.0
    assert p.match("llm-scribe").rule_id == "pilot-llm"
    assert p.match("anything").sample_rate == 0.25


@pytest.mark.parametrize(
    "doc",
    [
        {},
        {"rules": []},
        {"rules": [{"model_pattern": "*", "phase": "nope", "mode": "full"}]},
        {"rules": [{"model_pattern": "llm-*", "phase": "pilot", "mode": "full"}]},
        {"rules": [{"model_pattern": "*", "phase": "pilot", "mode": "full"}], "bogus": 1},
    ],
)
def test_parse_policy_rejects_malformed(doc):
    with pytest.raises(PolicyError):
        parse_policy(doc)
