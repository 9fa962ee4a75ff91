"""Deterministic capture decisions: lifecycle-aware sampling and risk upgrades.

Sampling is hash-based rather than RNG-based so any two collectors (or a
replayed audit) reach the same decision for the same event_id. Artifacts
are the only thing sampling ever drops; the start, outputs, outcomes, and
feedback of a sampled-out event are still kept.
"""

from __future__ import annotations

import enum
import fnmatch
import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

from .model import OutputPayload, StartPayload


class PolicyError(ValueError):
    pass


class LifecyclePhase(str, enum.Enum):
    PILOT = "pilot"
    POST_UPDATE = "post_update"
    STEADY_STATE = "steady_state"


class CaptureMode(str, enum.Enum):
    FULL = "full"
    SAMPLED = "sampled"
    SUMMARY_ONLY = "summary_only"


class Decision(str, enum.Enum):
    CAPTURE_FULL = "capture_full"
    CAPTURE_SUMMARY = "capture_summary"
    DROP_ARTIFACTS = "drop_artifacts"


@dataclass(frozen=True)
class PolicyRule:
    rule_id: str
    model_pattern: str
    phase: LifecyclePhase
    mode: CaptureMode
    sample_rate: float = 1.0
    risk_threshold: float | None = None
    flag_upgrades: bool = False


@dataclass(frozen=True)
class CapturePolicy:
    rules: tuple[PolicyRule, ...]
    upgrade_buffer_seconds: float = 60.0

    def __post_init__(self) -> None:
        if not self.rules:
            raise PolicyError("policy needs at least a catch-all rule")
        seen_ids = set()
        for rule in self.rules:
            if not (0.0 <= rule.sample_rate <= 1.0):
                raise PolicyError(f"rule {rule.rule_id!r}: sample_rate out of [0,1]")
            if rule.rule_id in seen_ids:
                raise PolicyError(f"duplicate rule_id {rule.rule_id!r}")
            seen_ids.add(rule.rule_id)
        if not any(rule.model_pattern == "*" for rule in self.rules):
            raise PolicyError('policy must end with a catch-all rule (model_pattern "*")')

    def match(self, model_id: str) -> PolicyRule:
        """First-match-wins; the mandatory catch-all guarantees a hit."""
        for rule in self.rules:
            if fnmatch.fnmatchcase(model_id, rule.model_pattern):
                return rule
        raise PolicyError(f"no rule matches model_id {model_id!r}")


DEFAULT_POLICY = CapturePolicy(
    rules=(
        PolicyRule(
            rule_id="default",
            model_pattern="*",
            phase=LifecyclePhase.STEADY_STATE,
            mode=CaptureMode.FULL,
        ),
    )
)


@dataclass(frozen=True)
class CaptureDecision:
    decision: Decision
    decided_by: str
    deterministic_draw: float
    upgraded: bool = False


def sampling_draw(event_id: str) -> float:
    """First 8 bytes of sha-256(event_id) as an unsigned integer / 2^64."""
    digest = hashlib.sha256(event_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


def capture_decision(start: StartPayload, event_id: str, policy: CapturePolicy) -> CaptureDecision:
    """Pure function of (event_id, matched rule): replay-stable everywhere."""
    rule = policy.match(start.model.model_id)
    draw = sampling_draw(event_id)
    if rule.phase in (LifecyclePhase.PILOT, LifecyclePhase.POST_UPDATE):
        decision = Decision.CAPTURE_FULL
    elif rule.mode is CaptureMode.FULL:
        decision = Decision.CAPTURE_FULL
    elif rule.mode is CaptureMode.SAMPLED:
        decision = Decision.CAPTURE_FULL if draw < rule.sample_rate else Decision.DROP_ARTIFACTS
    else:
        decision = Decision.CAPTURE_SUMMARY
    return CaptureDecision(decision=decision, decided_by=rule.rule_id, deterministic_draw=draw)


def upgrade_on_flag(
    decision: CaptureDecision, output: OutputPayload, rule: PolicyRule
) -> CaptureDecision:
    """Upgrade to full capture when an output is flagged for review.

    Monotone: a capture_full decision is never downgraded. The risk-score
    comparison is inclusive (score >= threshold upgrades).
    """
    if decision.decision is Decision.CAPTURE_FULL:
        return decision
    if not rule.flag_upgrades:
        return decision
    flagged = output.triage_flag or (
        output.risk_score is not None
        and rule.risk_threshold is not None
        and output.risk_score >= rule.risk_threshold
    )
    if not flagged:
        return decision
    return replace(decision, decision=Decision.CAPTURE_FULL, upgraded=True)


# ---------------------------------------------------------------------------
# Policy documents


def parse_policy(obj: dict[str, Any], default_buffer_seconds: float = 60.0) -> CapturePolicy:
    if not isinstance(obj, dict):
        raise PolicyError("policy document must be an object")
    unknown = set(obj) - {"rules", "upgrade_buffer_seconds"}
    if unknown:
        raise PolicyError(f"unknown policy fields: {', '.join(sorted(unknown))}")
    raw_rules = obj.get("rules")
    if not isinstance(raw_rules, list) or not raw_rules:
        raise PolicyError("policy must carry a non-empty rules list")
    rules = []
    for i, raw in enumerate(raw_rules):
        if not isinstance(raw, dict):
            raise PolicyError(f"rules[{i}] must be an object")
        unknown = set(raw) - {
            "rule_id",
            "model_pattern",
            "phase",
            "mode",
            "sample_rate",
            "risk_threshold",
            "flag_upgrades",
        }
        if unknown:
            raise PolicyError(f"rules[{i}]: unknown fields: {', '.join(sorted(unknown))}")
        try:
            rules.append(
                PolicyRule(
                    rule_id=str(raw.get("rule_id", f"rule-{i}")),
                    model_pattern=raw["model_pattern"],
                    phase=LifecyclePhase(raw["phase"]),
                    mode=CaptureMode(raw["mode"]),
                    sample_rate=float(raw.get("sample_rate", 1.0)),
                    risk_threshold=(
                        float(raw["risk_threshold"]) if raw.get("risk_threshold") is not None else None
                    ),
                    flag_upgrades=bool(raw.get("flag_upgrades", False)),
                )
            )
        except (KeyError, ValueError) as exc:
            raise PolicyError(f"rules[{i}]: {exc}") from exc
    buffer_seconds = obj.get("upgrade_buffer_seconds", default_buffer_seconds)
    try:
        buffer_seconds = float(buffer_seconds)
    except (TypeError, ValueError):
        raise PolicyError("upgrade_buffer_seconds must be a number") from None
    return CapturePolicy(rules=tuple(rules), upgrade_buffer_seconds=buffer_seconds)


def load_policy(path: str | Path, default_buffer_seconds: float = 60.0) -> CapturePolicy:
    try:
        with open(path) as f:
            obj = json.load(f)
    except OSError as exc:
        raise PolicyError(f"cannot read policy file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise PolicyError(f"policy file is not valid JSON: {exc}") from exc
    return parse_policy(obj, default_buffer_seconds=default_buffer_seconds)
