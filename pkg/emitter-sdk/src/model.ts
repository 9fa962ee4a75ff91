/**
 * Wire-shaped fragment types and client-side validation.
 *
 * Envelopes are built directly in wire form; validation mirrors the
 * collector's rules so bad fragments are caught before they are spooled.
 */

import { canonicalBytes, formatRfc3339 } from "./canonical.js";

export const SPEC_VERSION = "medlog/0.1";

export type FragmentKind = "start" | "artifact" | "output" | "outcome" | "feedback";
export type PrincipalKind = "human" | "service" | "agent" | "scheduled_job";
export type TargetKind = "patient" | "claim" | "encounter" | "other";
export type ArtifactKind =
  | "reasoning_trace"
  | "retrieval_context"
  | "agent_trace"
  | "uncertainty"
  | "interpretability"
  | "model_state_snapshot";
export type OutputModality = "prediction" | "text" | "image_ref" | "recommendation" | "explanation";
export type LinkageBasis = "attestation" | "temporal_proximity" | "automated_query" | "trial_emulation";

export interface ContentAddress {
  algorithm: "sha-256";
  digest: string;
  size: number;
}

export type Body = { inline: string | Record<string, unknown> } | { content_address: ContentAddress };

export interface Header {
  server_id: string;
  invoked_at: string;
  spec_version: string;
  input_retrieved_at?: string;
  run_id?: string;
  parent_event_id?: string;
}

export interface ModelInstance {
  model_id: string;
  model_version: string;
  model_card_ref?: string;
  data_sheet_ref?: string;
  training_data_version?: string;
  retrieval_sources?: string[];
  test_time_edits?: string;
}

export interface Principal {
  kind: PrincipalKind;
  id: string;
  id_system: string;
}

export interface UserIdentity {
  chain: Principal[];
}

export interface TargetIdentity {
  kind: TargetKind;
  id: string;
  id_system: string;
}

export interface Inputs {
  mode: "inline" | "reference";
  media_type: string;
  content?: string | Record<string, unknown>;
  content_address?: ContentAddress;
  features?: Record<string, number>;
}

export interface StartPayload {
  header: Header;
  model: ModelInstance;
  user: UserIdentity;
  inputs: Inputs;
  target?: TargetIdentity;
}

export interface ArtifactPayload {
  artifact_kind: ArtifactKind;
  body: Body;
}

export interface OutputPayload {
  modality: OutputModality;
  body: Body;
  confidence?: number;
  risk_score?: number;
  triage_flag: boolean;
  terminal: boolean;
  failure: boolean;
}

export interface OutcomePayload {
  action_taken: string;
  observed_at: string;
  linkage_basis: LinkageBasis;
  linkage_strength: number;
  observed_result?: string;
}

export interface FeedbackPayload {
  rating?: number;
  free_text?: string;
  rater?: Principal;
}

export type Payload = StartPayload | ArtifactPayload | OutputPayload | OutcomePayload | FeedbackPayload;

export interface FragmentEnvelope {
  spec_version: string;
  event_id: string;
  fragment_id: string;
  fragment_kind: FragmentKind;
  sequence: number;
  emitted_at: string;
  payload: Payload;
}

export interface Violation {
  field: string;
  rule: string;
}

export class InvalidFragmentError extends Error {
  violations: Violation[];

  constructor(violations: Violation[]) {
    super(violations.map((v) => `${v.field}: ${v.rule}`).join("; "));
    this.violations = violations;
  }
}

const ID_PATTERN = /^[\x21-\x7e]{1,128}$/;
const RFC3339 = /^\d{4}-\d{2}-\d{2}[Tt ]\d{2}:\d{2}:\d{2}(\.\d+)?([Zz]|[+-]\d{2}:\d{2})$/;

function checkTimestamp(value: string | undefined, field: string, out: Violation[], optional = false) {
  if (value === undefined) {
    if (!optional) out.push({ field, rule: "missing required field" });
    return;
  }
  if (!RFC3339.test(value) || Number.isNaN(new Date(value).getTime())) {
    out.push({ field, rule: "must be an RFC 3339 timestamp" });
  }
}

function checkBody(body: Body, field: string, out: Violation[]) {
  const hasInline = "inline" in body;
  const hasAddress = "content_address" in body;
  if (hasInline === hasAddress) {
    out.push({ field, rule: "body must carry exactly one of inline/content_address" });
  }
  if (hasAddress) {
    const address = (body as { content_address: ContentAddress }).content_address;
    if (!/^[0-9a-f]{64}$/.test(address.digest)) {
      out.push({ field: `${field}.digest`, rule: "must be 64 lowercase hex chars" });
    }
  }
}

export function validateFragment(env: FragmentEnvelope): Violation[] {
  const v: Violation[] = [];
  if (env.spec_version !== SPEC_VERSION) {
    v.push({ field: "spec_version", rule: `unrecognized protocol version (expected ${SPEC_VERSION})` });
  }
  if (!ID_PATTERN.test(env.event_id)) {
    v.push({ field: "event_id", rule: "must be 1-128 printable ASCII chars without whitespace" });
  }
  if (!ID_PATTERN.test(env.fragment_id)) {
    v.push({ field: "fragment_id", rule: "must be 1-128 printable ASCII chars without whitespace" });
  }
  if (!Number.isInteger(env.sequence) || env.sequence < 0) {
    v.push({ field: "sequence", rule: "must be a non-negative integer" });
  }
  checkTimestamp(env.emitted_at, "emitted_at", v);

  const payload = env.payload;
  switch (env.fragment_kind) {
    case "start": {
      const p = payload as StartPayload;
      if (p.header.spec_version !== env.spec_version) {
        v.push({ field: "payload.header.spec_version", rule: "must match envelope spec_version" });
      }
      checkTimestamp(p.header.invoked_at, "payload.header.invoked_at", v);
      checkTimestamp(p.header.input_retrieved_at, "payload.header.input_retrieved_at", v, true);
      if (p.header.parent_event_id !== undefined && p.header.parent_event_id === env.event_id) {
        v.push({ field: "payload.header.parent_event_id", rule: "must not equal the record's own event_id" });
      }
      if (!p.model.model_id) v.push({ field: "payload.model.model_id", rule: "must be non-empty" });
      if (!p.model.model_version) v.push({ field: "payload.model.model_version", rule: "must be non-empty" });
      if (!p.user.chain.length) v.push({ field: "payload.user.chain", rule: "provenance chain must be non-empty" });
      p.user.chain.forEach((principal, i) => {
        if (!principal.id) v.push({ field: `payload.user.chain[${i}].id`, rule: "must be non-empty" });
      });
      if (p.target !== undefined && !p.target.id) {
        v.push({ field: "payload.target.id", rule: "must be non-empty when target is present" });
      }
      const inputs = p.inputs;
      if (inputs.mode === "inline") {
        if (inputs.content === undefined || inputs.content_address !== undefined) {
          v.push({ field: "payload.inputs", rule: "inline mode requires content and no content_address" });
        }
      } else if (inputs.mode === "reference") {
        if (inputs.content_address === undefined || inputs.content !== undefined) {
          v.push({ field: "payload.inputs", rule: "reference mode requires content_address and no content" });
        }
      }
      if (inputs.features !== undefined) {
        for (const [name, value] of Object.entries(inputs.features)) {
          if (typeof value !== "number" || !Number.isFinite(value)) {
            v.push({ field: `payload.inputs.features['${name}']`, rule: "must be a finite number" });
          }
        }
      }
      break;
    }
    case "artifact":
      checkBody((payload as ArtifactPayload).body, "payload.body", v);
      break;
    case "output": {
      const p = payload as OutputPayload;
      checkBody(p.body, "payload.body", v);
      if (p.confidence !== undefined && !(p.confidence >= 0 && p.confidence <= 1)) {
        v.push({ field: "payload.confidence", rule: "confidence out of [0,1]" });
      }
      break;
    }
    case "outcome": {
      const p = payload as OutcomePayload;
      if (!(p.linkage_strength >= 0 && p.linkage_strength <= 1)) {
        v.push({ field: "payload.linkage_strength", rule: "linkage_strength out of [0,1]" });
      }
      checkTimestamp(p.observed_at, "payload.observed_at", v);
      break;
    }
    case "feedback": {
      const p = payload as FeedbackPayload;
      if (p.rating === undefined && p.free_text === undefined) {
        v.push({ field: "payload", rule: "at least one of rating/free_text required" });
      }
      if (p.rating !== undefined && !(Number.isInteger(p.rating) && p.rating >= 1 && p.rating <= 5)) {
        v.push({ field: "payload.rating", rule: "rating out of 1-5" });
      }
      break;
    }
  }
  return v;
}

/** Canonical bytes of a validated envelope (timestamps already normalized). */
export function canonicalizeFragment(env: FragmentEnvelope): Buffer {
  const violations = validateFragment(env);
  if (violations.length) throw new InvalidFragmentError(violations);
  return canonicalBytes(env);
}

/** Normalize every timestamp field to the canonical UTC millisecond form. */
export function normalizeEnvelope(env: FragmentEnvelope): FragmentEnvelope {
  const out: FragmentEnvelope = { ...env, emitted_at: formatRfc3339(env.emitted_at) };
  if (env.fragment_kind === "start") {
    const p = env.payload as StartPayload;
    out.payload = {
      ...p,
      header: {
        ...p.header,
        invoked_at: formatRfc3339(p.header.invoked_at),
        ...(p.header.input_retrieved_at !== undefined
          ? { input_retrieved_at: formatRfc3339(p.header.input_retrieved_at) }
          : {}),
      },
    };
  } else if (env.fragment_kind === "outcome") {
    const p = env.payload as OutcomePayload;
    out.payload = { ...p, observed_at: formatRfc3339(p.observed_at) };
  }
  return out;
}
