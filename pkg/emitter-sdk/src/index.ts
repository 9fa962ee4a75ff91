export {
  CanonicalizationError,
  canonicalBytes,
  canonicalJson,
  compareCodePoints,
  formatRfc3339,
} from "./canonical.js";
export { crc32c } from "./crc32c.js";
export {
  SPEC_VERSION,
  InvalidFragmentError,
  canonicalizeFragment,
  normalizeEnvelope,
  validateFragment,
} from "./model.js";
export type {
  ArtifactKind,
  ArtifactPayload,
  Body,
  ContentAddress,
  FeedbackPayload,
  FragmentEnvelope,
  FragmentKind,
  Header,
  Inputs,
  LinkageBasis,
  ModelInstance,
  OutcomePayload,
  OutputModality,
  OutputPayload,
  Payload,
  Principal,
  StartPayload,
  TargetIdentity,
  UserIdentity,
  Violation,
} from "./model.js";
export {
  CollectorUnreachableError,
  Spool,
  SpoolOrderError,
  TransportError,
} from "./spool.js";
export type { CollectorClient, EntryState, IngestAck, SpoolEntry, SyncReport } from "./spool.js";
export { HttpCollectorClient } from "./client.js";
export { EmitterSession, SessionStateError } from "./session.js";
export type { BeginOptions } from "./session.js";
