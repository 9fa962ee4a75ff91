/**
 * Emitter sessions: the start/append lifecycle for one model invocation.
 *
 * begin() builds and spools the start fragment (establishing the event_id),
 * add* methods append with auto-incrementing sequence numbers, and flush()
 * drives spool synchronization to the collector. Outcomes and feedback may
 * arrive any time after a terminal output; artifacts and outputs may not.
 */

import { randomUUID } from "node:crypto";

import { SPEC_VERSION } from "./model.js";
import type {
  ArtifactKind,
  ArtifactPayload,
  Body,
  FeedbackPayload,
  FragmentEnvelope,
  Inputs,
  LinkageBasis,
  ModelInstance,
  OutcomePayload,
  OutputModality,
  OutputPayload,
  Principal,
  TargetIdentity,
  UserIdentity,
} from "./model.js";
import { CollectorClient, Spool, SyncReport } from "./spool.js";

export class SessionStateError extends Error {}

export interface BeginOptions {
  model: ModelInstance;
  user: UserIdentity;
  inputs: Inputs;
  target?: TargetIdentity;
  runId?: string;
  parentEventId?: string;
  serverId?: string;
  eventId?: string;
  invokedAt?: Date | string;
  inputRetrievedAt?: Date | string;
  emittedAt?: Date | string;
  fragmentId?: string;
  startElsewhere?: boolean;
}

interface AppendOptions {
  emittedAt?: Date | string;
  fragmentId?: string;
}

function toIso(at: Date | string | undefined): string {
  return at === undefined ? new Date().toISOString() : new Date(at).toISOString();
}

export class EmitterSession {
  readonly eventId: string;
  private sequence = 0;
  private terminalSeen = false;
  private closed = false;

  private constructor(
    private readonly spool: Spool,
    eventId: string,
  ) {
    this.eventId = eventId;
  }

  /** Build and spool the start fragment; emitted exactly once per session. */
  static begin(spool: Spool, options: BeginOptions): EmitterSession {
    const eventId = options.eventId ?? `evt-${randomUUID()}`;
    const session = new EmitterSession(spool, eventId);
    const envelope: FragmentEnvelope = {
      spec_version: SPEC_VERSION,
      event_id: eventId,
      fragment_id: options.fragmentId ?? `${eventId}/start`,
      fragment_kind: "start",
      sequence: session.sequence,
      emitted_at: toIso(options.emittedAt),
      payload: {
        header: {
          server_id: options.serverId ?? "emitter-sdk",
          invoked_at: toIso(options.invokedAt ?? options.emittedAt),
          spec_version: SPEC_VERSION,
          ...(options.inputRetrievedAt !== undefined
            ? { input_retrieved_at: toIso(options.inputRetrievedAt) }
            : {}),
          ...(options.runId !== undefined ? { run_id: options.runId } : {}),
          ...(options.parentEventId !== undefined ? { parent_event_id: options.parentEventId } : {}),
        },
        model: options.model,
        user: options.user,
        inputs: options.inputs,
        ...(options.target !== undefined ? { target: options.target } : {}),
      },
    };
    spool.enqueue(envelope, options.startElsewhere ?? false);
    session.sequence += 1;
    return session;
  }

  private append(
    kind: FragmentEnvelope["fragment_kind"],
    payload: FragmentEnvelope["payload"],
    options: AppendOptions,
  ): number {
    if (this.closed) throw new SessionStateError("session is closed");
    if (this.terminalSeen && (kind === "artifact" || kind === "output")) {
      throw new SessionStateError(
        `${kind} fragments may not follow the terminal output; only outcomes and feedback may`,
      );
    }
    const sequence = this.sequence;
    const envelope: FragmentEnvelope = {
      spec_version: SPEC_VERSION,
      event_id: this.eventId,
      fragment_id: options.fragmentId ?? `${this.eventId}/${kind}-${sequence}`,
      fragment_kind: kind,
      sequence,
      emitted_at: toIso(options.emittedAt),
      payload,
    };
    this.spool.enqueue(envelope);
    this.sequence += 1;
    return sequence;
  }

  addArtifact(artifactKind: ArtifactKind, body: Body, options: AppendOptions = {}): number {
    const payload: ArtifactPayload = { artifact_kind: artifactKind, body };
    return this.append("artifact", payload, options);
  }

  addOutput(
    modality: OutputModality,
    body: Body,
    options: AppendOptions & {
      confidence?: number;
      riskScore?: number;
      triageFlag?: boolean;
      terminal?: boolean;
      failure?: boolean;
    } = {},
  ): number {
    const payload: OutputPayload = {
      modality,
      body,
      ...(options.confidence !== undefined ? { confidence: options.confidence } : {}),
      ...(options.riskScore !== undefined ? { risk_score: options.riskScore } : {}),
      triage_flag: options.triageFlag ?? false,
      terminal: options.terminal ?? false,
      failure: options.failure ?? false,
    };
    const sequence = this.append("output", payload, options);
    if (payload.terminal) this.terminalSeen = true;
    return sequence;
  }

  addOutcome(
    actionTaken: string,
    linkageBasis: LinkageBasis,
    linkageStrength: number,
    options: AppendOptions & { observedResult?: string; observedAt?: Date | string } = {},
  ): number {
    const payload: OutcomePayload = {
      action_taken: actionTaken,
      observed_at: toIso(options.observedAt ?? options.emittedAt),
      linkage_basis: linkageBasis,
      linkage_strength: linkageStrength,
      ...(options.observedResult !== undefined ? { observed_result: options.observedResult } : {}),
    };
    return this.append("outcome", payload, options);
  }

  addFeedback(
    options: AppendOptions & { rating?: number; freeText?: string; rater?: Principal } = {},
  ): number {
    const payload: FeedbackPayload = {
      ...(options.rating !== undefined ? { rating: options.rating } : {}),
      ...(options.freeText !== undefined ? { free_text: options.freeText } : {}),
      ...(options.rater !== undefined ? { rater: options.rater } : {}),
    };
    return this.append("feedback", payload, options);
  }

  /** Drive spool synchronization; delivers this session's fragments (and any others sharing the spool). */
  async flush(client: CollectorClient): Promise<SyncReport> {
    return this.spool.sync(client);
  }

  end(): void {
    this.closed = true;
  }
}
