import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";

import { afterEach, beforeEach, describe, expect, it } from "vitest";

import { EmitterSession, SessionStateError } from "../src/session.js";
import {
  CollectorClient,
  CollectorUnreachableError,
  IngestAck,
  Spool,
  SpoolOrderError,
} from "../src/spool.js";
import { InvalidFragmentError, FragmentKind } from "../src/model.js";

let dir: string;
let spool: Spool;

beforeEach(() => {
  dir = fs.mkdtempSync(path.join(os.tmpdir(), "emitter-spool-"));
  spool = new Spool(dir);
});

afterEach(() => {
  spool.close();
  fs.rmSync(dir, { recursive: true, force: true });
});

const model = { model_id: "hosp-risk", model_version: "2.4.0" };
const user = { chain: [{ kind: "service" as const, id: "triage-batch", id_system: "service-registry" }] };
const inputs = {
  mode: "inline" as const,
  media_type: "application/json",
  content: { age: 70 },
};

function begin(options: Record<string, unknown> = {}): EmitterSession {
  return EmitterSession.begin(spool, { model, user, inputs, ...options });
}

class RecordingClient implements CollectorClient {
  sent: Array<{ kind: FragmentKind; body: unknown }> = [];

  async sendFragment(kind: FragmentKind, body: unknown): Promise<IngestAck> {
    this.sent.push({ kind, body });
    return { status: "accepted", dropped: false };
  }
}

describe("emitter session lifecycle", () => {
  it("spools the start and appends with increasing sequence", () => {
    const session = begin({ eventId: "evt-1" });
    const a = session.addArtifact("reasoning_trace", { inline: "considered trends" });
    const o = session.addOutput("prediction", { inline: { risk: 0.2 } }, { terminal: true });
    expect(a).toBe(1);
    expect(o).toBe(2);
    const kinds = spool.pending().map((e) => e.kind);
    expect(kinds).toEqual(["start", "artifact", "output"]);
  });

  it("allows outcome and feedback after the terminal output, not artifact/output", () => {
    const session = begin();
    session.addOutput("prediction", { inline: { risk: 0.1 } }, { terminal: true });
    expect(() => session.addArtifact("uncertainty", { inline: "x" })).toThrow(SessionStateError);
    expect(() => session.addOutput("text", { inline: "again" })).toThrow(SessionStateError);
    session.addOutcome("follow-up scheduled", "attestation", 0.9);
    session.addFeedback({ rating: 4 });
    expect(spool.pending().length).toBe(4);
  });

  it("rejects invalid payloads before they reach the spool", () => {
    const session = begin();
    expect(() => session.addOutcome("x", "attestation", 1.5)).toThrow(InvalidFragmentError);
    expect(() => session.addFeedback({})).toThrow(InvalidFragmentError);
    expect(spool.pending().length).toBe(1); // just the start
  });

  it("refuses closed sessions", () => {
    const session = begin();
    session.end();
    expect(() => session.addFeedback({ rating: 3 })).toThrow(SessionStateError);
  });

  it("flush drives the spool to the collector", async () => {
    const session = begin({ eventId: "evt-flush" });
    session.addOutput("prediction", { inline: { risk: 0.3 } }, { terminal: true });
    const client = new RecordingClient();
    const report = await session.flush(client);
    expect(report.acked).toBe(2);
    expect(client.sent.map((s) => s.kind)).toEqual(["start", "output"]);
    expect(spool.pending()).toEqual([]);
  });
});

describe("spool behavior", () => {
  it("enforces start-before-append per event", () => {
    expect(() =>
      spool.enqueue({
        spec_version: "medlog/0.1",
        event_id: "evt-x",
        fragment_id: "evt-x/f",
        fragment_kind: "feedback",
        sequence: 1,
        emitted_at: new Date().toISOString(),
        payload: { rating: 5 },
      }),
    ).toThrow(SpoolOrderError);
  });

  it("recovers entries and state across reopen, truncating torn tails", async () => {
    const session = begin({ eventId: "evt-r" });
    session.addOutput("prediction", { inline: { risk: 0.5 } }, { terminal: true });

    // Ack only the first entry, then simulate a crash with a torn frame.
    let calls = 0;
    const oneShot: CollectorClient = {
      async sendFragment(): Promise<IngestAck> {
        calls += 1;
        if (calls > 1) throw new CollectorUnreachableError("down");
        return { status: "accepted", dropped: false };
      },
    };
    await spool.sync(oneShot);
    spool.close();
    const segment = fs
      .readdirSync(dir)
      .filter((f) => f.endsWith(".log"))
      .sort()
      .pop()!;
    fs.appendFileSync(path.join(dir, segment), Buffer.from([0, 0, 1, 0, 42, 42]));

    const reopened = new Spool(dir);
    expect(reopened.pending().map((e) => e.kind)).toEqual(["output"]);
    reopened.close();
    spool = new Spool(dir); // afterEach closes this one
  });

  it("reports zero progress when the collector is unreachable", async () => {
    begin();
    const down: CollectorClient = {
      async sendFragment(): Promise<IngestAck> {
        throw new CollectorUnreachableError("refused");
      },
    };
    const report = await spool.sync(down);
    expect(report.sent).toBe(0);
    expect(spool.pending().length).toBe(1);
  });

  it("dead-letters conflicts after max attempts", async () => {
    const small = new Spool(fs.mkdtempSync(path.join(os.tmpdir(), "spool-dl-")), 3);
    EmitterSession.begin(small, { model, user, inputs, eventId: "evt-dl" });
    const conflicting: CollectorClient = {
      async sendFragment(): Promise<IngestAck> {
        return { status: "conflict", dropped: false };
      },
    };
    const report = await small.sync(conflicting);
    expect(report.deadLettered).toBe(1);
    expect(report.conflicts).toBe(2);
    expect(small.pending()).toEqual([]);
    small.close();
  });
});
