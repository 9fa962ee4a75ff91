/**
 * Durable write-behind spool, file-compatible with the collector tooling.
 *
 * Segment frames are 4-byte big-endian length + canonical envelope bytes +
 * 4-byte big-endian CRC-32C; entry state lives in a state.jsonl sidecar.
 * Enqueued fragments are fsynced before enqueue() returns; sync() delivers
 * pending entries oldest-first and relies on the collector's idempotent
 * ingestion to make re-sends harmless.
 */

import * as fs from "node:fs";
import * as path from "node:path";

import { crc32c } from "./crc32c.js";
import {
  FragmentEnvelope,
  FragmentKind,
  InvalidFragmentError,
  canonicalizeFragment,
  normalizeEnvelope,
  validateFragment,
} from "./model.js";

const MAX_SEGMENT_BYTES = 64 * 1024 * 1024;
const DEFAULT_MAX_ATTEMPTS = 10;

export type EntryState = "pending" | "acked" | "dead";

export interface SpoolEntry {
  position: number;
  eventId: string;
  fragmentId: string;
  kind: FragmentKind;
  state: EntryState;
  attempts: number;
}

export interface SyncReport {
  sent: number;
  acked: number;
  duplicates: number;
  quarantined: number;
  conflicts: number;
  deadLettered: number;
  stillPending: number;
  duration: number;
}

export class SpoolOrderError extends Error {}

export interface IngestAck {
  status: "accepted" | "duplicate" | "quarantined" | "conflict" | "invalid";
  dropped: boolean;
}

export class CollectorUnreachableError extends Error {}
export class TransportError extends Error {}

export interface CollectorClient {
  sendFragment(kind: FragmentKind, body: unknown): Promise<IngestAck>;
}

interface FramePosition {
  file: string;
  offset: number;
}

export class Spool {
  private readonly dir: string;
  private readonly maxAttempts: number;
  private entries: SpoolEntry[] = [];
  private positions: FramePosition[] = [];
  private eventsWithStart = new Set<string>();
  private currentFile!: string;
  private currentSize = 0;
  private segmentIndex = 0;
  private fd!: number;
  private statePath: string;

  constructor(directory: string, maxAttempts = DEFAULT_MAX_ATTEMPTS) {
    this.dir = directory;
    this.maxAttempts = maxAttempts;
    fs.mkdirSync(directory, { recursive: true });
    this.statePath = path.join(directory, "state.jsonl");
    this.recover();
  }

  private segmentPath(index: number): string {
    return path.join(this.dir, `spool-${String(index).padStart(8, "0")}.log`);
  }

  private recover(): void {
    const files = fs
      .readdirSync(this.dir)
      .filter((name) => /^spool-\d{8}\.log$/.test(name))
      .sort();
    for (let i = 0; i < files.length; i++) {
      const file = path.join(this.dir, files[i]);
      const good = this.scanFile(file);
      if (i === files.length - 1) {
        const size = fs.statSync(file).size;
        if (good < size) fs.truncateSync(file, good); // torn tail from a crash
      }
    }
    if (files.length) {
      this.segmentIndex = parseInt(files[files.length - 1].slice(6, 14), 10);
      this.currentFile = path.join(this.dir, files[files.length - 1]);
      this.currentSize = fs.statSync(this.currentFile).size;
    } else {
      this.currentFile = this.segmentPath(0);
      fs.writeFileSync(this.currentFile, Buffer.alloc(0));
    }
    this.fd = fs.openSync(this.currentFile, "a");
    if (fs.existsSync(this.statePath)) {
      for (const line of fs.readFileSync(this.statePath, "utf-8").split("\n")) {
        if (!line.trim()) continue;
        const row = JSON.parse(line) as { p: number; s: EntryState; a?: number };
        const entry = this.entries[row.p];
        if (entry) {
          entry.state = row.s;
          entry.attempts = Math.max(entry.attempts, row.a ?? 0);
        }
      }
    }
  }

  private scanFile(file: string): number {
    const data = fs.readFileSync(file);
    let offset = 0;
    while (offset + 8 <= data.length) {
      const length = data.readUInt32BE(offset);
      const end = offset + 4 + length + 4;
      if (end > data.length) break;
      const payload = data.subarray(offset + 4, offset + 4 + length);
      const trailer = data.readUInt32BE(offset + 4 + length);
      if (crc32c(payload) !== trailer) break;
      this.indexFrame(file, offset, payload);
      offset = end;
    }
    return offset;
  }

  private indexFrame(file: string, offset: number, payload: Buffer): void {
    const env = JSON.parse(payload.toString("utf-8")) as FragmentEnvelope;
    this.positions.push({ file, offset });
    this.entries.push({
      position: this.entries.length,
      eventId: env.event_id,
      fragmentId: env.fragment_id,
      kind: env.fragment_kind,
      state: "pending",
      attempts: 0,
    });
    if (env.fragment_kind === "start") this.eventsWithStart.add(env.event_id);
  }

  /** Validate and persist one fragment; durable before return. */
  enqueue(envelope: FragmentEnvelope, startElsewhere = false): number {
    const env = normalizeEnvelope(envelope);
    const violations = validateFragment(env);
    if (violations.length) throw new InvalidFragmentError(violations);
    if (env.fragment_kind !== "start" && !this.eventsWithStart.has(env.event_id) && !startElsewhere) {
      throw new SpoolOrderError(
        `append for '${env.event_id}' enqueued before its start; ` +
          "pass startElsewhere=true if the start was emitted through another channel",
      );
    }
    const payload = canonicalizeFragment(env);
    const frame = Buffer.alloc(4 + payload.length + 4);
    frame.writeUInt32BE(payload.length, 0);
    payload.copy(frame, 4);
    frame.writeUInt32BE(crc32c(payload), 4 + payload.length);

    if (this.currentSize + frame.length > MAX_SEGMENT_BYTES && this.currentSize > 0) {
      fs.fsyncSync(this.fd);
      fs.closeSync(this.fd);
      this.segmentIndex += 1;
      this.currentFile = this.segmentPath(this.segmentIndex);
      fs.writeFileSync(this.currentFile, Buffer.alloc(0));
      this.fd = fs.openSync(this.currentFile, "a");
      this.currentSize = 0;
    }
    const offset = this.currentSize;
    fs.writeSync(this.fd, frame);
    fs.fsyncSync(this.fd);
    this.currentSize += frame.length;

    const position = this.entries.length;
    this.positions.push({ file: this.currentFile, offset });
    this.entries.push({
      position,
      eventId: env.event_id,
      fragmentId: env.fragment_id,
      kind: env.fragment_kind,
      state: "pending",
      attempts: 0,
    });
    if (env.fragment_kind === "start") this.eventsWithStart.add(env.event_id);
    return position;
  }

  pending(): SpoolEntry[] {
    return this.entries.filter((e) => e.state === "pending");
  }

  envelopeBody(position: number): unknown {
    const { file, offset } = this.positions[position];
    const fd = fs.openSync(file, "r");
    try {
      const head = Buffer.alloc(4);
      fs.readSync(fd, head, 0, 4, offset);
      const length = head.readUInt32BE(0);
      const payload = Buffer.alloc(length);
      fs.readSync(fd, payload, 0, length, offset + 4);
      return JSON.parse(payload.toString("utf-8"));
    } finally {
      fs.closeSync(fd);
    }
  }

  private writeState(entry: SpoolEntry): void {
    fs.appendFileSync(
      this.statePath,
      JSON.stringify({ p: entry.position, s: entry.state, a: entry.attempts }) + "\n",
    );
  }

  /** Deliver pending entries oldest-first; safe with no connectivity. */
  async sync(client: CollectorClient, batchSize = 100, maxPasses = 12): Promise<SyncReport> {
    const report: SyncReport = {
      sent: 0,
      acked: 0,
      duplicates: 0,
      quarantined: 0,
      conflicts: 0,
      deadLettered: 0,
      stillPending: 0,
      duration: 0,
    };
    const started = Date.now();
    for (let pass = 0; pass < maxPasses; pass++) {
      const { advanced, unreachable } = await this.syncPass(client, batchSize, report);
      if (!this.pending().length) break;
      if (!advanced) break; // unreachable or stuck; caller retries later
      if (unreachable) break;
    }
    report.duration = (Date.now() - started) / 1000;
    return report;
  }

  private async syncPass(
    client: CollectorClient,
    batchSize: number,
    report: SyncReport,
  ): Promise<{ advanced: boolean; unreachable: boolean }> {
    let advanced = false;
    const pending = this.pending();
    for (let start = 0; start < pending.length; start += batchSize) {
      for (const entry of pending.slice(start, start + batchSize)) {
        const body = this.envelopeBody(entry.position);
        let ack: IngestAck;
        try {
          ack = await client.sendFragment(entry.kind, body);
        } catch (error) {
          if (error instanceof CollectorUnreachableError) {
            return { advanced, unreachable: true };
          }
          report.sent += 1;
          report.stillPending += 1;
          continue;
        }
        report.sent += 1;
        if (ack.status === "accepted") {
          report.acked += 1;
          entry.state = "acked";
          advanced = true;
        } else if (ack.status === "duplicate") {
          report.duplicates += 1;
          entry.state = "acked";
          advanced = true;
        } else if (ack.status === "quarantined") {
          report.quarantined += 1;
          entry.state = "acked"; // accepted for later reconciliation
          advanced = true;
        } else {
          entry.attempts += 1;
          advanced = true;
          if (entry.attempts >= this.maxAttempts) {
            entry.state = "dead";
            report.deadLettered += 1;
          } else {
            report.conflicts += 1;
          }
        }
        this.writeState(entry);
      }
    }
    return { advanced, unreachable: false };
  }

  close(): void {
    fs.fsyncSync(this.fd);
    fs.closeSync(this.fd);
  }
}
