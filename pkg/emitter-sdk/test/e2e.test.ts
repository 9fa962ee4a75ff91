/**
 * Cross-implementation conformance (acceptance criterion 11): an SDK
 * begin/append/flush session must assemble on a collector to the same
 * record digest as the equivalent session emitted through the primary CLI.
 * Two separate collectors receive the same pinned logical fragments, one
 * per implementation; equal digests mean byte-level protocol agreement.
 */

import { spawn, spawnSync, ChildProcess } from "node:child_process";
import * as fs from "node:fs";
import * as net from "node:net";
import * as os from "node:os";
import * as path from "node:path";
import { fileURLToPath } from "node:url";

import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { HttpCollectorClient } from "../src/client.js";
import { EmitterSession } from "../src/session.js";
import { Spool } from "../src/spool.js";

const HERE = path.dirname(fileURLToPath(import.meta.url));
const REPO = path.join(HERE, "..", "..");
const EVENT_ID = "evt-conformance-1";

function freePort(): Promise<number> {
  return new Promise((resolve, reject) => {
    const server = net.createServer();
    server.listen(0, "127.0.0.1", () => {
      const port = (server.address() as net.AddressInfo).port;
      server.close(() => resolve(port));
    });
    server.on("error", reject);
  });
}

async function waitHealthy(url: string, timeoutMs = 30000): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    try {
      const response = await fetch(`${url}/v1/healthz`);
      if (response.ok) return;
    } catch {
      // not up yet
    }
    await new Promise((r) => setTimeout(r, 100));
  }
  throw new Error(`collector at ${url} did not become healthy`);
}

function startCollector(port: number, dataDir: string): ChildProcess {
  return spawn(
    "python3",
    ["-m", "medlog.cli", "serve", "--listen", `127.0.0.1:${port}`, "--data-dir", dataDir],
    { cwd: REPO, stdio: "ignore" },
  );
}

let tmp: string;
let sdkCollector: ChildProcess;
let cliCollector: ChildProcess;
let sdkUrl: string;
let cliUrl: string;

beforeAll(async () => {
  tmp = fs.mkdtempSync(path.join(os.tmpdir(), "medlog-e2e-"));
  const [sdkPort, cliPort] = [await freePort(), await freePort()];
  sdkUrl = `http://127.0.0.1:${sdkPort}`;
  cliUrl = `http://127.0.0.1:${cliPort}`;
  sdkCollector = startCollector(sdkPort, path.join(tmp, "sdk-data"));
  cliCollector = startCollector(cliPort, path.join(tmp, "cli-data"));
  await waitHealthy(sdkUrl);
  await waitHealthy(cliUrl);
});

afterAll(() => {
  sdkCollector?.kill();
  cliCollector?.kill();
  fs.rmSync(tmp, { recursive: true, force: true });
});

function runPrimaryCliSession(): void {
  const fragmentDir = path.join(tmp, "primary-fragments");
  const build = spawnSync(
    "python3",
    [path.join(HERE, "primary_session.py"), fragmentDir, EVENT_ID],
    { cwd: REPO, encoding: "utf-8" },
  );
  expect(build.status, build.stderr).toBe(0);

  const spoolDir = path.join(tmp, "primary-spool");
  const files = fs.readdirSync(fragmentDir).sort();
  for (const file of files) {
    const kind = file.replace(/^\d+-/, "").replace(/\.json$/, "");
    const emit = spawnSync(
      "python3",
      [
        "-m", "medlog.cli", "emit", kind,
        "--file", path.join(fragmentDir, file),
        "--spool", spoolDir,
        "--offline",
      ],
      { cwd: REPO, encoding: "utf-8" },
    );
    expect(emit.status, emit.stderr + emit.stdout).toBe(0);
  }
  const sync = spawnSync(
    "python3",
    ["-m", "medlog.cli", "sync", "--spool", spoolDir, "--collector", cliUrl],
    { cwd: REPO, encoding: "utf-8" },
  );
  expect(sync.status, sync.stderr + sync.stdout).toBe(0);
}

describe("criterion 11: cross-implementation conformance", () => {
  it("SDK session and primary-CLI session assemble to the same digest", async () => {
    // SDK side: the same pinned logical fragments, built independently.
    const spool = new Spool(path.join(tmp, "sdk-spool"));
    const t0 = new Date("2026-02-01T08:00:00Z");
    const after = (seconds: number) => new Date(t0.getTime() + seconds * 1000);

    const session = EmitterSession.begin(spool, {
      eventId: EVENT_ID,
      serverId: "sdk-e2e",
      emittedAt: t0,
      invokedAt: t0,
      model: {
        model_id: "hosp-risk",
        model_version: "2.4.0",
        model_card_ref: "https://models.example.org/hosp-risk/card",
      },
      user: {
        chain: [
          { kind: "service", id: "triage-batch", id_system: "service-registry" },
          { kind: "human", id: "1093817465", id_system: "NPI" },
        ],
      },
      inputs: {
        mode: "inline",
        media_type: "application/json",
        content: { age: 71, ldh_last_value: 212.5 },
        features: { age: 71, ldh_last_value: 212.5 },
      },
      target: { kind: "patient", id: "MRN-88491", id_system: "MRN" },
    });
    session.addArtifact(
      "reasoning_trace",
      { inline: "weighed LDH trend against age" },
      { emittedAt: after(1) },
    );
    session.addOutput(
      "prediction",
      { inline: { hospitalization_risk: 0.18 } },
      { emittedAt: after(2), confidence: 0.92, terminal: true },
    );
    session.addOutcome("nurse follow-up scheduled", "attestation", 0.8, {
      emittedAt: after(3 * 86400),
      observedAt: after(3 * 86400),
      observedResult: "no hospitalization within 90 days",
    });
    session.addFeedback({
      emittedAt: after(4 * 86400),
      rating: 4,
      freeText: "useful priority call",
      rater: { kind: "human", id: "1093817465", id_system: "NPI" },
    });

    const client = new HttpCollectorClient(sdkUrl);
    const report = await session.flush(client);
    expect(report.acked).toBe(5);
    expect(spool.pending()).toEqual([]);
    spool.close();

    // Primary side: equivalent session through the medlog CLI.
    runPrimaryCliSession();

    const sdkRecord = await client.readRecord(EVENT_ID);
    const cliRecord = await new HttpCollectorClient(cliUrl).readRecord(EVENT_ID);
    expect(sdkRecord).not.toBeNull();
    expect(cliRecord).not.toBeNull();

    expect(sdkRecord!["conformance"]).toBe("full");
    expect(cliRecord!["conformance"]).toBe("full");
    expect((sdkRecord!["record"] as { status: string }).status).toBe("completed");
    expect(sdkRecord!["digest"]).toBe(cliRecord!["digest"]);
    // eslint-disable-next-line no-console
    console.log(
      `criterion 11: PASS  cross-implementation digest ${String(sdkRecord!["digest"]).slice(0, 16)}…`,
    );
  });

  it("SDK-written spool files are readable by the primary tooling", () => {
    // The spool format is portable across client implementations: the
    // collector-side Spool class must replay an SDK-written directory.
    const spoolDir = path.join(tmp, "portable-spool");
    const spool = new Spool(spoolDir);
    const session = EmitterSession.begin(spool, {
      eventId: "evt-portable-1",
      model: { model_id: "hosp-risk", model_version: "2.4.0" },
      user: { chain: [{ kind: "service", id: "mobile-app", id_system: "service-registry" }] },
      inputs: { mode: "inline", media_type: "text/plain", content: "field visit notes" },
    });
    session.addOutput("text", { inline: "escalate to clinic" }, { terminal: true });
    spool.close();

    const probe = spawnSync(
      "python3",
      [
        "-c",
        [
          "import sys, json",
          "from medlog.spool import Spool",
          `s = Spool(${JSON.stringify(spoolDir)})`,
          "print(json.dumps([[e.position, e.event_id, e.kind.value] for e in s.pending()]))",
          "s.close()",
        ].join("\n"),
      ],
      { cwd: REPO, encoding: "utf-8" },
    );
    expect(probe.status, probe.stderr).toBe(0);
    const entries = JSON.parse(probe.stdout.trim()) as Array<[number, string, string]>;
    expect(entries).toEqual([
      [0, "evt-portable-1", "start"],
      [1, "evt-portable-1", "output"],
    ]);
  });

  it("offline begin -> later flush delivers everything", async () => {
    const spool = new Spool(path.join(tmp, "offline-spool"));
    const session = EmitterSession.begin(spool, {
      eventId: "evt-offline-1",
      model: { model_id: "hosp-risk", model_version: "2.4.0" },
      user: { chain: [{ kind: "service", id: "night-batch", id_system: "service-registry" }] },
      inputs: { mode: "inline", media_type: "text/plain", content: "vitals summary" },
    });
    session.addOutput("text", { inline: "stable overnight" }, { terminal: true });
    expect(spool.pending().length).toBe(2); // nothing sent yet

    const report = await session.flush(new HttpCollectorClient(sdkUrl));
    expect(report.acked).toBe(2);
    const record = await new HttpCollectorClient(sdkUrl).readRecord("evt-offline-1");
    expect((record!["record"] as { status: string }).status).toBe("completed");
    spool.close();
  });
});
