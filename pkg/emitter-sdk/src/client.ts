/** HTTP client for a medlog/0.1 collector's write-only ingestion endpoints. */

import {
  CollectorClient,
  CollectorUnreachableError,
  IngestAck,
  TransportError,
} from "./spool.js";
import { FragmentKind } from "./model.js";

export class HttpCollectorClient implements CollectorClient {
  constructor(
    private readonly baseUrl: string,
    private readonly timeoutMs = 10_000,
  ) {}

  async sendFragment(kind: FragmentKind, body: unknown): Promise<IngestAck> {
    let response: Response;
    try {
      response = await fetch(`${this.baseUrl}/v1/fragments/${kind}`, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(body),
        signal: AbortSignal.timeout(this.timeoutMs),
      });
    } catch (error) {
      const cause = (error as { cause?: { code?: string } }).cause;
      if (cause?.code === "ECONNREFUSED" || cause?.code === "ENOTFOUND") {
        throw new CollectorUnreachableError(String(error));
      }
      throw new TransportError(String(error));
    }
    if (response.status >= 500) {
      throw new TransportError(`collector error ${response.status}`);
    }
    let payload: { status?: IngestAck["status"]; dropped?: boolean };
    try {
      payload = (await response.json()) as typeof payload;
    } catch (error) {
      throw new TransportError(`undecodable collector response: ${String(error)}`);
    }
    if (!payload.status) {
      throw new TransportError("collector response carries no status");
    }
    return { status: payload.status, dropped: payload.dropped ?? false };
  }

  async readRecord(eventId: string): Promise<Record<string, unknown> | null> {
    const response = await fetch(`${this.baseUrl}/v1/records/${eventId}`);
    if (response.status === 404) return null;
    if (!response.ok) throw new TransportError(`collector returned ${response.status}`);
    return (await response.json()) as Record<string, unknown>;
  }
}
