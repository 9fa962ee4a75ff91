/**
 * Canonical JSON encoding for the medlog/0.1 wire format.
 *
 * UTF-8, object members sorted by Unicode code point, no insignificant
 * whitespace, shortest round-trip numbers (native JSON.stringify), and UTC
 * timestamps at millisecond precision. These bytes are what the collector
 * hashes for idempotency checks and record digests, so they must match the
 * collector's own canonicalizer byte for byte; the shared golden fixtures
 * under fixtures/golden/ pin that agreement.
 */

export class CanonicalizationError extends Error {}

/** Compare strings by Unicode code point (not UTF-16 code unit) order. */
export function compareCodePoints(a: string, b: string): number {
  const ai = Array.from(a);
  const bi = Array.from(b);
  const n = Math.min(ai.length, bi.length);
  for (let i = 0; i < n; i++) {
    const ca = ai[i].codePointAt(0)!;
    const cb = bi[i].codePointAt(0)!;
    if (ca !== cb) return ca - cb;
  }
  return ai.length - bi.length;
}

export function canonicalJson(value: unknown): string {
  if (value === null || typeof value === "boolean" || typeof value === "string") {
    return JSON.stringify(value);
  }
  if (typeof value === "number") {
    if (!Number.isFinite(value)) {
      throw new CanonicalizationError("NaN and Infinity cannot be encoded");
    }
    return JSON.stringify(value); // ECMAScript shortest form; -0 renders as "0"
  }
  if (Array.isArray(value)) {
    return "[" + value.map(canonicalJson).join(",") + "]";
  }
  if (typeof value === "object") {
    const entries = Object.entries(value as Record<string, unknown>).filter(
      ([, v]) => v !== undefined,
    );
    entries.sort(([a], [b]) => compareCodePoints(a, b));
    const parts = entries.map(([k, v]) => JSON.stringify(k) + ":" + canonicalJson(v));
    return "{" + parts.join(",") + "}";
  }
  throw new CanonicalizationError(`type ${typeof value} has no canonical JSON form`);
}

export function canonicalBytes(value: unknown): Buffer {
  return Buffer.from(canonicalJson(value), "utf-8");
}

/** Normalize a Date or RFC 3339 string to YYYY-MM-DDTHH:MM:SS.mmmZ. */
export function formatRfc3339(at: Date | string): string {
  const date = at instanceof Date ? at : new Date(at);
  if (Number.isNaN(date.getTime())) {
    throw new CanonicalizationError(`not an RFC 3339 timestamp: ${String(at)}`);
  }
  return date.toISOString();
}
