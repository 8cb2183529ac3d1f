/**
 * Tool descriptors and trajectory keys, matching the cache server's
 * canonicalization exactly: sorted keys, no insignificant whitespace,
 * shortest round-trip numbers.
 */

export interface ToolDescriptor {
  tool: string;
  args_canonical: string;
  mutates_state: boolean;
}

export interface WireResult {
  payload_b64: string;
  status: "ok" | "tool_error";
  exec_ms: number;
}

export interface ToolResult {
  payload: Buffer;
  status: "ok" | "tool_error";
  execMs: number;
}

const FNV_OFFSET = 0xcbf29ce484222325n;
const FNV_PRIME = 0x100000001b3n;
const MASK64 = 0xffffffffffffffffn;

/** 64-bit FNV-1a over UTF-8 bytes; used for shard routing only. */
export function fnv1a64(data: string | Uint8Array): bigint {
  const bytes = typeof data === "string" ? new TextEncoder().encode(data) : data;
  let hash = FNV_OFFSET;
  for (const byte of bytes) {
    hash ^= BigInt(byte);
    hash = (hash * FNV_PRIME) & MASK64;
  }
  return hash;
}

export function shardForTask(taskId: string, shardCount: number): number {
  return Number(fnv1a64(taskId) % BigInt(shardCount));
}

/**
 * Canonical argument serialization. Mirrors the server's rules: object keys
 * sorted lexicographically, separators without whitespace, numbers in
 * shortest round-trip form (JS and Python 3 both emit shortest-repr doubles).
 */
export function canonicalArgs(args: Record<string, unknown> | null | undefined): string {
  return stableStringify(args ?? {});
}

export function stableStringify(value: unknown): string {
  if (value === null || typeof value === "number" || typeof value === "boolean") {
    return JSON.stringify(value);
  }
  if (typeof value === "string") {
    return JSON.stringify(value);
  }
  if (Array.isArray(value)) {
    return `[${value.map(stableStringify).join(",")}]`;
  }
  if (typeof value === "object") {
    const entries = Object.entries(value as Record<string, unknown>)
      .sort(([a], [b]) => (a < b ? -1 : a > b ? 1 : 0))
      .map(([key, val]) => `${JSON.stringify(key)}:${stableStringify(val)}`);
    return `{${entries.join(",")}}`;
  }
  throw new TypeError(`cannot canonicalize ${typeof value}`);
}

export function makeDescriptor(
  tool: string,
  args: Record<string, unknown> | null,
  mutatesState: boolean,
): ToolDescriptor {
  return { tool, args_canonical: canonicalArgs(args), mutates_state: mutatesState };
}

export function descriptorKey(descriptor: ToolDescriptor): string {
  const suffix = descriptor.mutates_state ? "M" : "P";
  return `${descriptor.tool}${descriptor.args_canonical}${suffix}`;
}

export function filterStateful(steps: readonly ToolDescriptor[]): ToolDescriptor[] {
  return steps.filter((step) => step.mutates_state);
}

export function resultFromWire(wire: WireResult): ToolResult {
  return {
    payload: Buffer.from(wire.payload_b64, "base64"),
    status: wire.status,
    execMs: wire.exec_ms,
  };
}

export function resultToWire(result: ToolResult): WireResult {
  return {
    payload_b64: result.payload.toString("base64"),
    status: result.status,
    exec_ms: result.execMs,
  };
}
