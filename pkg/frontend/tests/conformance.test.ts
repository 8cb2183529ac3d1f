/**
 * Golden-trace conformance: replay the 200 scripted cases against a live
 * cache server and require the exact decision sequence the reference
 * executor recorded, byte for byte. Doubles as the wire-conformance check:
 * every request body the client emits is schema-validated in flight.
 */

import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { spawn, type ChildProcess } from "node:child_process";
import { readFileSync } from "node:fs";
import { fileURLToPath } from "node:url";
import path from "node:path";
import { z } from "zod";

import {
  CacheClient,
  CostModel,
  FileTreeEnvironment,
  LocalSnapshotStore,
  ToolCallExecutor,
  makeDescriptor,
  stableStringify,
  type MatchMode,
  type ToolDescriptor,
} from "../src/index.js";

const HERE = path.dirname(fileURLToPath(import.meta.url));
const PORT = 8610;
const BASE = `127.0.0.1:${PORT}`;

interface GoldenStep {
  tool: string;
  args: Record<string, unknown>;
  mutates_state: boolean;
}

interface GoldenCase {
  case: number;
  task_id: string;
  mode: MatchMode;
  cold_start_ms: number;
  ema_alpha: number;
  costs: Record<string, number>;
  rollouts: GoldenStep[][];
}

const descriptorSchema = z.object({
  tool: z.string().min(1),
  args_canonical: z.string(),
  mutates_state: z.boolean(),
}).strict();

const resultSchema = z.object({
  payload_b64: z.string(),
  status: z.enum(["ok", "tool_error"]),
  exec_ms: z.number().nonnegative(),
}).strict();

const bodySchemas: Record<string, z.ZodTypeAny> = {
  "/get": z.object({
    task_id: z.string().min(1),
    trajectory: z.array(descriptorSchema),
    mode: z.enum(["strict", "stateful_skip"]),
  }).strict(),
  "/prefix_match": z.object({
    task_id: z.string().min(1),
    trajectory: z.array(descriptorSchema),
    mode: z.enum(["strict", "stateful_skip"]),
  }).strict(),
  "/put": z.object({
    task_id: z.string().min(1),
    trajectory: z.array(descriptorSchema).min(1),
    result: resultSchema,
    mode: z.enum(["strict", "stateful_skip"]),
    snapshot_id: z.string().optional(),
    snapshot_size_bytes: z.number().optional(),
    snapshot_backend_kind: z.string().optional(),
  }).strict(),
  "/release": z.object({
    task_id: z.string().min(1),
    lease_id: z.string().min(1),
  }).strict(),
};

let server: ChildProcess;
let wireViolations: string[] = [];

async function healthy(): Promise<boolean> {
  try {
    const response = await fetch(`http://${BASE}/healthz`);
    return response.ok;
  } catch {
    return false;
  }
}

beforeAll(async () => {
  server = spawn("python3", [
    "-m", "tvcache", "serve", "--listen", BASE, "--request-log", "off",
  ], { stdio: "ignore" });
  const deadline = Date.now() + 20_000;
  while (Date.now() < deadline) {
    if (await healthy()) {
      break;
    }
    await new Promise((resolve) => setTimeout(resolve, 100));
  }
  if (!(await healthy())) {
    throw new Error("cache server did not come up");
  }

  // Wrap fetch so every request body the client emits is schema-checked.
  const realFetch = globalThis.fetch;
  globalThis.fetch = (async (input: any, init?: any) => {
    if (init?.body !== undefined) {
      const url = new URL(typeof input === "string" ? input : input.url);
      const schema = bodySchemas[url.pathname];
      if (schema !== undefined) {
        const outcome = schema.safeParse(JSON.parse(init.body));
        if (!outcome.success) {
          wireViolations.push(`${url.pathname}: ${outcome.error.message}`);
        }
      }
    }
    return realFetch(input, init);
  }) as typeof fetch;
}, 30_000);

afterAll(() => {
  server?.kill("SIGTERM");
});

function loadCases(): GoldenCase[] {
  return JSON.parse(
    readFileSync(path.join(HERE, "fixtures", "golden_cases.json"), "utf-8"),
  ) as GoldenCase[];
}

function loadTrace(): string[] {
  return readFileSync(path.join(HERE, "fixtures", "golden_trace.jsonl"), "utf-8")
    .trim()
    .split("\n");
}

describe("golden trace conformance", () => {
  it("reproduces the reference executor's decisions byte for byte", async () => {
    const cases = loadCases();
    const expected = loadTrace();
    const produced: string[] = [];
    let minted = 0;
    let released = 0;

    const client = new CacheClient({ serverAddresses: [BASE] });
    for (const goldenCase of cases) {
      const env = new FileTreeEnvironment(goldenCase.costs);
      const executor = new ToolCallExecutor(client, env, {
        mode: goldenCase.mode,
        costModel: new CostModel(goldenCase.ema_alpha, goldenCase.cold_start_ms),
        snapshots: new LocalSnapshotStore(),
      });
      for (let rolloutIdx = 0; rolloutIdx < goldenCase.rollouts.length; rolloutIdx++) {
        const session = executor.session(goldenCase.task_id);
        const steps = goldenCase.rollouts[rolloutIdx].map((step: GoldenStep) =>
          makeDescriptor(step.tool, step.args, step.mutates_state),
        );
        for (let callIdx = 0; callIdx < steps.length; callIdx++) {
          await session.call(steps[callIdx]);
          const decision = session.decisions[session.decisions.length - 1];
          produced.push(
            stableStringify({
              case: goldenCase.case,
              rollout: rolloutIdx,
              call: callIdx,
              action: decision.action,
              matched_len: decision.matched_len,
              snapshot_depth: decision.snapshot_depth,
              executed: decision.executed,
              status: decision.status,
              result_b64: decision.result_b64,
            }),
          );
        }
        minted += session.leasesMinted.length;
        released += session.leasesReleased.length;
        session.end();
      }
    }

    expect(produced.length).toBe(expected.length);
    for (let i = 0; i < expected.length; i++) {
      expect(produced[i], `trace line ${i}`).toBe(expected[i]);
    }
    // Lease hygiene: one release per acquired lease, and none left live.
    expect(released).toBe(minted);
    expect(minted).toBeGreaterThan(0);
    const stats = (await client.stats())[0] as {
      tasks: Record<string, { live_leases: number }>;
    };
    for (const task of Object.values(stats.tasks)) {
      expect(task.live_leases).toBe(0);
    }
    expect(wireViolations).toEqual([]);
  }, 300_000);
});
