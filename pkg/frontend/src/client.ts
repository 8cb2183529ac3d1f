/**
 * The training-loop executor: speaks the cache server's wire protocol and
 * drives a ToolExecutionEnvironment.
 *
 * All caching policy lives either on the server (matching, leases, eviction)
 * or in the environment (execution, snapshots); this class is a protocol
 * adapter implementing the rollout-side lookup algorithm: exact get, else
 * longest-prefix match, fork the returned snapshot and replay forward, else
 * execute from a clean sandbox. After its first miss a rollout is diverged:
 * its own sandbox is authoritative and the cache is only written to.
 */

import {
  ToolDescriptor,
  ToolResult,
  WireResult,
  filterStateful,
  resultFromWire,
  shardForTask,
} from "./descriptors.js";
import { CostModel, shouldSnapshot } from "./costmodel.js";
import { LocalSnapshotStore, SandboxHandle, ToolExecutionEnvironment } from "./env.js";
import { CacheUnavailableError, HttpStatusError, requestJson } from "./http.js";

export type MatchMode = "strict" | "stateful_skip";

export interface ClientConfig {
  serverAddresses: string[];
  shardCount?: number;
  timeoutMs?: number;
  retryCount?: number;
  failOpen?: boolean;
}

export interface PrefixMatchResponse {
  matched_len: number;
  node_id: number;
  snapshot_id?: string;
  snapshot_node_id?: number;
  snapshot_depth?: number;
  lease_id?: string;
}

export interface DecisionRecord {
  action: "hit" | "fork_replay" | "fresh" | "direct";
  matched_len: number | null;
  snapshot_depth: number | null;
  executed: number;
  status: string;
  result_b64: string;
}

/** Thin typed wrapper over the cache endpoints with client-side sharding. */
export class CacheClient {
  private readonly bases: string[];
  readonly shardCount: number;
  private readonly options: { timeoutMs: number; retryCount: number };

  constructor(config: ClientConfig) {
    if (config.serverAddresses.length === 0) {
      throw new RangeError("serverAddresses must be non-empty");
    }
    this.bases = config.serverAddresses.map((addr) =>
      addr.startsWith("http") ? addr : `http://${addr}`,
    );
    this.shardCount = config.shardCount ?? this.bases.length;
    if (this.shardCount !== this.bases.length) {
      throw new RangeError("shardCount must equal the number of server addresses");
    }
    this.options = {
      timeoutMs: config.timeoutMs ?? 10_000,
      retryCount: config.retryCount ?? 1,
    };
  }

  baseFor(taskId: string): string {
    return this.bases[shardForTask(taskId, this.shardCount)];
  }

  async get(
    taskId: string,
    trajectory: ToolDescriptor[],
    mode: MatchMode,
  ): Promise<WireResult | null> {
    const body = { task_id: taskId, trajectory, mode };
    const response = (await requestJson(
      this.baseFor(taskId), "POST", "/get", body, this.options,
    )) as { hit: boolean; result?: WireResult };
    return response.hit && response.result ? response.result : null;
  }

  async put(
    taskId: string,
    trajectory: ToolDescriptor[],
    result: WireResult,
    mode: MatchMode,
    snapshot?: { snapshotId: string; sizeBytes: number; backendKind: string },
  ): Promise<number> {
    const body: Record<string, unknown> = {
      task_id: taskId,
      trajectory,
      result,
      mode,
    };
    if (snapshot !== undefined) {
      body.snapshot_id = snapshot.snapshotId;
      body.snapshot_size_bytes = snapshot.sizeBytes;
      body.snapshot_backend_kind = snapshot.backendKind;
    }
    const response = (await requestJson(
      this.baseFor(taskId), "PUT", "/put", body, this.options,
    )) as { node_id: number };
    return response.node_id;
  }

  async prefixMatch(
    taskId: string,
    trajectory: ToolDescriptor[],
    mode: MatchMode,
  ): Promise<PrefixMatchResponse> {
    const body = { task_id: taskId, trajectory, mode };
    return (await requestJson(
      this.baseFor(taskId), "POST", "/prefix_match", body, this.options,
    )) as PrefixMatchResponse;
  }

  /** Release never throws: an expired (410) or unknown (404) lease means the
   * pin is already gone, which is what the caller wanted. */
  async release(taskId: string, leaseId: string): Promise<void> {
    try {
      await requestJson(
        this.baseFor(taskId), "POST", "/release",
        { task_id: taskId, lease_id: leaseId },
        { ...this.options, retryCount: 0 },
      );
    } catch (error) {
      if (!(error instanceof HttpStatusError) && !(error instanceof CacheUnavailableError)) {
        throw error;
      }
    }
  }

  async stats(): Promise<unknown[]> {
    return Promise.all(
      this.bases.map((base) => requestJson(base, "GET", "/stats", undefined, this.options)),
    );
  }
}

export interface ExecutorOptions {
  mode?: MatchMode;
  failOpen?: boolean;
  costModel?: CostModel;
  snapshots?: LocalSnapshotStore;
}

export interface RolloutReport {
  hits: number;
  misses: number;
  executedTools: number;
  replayedTools: number;
}

export class ToolCallExecutor {
  readonly costModel: CostModel;
  readonly snapshots: LocalSnapshotStore;
  readonly failOpen: boolean;
  private readonly mode: MatchMode;

  constructor(
    readonly client: CacheClient,
    readonly env: ToolExecutionEnvironment,
    options: ExecutorOptions = {},
  ) {
    this.mode = options.mode ?? "strict";
    this.failOpen = options.failOpen ?? true;
    this.costModel = options.costModel ?? new CostModel();
    this.snapshots = options.snapshots ?? new LocalSnapshotStore();
  }

  session(taskId: string, mode?: MatchMode): RolloutSession {
    return new RolloutSession(this, taskId, mode ?? this.mode);
  }
}

export class RolloutSession {
  readonly history: ToolDescriptor[] = [];
  sandbox: SandboxHandle | null = null;
  hits = 0;
  misses = 0;
  executedTools = 0;
  replayedTools = 0;
  skippedPuts = 0;
  /** Decision log (one entry per call) for conformance auditing. */
  readonly decisions: DecisionRecord[] = [];
  /** Every lease this session acquired and released, for hygiene audits. */
  readonly leasesMinted: string[] = [];
  readonly leasesReleased: string[] = [];
  private ended = false;

  constructor(
    private readonly executor: ToolCallExecutor,
    readonly taskId: string,
    readonly mode: MatchMode,
  ) {}

  private get env(): ToolExecutionEnvironment {
    return this.executor.env;
  }

  private get client(): CacheClient {
    return this.executor.client;
  }

  async call(descriptor: ToolDescriptor): Promise<ToolResult> {
    if (this.ended) {
      throw new Error("session already ended");
    }
    const q = [...this.history, descriptor];
    let result: ToolResult;
    let record: DecisionRecord;

    if (this.sandbox !== null) {
      // Diverged: execute directly; publish but never consult.
      this.misses += 1;
      result = await this.executeStep(descriptor, q, false);
      record = this.decision("direct", null, null, 1, result);
    } else {
      try {
        [result, record] = await this.cachedCall(descriptor, q);
      } catch (error) {
        if (!(error instanceof CacheUnavailableError) || !this.executor.failOpen) {
          throw error;
        }
        let executed: number;
        [result, executed] = await this.failOpenCall(q);
        record = this.decision("fresh", null, null, executed, result);
      }
    }
    this.decisions.push(record);
    this.history.push(descriptor);
    return result;
  }

  private async cachedCall(
    descriptor: ToolDescriptor,
    q: ToolDescriptor[],
  ): Promise<[ToolResult, DecisionRecord]> {
    let cached: WireResult | null;
    try {
      cached = await this.client.get(this.taskId, q, this.mode);
    } catch (error) {
      this.misses += 1;
      throw error;
    }
    if (cached !== null) {
      this.hits += 1;
      const result = resultFromWire(cached);
      return [result, this.decision("hit", null, null, 0, result)];
    }
    this.misses += 1;

    const match = await this.client.prefixMatch(this.taskId, q, this.mode);
    const steps =
      this.mode === "stateful_skip"
        ? descriptor.mutates_state
          ? filterStateful(q)
          : [...filterStateful(q), descriptor]
        : q;

    let replayFrom = 0;
    let action: DecisionRecord["action"] = "fresh";
    let snapshotDepth: number | null = null;
    if (match.lease_id !== undefined && match.snapshot_id !== undefined) {
      const blob = this.snapshots.load(match.snapshot_id);
      this.leasesMinted.push(match.lease_id);
      try {
        if (blob !== undefined) {
          const start = performance.now();
          this.sandbox = this.env.restore(blob);
          this.executor.costModel.observeRestore(
            this.env.backendKind, performance.now() - start,
          );
          replayFrom = match.snapshot_depth ?? 0;
          snapshotDepth = replayFrom;
          action = "fork_replay";
        }
      } finally {
        this.leasesReleased.push(match.lease_id);
        await this.client.release(this.taskId, match.lease_id);
      }
    }
    if (this.sandbox === null) {
      // No usable snapshot anywhere in the matched prefix: clean sandbox,
      // execute the full sequence.
      this.sandbox = this.env.start();
      replayFrom = 0;
    }

    let result: ToolResult | null = null;
    let executed = 0;
    for (let idx = replayFrom; idx < steps.length; idx++) {
      result = await this.executeStep(steps[idx], steps.slice(0, idx + 1), idx < match.matched_len);
      executed += 1;
    }
    if (result === null) {
      throw new Error("replay produced no result");
    }
    return [result, this.decision(action, match.matched_len, snapshotDepth, executed, result)];
  }

  private async failOpenCall(q: ToolDescriptor[]): Promise<[ToolResult, number]> {
    if (this.sandbox === null) {
      this.sandbox = this.env.start();
    }
    const steps =
      this.mode === "stateful_skip"
        ? [...filterStateful(q.slice(0, -1)), q[q.length - 1]]
        : q;
    let result: ToolResult | null = null;
    for (const step of steps) {
      result = this.env.execute(this.sandbox, step);
      this.executedTools += 1;
    }
    if (result === null) {
      throw new Error("empty trajectory");
    }
    return [result, steps.length];
  }

  private async executeStep(
    step: ToolDescriptor,
    trajectory: ToolDescriptor[],
    replayed: boolean,
  ): Promise<ToolResult> {
    if (this.sandbox === null) {
      throw new Error("no sandbox");
    }
    const result = this.env.execute(this.sandbox, step);
    this.executedTools += 1;
    if (replayed) {
      this.replayedTools += 1;
    }
    let snapshot: { snapshotId: string; sizeBytes: number; backendKind: string } | undefined;
    const policyApplies = !(this.mode === "stateful_skip" && !step.mutates_state);
    if (policyApplies && shouldSnapshot(result.execMs, this.executor.costModel, this.env.backendKind)) {
      const start = performance.now();
      const blob = this.env.snapshot(this.sandbox);
      this.executor.costModel.observeSerialize(this.env.backendKind, performance.now() - start);
      snapshot = {
        snapshotId: this.snapshots.store(blob),
        sizeBytes: blob.length,
        backendKind: this.env.backendKind,
      };
    }
    try {
      await this.client.put(
        this.taskId,
        trajectory,
        { payload_b64: result.payload.toString("base64"), status: result.status, exec_ms: result.execMs },
        this.mode,
        snapshot,
      );
    } catch (error) {
      if (error instanceof CacheUnavailableError || error instanceof HttpStatusError) {
        this.skippedPuts += 1; // losing an insert loses reuse, not correctness
      } else {
        throw error;
      }
    }
    return result;
  }

  private get snapshots(): LocalSnapshotStore {
    return this.executor.snapshots;
  }

  private decision(
    action: DecisionRecord["action"],
    matchedLen: number | null,
    snapshotDepth: number | null,
    executed: number,
    result: ToolResult,
  ): DecisionRecord {
    return {
      action,
      matched_len: matchedLen,
      snapshot_depth: snapshotDepth,
      executed,
      status: result.status,
      result_b64: result.payload.toString("base64"),
    };
  }

  end(): RolloutReport {
    if (!this.ended) {
      this.ended = true;
      if (this.sandbox !== null) {
        this.env.stop(this.sandbox);
        this.sandbox = null;
      }
    }
    return {
      hits: this.hits,
      misses: this.misses,
      executedTools: this.executedTools,
      replayedTools: this.replayedTools,
    };
  }
}
