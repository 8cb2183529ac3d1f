/**
 * The sandbox contract a training loop implements: start, stop, fork,
 * execute, plus the statefulness annotation and snapshot/restore. Sandboxes
 * (and their snapshot bytes) live on the client side; the cache server only
 * tracks snapshot identifiers.
 */

import { ToolDescriptor, ToolResult } from "./descriptors.js";

export interface SandboxHandle {
  handleId: string;
  backendKind: string;
  alive: boolean;
}

export abstract class ToolExecutionEnvironment {
  abstract readonly backendKind: string;

  abstract start(): SandboxHandle;
  abstract stop(handle: SandboxHandle): void;
  abstract fork(handle: SandboxHandle): SandboxHandle;
  abstract execute(handle: SandboxHandle, descriptor: ToolDescriptor): ToolResult;
  abstract willMutateState(descriptor: ToolDescriptor): boolean;
  abstract snapshot(handle: SandboxHandle): Buffer;
  abstract restore(snapshot: Buffer): SandboxHandle;
}

/** Snapshot bytes held by this process, addressed by the ids the server tracks. */
export class LocalSnapshotStore {
  private blobs = new Map<string, Buffer>();
  private counter = 0;

  store(blob: Buffer): string {
    const id = `local-${++this.counter}-${Math.random().toString(16).slice(2, 10)}`;
    this.blobs.set(id, blob);
    return id;
  }

  load(id: string): Buffer | undefined {
    return this.blobs.get(id);
  }

  drop(id: string): void {
    this.blobs.delete(id);
  }

  get size(): number {
    return this.blobs.size;
  }
}

interface FileTreeCosts {
  [tool: string]: number;
}

/**
 * In-memory file-tree sandbox mirroring the reference backend's observable
 * semantics byte for byte (used by tests and the conformance harness).
 * Execution costs are declared, not measured, so snapshot-policy decisions
 * are reproducible across processes and languages.
 */
export class FileTreeEnvironment extends ToolExecutionEnvironment {
  readonly backendKind = "filetree";
  private states = new Map<string, Map<string, string>>();
  private counter = 0;
  private costs: FileTreeCosts;

  constructor(costs: FileTreeCosts = {}) {
    super();
    this.costs = costs;
  }

  private newHandle(files: Map<string, string>): SandboxHandle {
    const handleId = `ft-${++this.counter}`;
    this.states.set(handleId, files);
    return { handleId, backendKind: this.backendKind, alive: true };
  }

  private filesOf(handle: SandboxHandle): Map<string, string> {
    const files = this.states.get(handle.handleId);
    if (!handle.alive || files === undefined) {
      throw new Error(`sandbox ${handle.handleId} is not alive`);
    }
    return files;
  }

  start(): SandboxHandle {
    return this.newHandle(new Map());
  }

  stop(handle: SandboxHandle): void {
    this.states.delete(handle.handleId);
    handle.alive = false;
  }

  fork(handle: SandboxHandle): SandboxHandle {
    return this.newHandle(new Map(this.filesOf(handle)));
  }

  willMutateState(descriptor: ToolDescriptor): boolean {
    return ["write", "append", "rm"].includes(descriptor.tool);
  }

  execute(handle: SandboxHandle, descriptor: ToolDescriptor): ToolResult {
    const files = this.filesOf(handle);
    const args = JSON.parse(descriptor.args_canonical) as Record<string, unknown>;
    const execMs = this.costs[descriptor.tool] ?? 0;
    const ok = (payload: string): ToolResult => ({
      payload: Buffer.from(payload, "utf-8"),
      status: "ok",
      execMs,
    });
    const toolError = (payload: string): ToolResult => ({
      payload: Buffer.from(payload, "utf-8"),
      status: "tool_error",
      execMs,
    });
    switch (descriptor.tool) {
      case "write":
        files.set(String(args.path), String(args.content ?? ""));
        return ok("");
      case "append":
        files.set(String(args.path), (files.get(String(args.path)) ?? "") + String(args.content ?? ""));
        return ok("");
      case "rm":
        if (files.delete(String(args.path))) {
          return ok("");
        }
        return toolError("no such file");
      case "read": {
        const content = files.get(String(args.path));
        return content === undefined ? toolError("no such file") : ok(content);
      }
      case "ls":
        return ok([...files.keys()].sort().join("\n"));
      case "sleep_ms":
        return ok("");
      default:
        throw new Error(`unknown tool ${descriptor.tool}`);
    }
  }

  snapshot(handle: SandboxHandle): Buffer {
    const files = this.filesOf(handle);
    const entries = [...files.entries()].sort(([a], [b]) => (a < b ? -1 : a > b ? 1 : 0));
    return Buffer.from(JSON.stringify(entries), "utf-8");
  }

  restore(snapshot: Buffer): SandboxHandle {
    const entries = JSON.parse(snapshot.toString("utf-8")) as [string, string][];
    return this.newHandle(new Map(entries));
  }
}
