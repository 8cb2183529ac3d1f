export {
  CacheClient,
  RolloutSession,
  ToolCallExecutor,
  type ClientConfig,
  type DecisionRecord,
  type ExecutorOptions,
  type MatchMode,
  type PrefixMatchResponse,
  type RolloutReport,
} from "./client.js";
export { CostModel, shouldSnapshot } from "./costmodel.js";
export {
  canonicalArgs,
  descriptorKey,
  filterStateful,
  fnv1a64,
  makeDescriptor,
  resultFromWire,
  resultToWire,
  shardForTask,
  stableStringify,
  type ToolDescriptor,
  type ToolResult,
  type WireResult,
} from "./descriptors.js";
export {
  FileTreeEnvironment,
  LocalSnapshotStore,
  ToolExecutionEnvironment,
  type SandboxHandle,
} from "./env.js";
export { CacheUnavailableError, HttpStatusError } from "./http.js";
