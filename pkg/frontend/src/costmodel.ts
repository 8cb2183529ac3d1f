/**
 * Per-backend EMAs of serialize/restore cost, mirroring the server-side
 * policy arithmetic: a snapshot is taken only when the call ran strictly
 * longer than the estimated serialize + restore overhead.
 */

export class CostModel {
  private serialize = new Map<string, number>();
  private restore = new Map<string, number>();

  constructor(
    readonly emaAlpha: number = 0.2,
    readonly coldStartMs: number = 1000.0,
  ) {
    if (!(emaAlpha > 0 && emaAlpha <= 1)) {
      throw new RangeError("emaAlpha must be in (0, 1]");
    }
  }

  overheadMs(backendKind: string): number {
    return (
      (this.serialize.get(backendKind) ?? this.coldStartMs) +
      (this.restore.get(backendKind) ?? this.coldStartMs)
    );
  }

  observeSerialize(backendKind: string, ms: number): void {
    const prev = this.serialize.get(backendKind) ?? this.coldStartMs;
    this.serialize.set(backendKind, (1 - this.emaAlpha) * prev + this.emaAlpha * ms);
  }

  observeRestore(backendKind: string, ms: number): void {
    const prev = this.restore.get(backendKind) ?? this.coldStartMs;
    this.restore.set(backendKind, (1 - this.emaAlpha) * prev + this.emaAlpha * ms);
  }
}

export function shouldSnapshot(execMs: number, model: CostModel, backendKind: string): boolean {
  return execMs > model.overheadMs(backendKind);
}
