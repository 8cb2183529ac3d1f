/** Minimal JSON-over-HTTP helper with timeouts and bounded retries. */

export class CacheUnavailableError extends Error {
  constructor(message: string, readonly cause?: unknown) {
    super(message);
    this.name = "CacheUnavailableError";
  }
}

export class HttpStatusError extends Error {
  constructor(readonly status: number, readonly body: string) {
    super(`HTTP ${status}: ${body}`);
    this.name = "HttpStatusError";
  }
}

export interface RequestOptions {
  timeoutMs: number;
  retryCount: number;
}

export async function requestJson(
  base: string,
  method: string,
  path: string,
  body: unknown,
  options: RequestOptions,
): Promise<unknown> {
  let lastError: unknown;
  for (let attempt = 0; attempt <= options.retryCount; attempt++) {
    const controller = new AbortController();
    const timer = setTimeout(() => controller.abort(), options.timeoutMs);
    try {
      const response = await fetch(`${base}${path}`, {
        method,
        body: body === undefined ? undefined : JSON.stringify(body),
        headers: body === undefined ? undefined : { "Content-Type": "application/json" },
        signal: controller.signal,
      });
      const text = await response.text();
      if (!response.ok) {
        throw new HttpStatusError(response.status, text);
      }
      return text ? JSON.parse(text) : {};
    } catch (error) {
      if (error instanceof HttpStatusError) {
        throw error; // the server answered; retrying will not change it
      }
      lastError = error;
    } finally {
      clearTimeout(timer);
    }
  }
  throw new CacheUnavailableError(`cache server unreachable at ${base}`, lastError);
}
