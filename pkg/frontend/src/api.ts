/**
 * Thin fetch client for the v1 endpoints. All story state lives on the
 * server; this module never caches or rewrites transcript text.
 */

import { SseParser } from "./sse.js";
import type { EndEvent, SamplingParams, TokenEvent, Transcript } from "./types.js";

export class ApiError extends Error {
  readonly code: string;
  readonly status: number;

  constructor(code: string, message: string, status: number) {
    super(message);
    this.name = "ApiError";
    this.code = code;
    this.status = status;
  }
}

async function decodeError(res: Response): Promise<ApiError> {
  try {
    const body = (await res.json()) as { error?: { code?: string; message?: string } };
    if (body.error && body.error.code) {
      return new ApiError(body.error.code, body.error.message ?? "", res.status);
    }
  } catch {
    // non-JSON error body, fall through
  }
  return new ApiError("HTTP_ERROR", `unexpected response (${res.status})`, res.status);
}

export type CreateSessionRequest = {
  context: string;
  future?: string | null;
  distance?: number;
  params?: Partial<SamplingParams>;
};

export type GenerateOptions = {
  maxNewTokens?: number;
  stopAfterSentences?: number;
  signal?: AbortSignal;
};

export class ApiClient {
  readonly base: string;

  constructor(base = "") {
    this.base = base.replace(/\/$/, "");
  }

  async createSession(req: CreateSessionRequest): Promise<string> {
    const out = await this.json<{ id: string }>("/v1/sessions", req);
    return out.id;
  }

  transcript(sid: string): Promise<Transcript> {
    return this.json<Transcript>(`/v1/sessions/${sid}`);
  }

  async swapFuture(sid: string, future: string, distance: number): Promise<number> {
    const out = await this.json<{ ok: boolean; recompute_ms: number }>(
      `/v1/sessions/${sid}/future`, { future, distance }, "PUT");
    return out.recompute_ms;
  }

  async scoreRealization(text: string, future: string): Promise<number> {
    const out = await this.json<{ score: number }>("/v1/score/realization", { text, future });
    return out.score;
  }

  /**
   * Stream tokens from the generate endpoint, invoking onToken as frames
   * arrive. Resolves with the server's end event, or null when the caller
   * aborted the stream; the caller is expected to re-fetch the transcript
   * either way.
   */
  async generate(sid: string, opts: GenerateOptions,
                 onToken: (t: TokenEvent) => void): Promise<EndEvent | null> {
    const body: Record<string, number> = {};
    if (opts.maxNewTokens !== undefined) body["max_new_tokens"] = opts.maxNewTokens;
    if (opts.stopAfterSentences !== undefined) body["stop_after_sentences"] = opts.stopAfterSentences;

    const res = await fetch(`${this.base}/v1/sessions/${sid}/generate`, {
      method: "POST",
      headers: { "content-type": "application/json", accept: "text/event-stream" },
      body: JSON.stringify(body),
      signal: opts.signal,
    });
    if (!res.ok) throw await decodeError(res);
    if (res.body === null) throw new ApiError("HTTP_ERROR", "response has no body", res.status);

    const reader = res.body.getReader();
    const decoder = new TextDecoder();
    const parser = new SseParser();
    let end: EndEvent | null = null;
    try {
      for (;;) {
        const { done, value } = await reader.read();
        const chunk = value === undefined ? "" : decoder.decode(value, { stream: !done });
        for (const frame of parser.push(chunk)) {
          if (frame.event === "token") onToken(JSON.parse(frame.data) as TokenEvent);
          else if (frame.event === "end") end = JSON.parse(frame.data) as EndEvent;
        }
        if (done) break;
      }
    } catch (err) {
      if (isAbort(err)) return null;
      throw err;
    } finally {
      // releases the connection when we stopped reading early
      reader.cancel().catch(() => undefined);
    }
    return end;
  }

  private async json<T>(path: string, payload?: unknown, method?: string): Promise<T> {
    const init: RequestInit = { method: method ?? (payload === undefined ? "GET" : "POST") };
    if (payload !== undefined) {
      init.headers = { "content-type": "application/json" };
      init.body = JSON.stringify(payload);
    }
    const res = await fetch(this.base + path, init);
    if (!res.ok) throw await decodeError(res);
    return (await res.json()) as T;
  }
}

function isAbort(err: unknown): boolean {
  return err instanceof DOMException ? err.name === "AbortError"
    : err instanceof Error && err.name === "AbortError";
}
