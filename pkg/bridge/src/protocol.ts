/**
 * NDJSON request handling for the scorer bridge.
 *
 * One request object per line, one response line per request, ids
 * echoed back.  A line that cannot be parsed as a request is answered
 * under id -1.  The first successful method must be "hello"; score and
 * generate calls before it are rejected.  Nothing in here may throw on
 * arbitrary input: transports feed untrusted bytes straight through.
 */

import { ScorerError, type TableScorer } from "./scorer.js";

export const PROTOCOL_FORMAT = "streamgate-bridge";
export const PROTOCOL_VERSION = 1;
export const SERVER_NAME = "streamgate-bridge";

export interface BridgeResponse {
  id: number;
  result?: unknown;
  error?: { message: string };
}

/** Request payload failed structural validation. */
class RequestError extends Error {}

function describe(err: unknown): string {
  return err instanceof Error ? err.message : String(err);
}

function intArray(value: unknown, what: string): number[] {
  if (!Array.isArray(value)) {
    throw new RequestError(`${what} must be an array of token ids`);
  }
  for (const item of value) {
    if (typeof item !== "number" || !Number.isSafeInteger(item)) {
      throw new RequestError(`${what} carries a non-integer token id`);
    }
  }
  return value as number[];
}

export class ProtocolSession {
  private helloDone = false;

  constructor(private readonly scorer: TableScorer) {}

  /** Handle one request line and return the response line (no newline). */
  handleLine(line: string): string {
    let response: BridgeResponse;
    try {
      response = this.dispatch(line);
    } catch (err) {
      // last-resort guard: no request may take the server down
      response = { id: -1, error: { message: `internal error: ${describe(err)}` } };
    }
    return JSON.stringify(response);
  }

  private dispatch(line: string): BridgeResponse {
    let parsed: unknown;
    try {
      parsed = JSON.parse(line);
    } catch {
      return { id: -1, error: { message: "cannot parse request line" } };
    }
    if (typeof parsed !== "object" || parsed === null || Array.isArray(parsed)) {
      return { id: -1, error: { message: "request must be a JSON object" } };
    }
    const request = parsed as Record<string, unknown>;
    const id = request.id;
    if (typeof id !== "number" || !Number.isSafeInteger(id)) {
      return { id: -1, error: { message: "request carries no integer id" } };
    }
    const method = request.method;
    if (typeof method !== "string") {
      return { id, error: { message: "request carries no method" } };
    }
    const params =
      typeof request.params === "object" && request.params !== null && !Array.isArray(request.params)
        ? (request.params as Record<string, unknown>)
        : {};
    try {
      return this.invoke(id, method, params);
    } catch (err) {
      if (err instanceof ScorerError || err instanceof RequestError) {
        return { id, error: { message: err.message } };
      }
      return { id, error: { message: `internal error: ${describe(err)}` } };
    }
  }

  private invoke(id: number, method: string, params: Record<string, unknown>): BridgeResponse {
    if (method === "hello") {
      if (params.format !== PROTOCOL_FORMAT || params.version !== PROTOCOL_VERSION) {
        return {
          id,
          error: { message: `expected a ${PROTOCOL_FORMAT} v${PROTOCOL_VERSION} hello` },
        };
      }
      this.helloDone = true;
      return { id, result: { name: SERVER_NAME, version: PROTOCOL_VERSION } };
    }
    if (!this.helloDone) {
      return { id, error: { message: `hello required before ${method}` } };
    }
    if (method === "score") {
      const context = intArray(params.context, "context");
      const continuation = intArray(params.continuation, "continuation");
      const logprobs = this.scorer.scoreContinuation(context, continuation);
      return { id, result: { logprobs } };
    }
    if (method === "generate") {
      const context = intArray(params.context, "context");
      const maxLen = params.max_len;
      if (typeof maxLen !== "number" || !Number.isSafeInteger(maxLen)) {
        throw new RequestError("max_len must be an integer");
      }
      const generated = this.scorer.generateCaption(context, maxLen);
      return { id, result: { tokens: generated.tokens, logprobs: generated.logprobs } };
    }
    return { id, error: { message: `unknown method ${method}` } };
  }
}
