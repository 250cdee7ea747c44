/**
 * Scenario files describe a fully deterministic scripted scorer: exact
 * logprob entries keyed by (context fingerprint, token), an optional
 * clip script for synthetic streams, and a fallback rule for every
 * other token.  The JSON layout is shared with the engine, so the
 * validation here mirrors the engine's loader rule for rule.
 */

import { readFileSync } from "node:fs";

export const SCENARIO_FORMAT = "streamgate-scenario";
export const MAX_FRAME_INDEX = 1 << 21;

export interface ScorerConfig {
  vocabSize: number;
  eosToken: number;
  maxGenerationLen: number;
  contextLimit: number | null;
}

export interface ClipScript {
  frameMarkerBase: number;
  frameIndexBase: number;
  captionBase: number;
  captionLen: number;
  tokensPerFrame: number;
  numClips: number;
  lpIn: number[];
  lpOut: number[];
  jitterAmp: number;
}

export type FallbackRule =
  | { mode: "uniform"; lp: number }
  | { mode: "hash"; lpMin: number; lpMax: number };

export interface Scenario {
  config: ScorerConfig;
  /** Exact logprobs keyed by `${fingerprint}:${token}`. */
  entries: Map<string, number>;
  /** [token, logprob] candidates per fingerprint, sorted by token id. */
  byFingerprint: Map<string, Array<[number, number]>>;
  clipScript: ClipScript | null;
  fallback: FallbackRule;
}

/** Logprob of a uniform draw over the whole vocabulary. */
export function uniformForVocab(vocabSize: number): number {
  return Math.log(1.0 / vocabSize);
}

function asInt(value: unknown, what: string): number {
  if (typeof value !== "number" || !Number.isInteger(value)) {
    throw new Error(`${what} must be an integer, got ${JSON.stringify(value)}`);
  }
  return value;
}

function asLogprob(value: unknown, what: string): number {
  if (typeof value !== "number" || !Number.isFinite(value) || value > 0.0) {
    throw new Error(`${what} ${JSON.stringify(value)} is not finite non-positive`);
  }
  return value;
}

function readConfig(payload: Record<string, unknown>): ScorerConfig {
  const vocabSize = asInt(payload.vocab_size, "vocab_size");
  if (vocabSize < 2) {
    throw new Error(`vocab_size must be at least 2, got ${vocabSize}`);
  }
  const eosToken = asInt(payload.eos_token, "eos_token");
  if (eosToken < 0 || eosToken >= vocabSize) {
    throw new Error(`eos_token ${eosToken} outside vocabulary`);
  }
  const maxGenerationLen =
    payload.max_generation_len === undefined ? 64 : asInt(payload.max_generation_len, "max_generation_len");
  if (maxGenerationLen < 0) {
    throw new Error("max_generation_len must be non-negative");
  }
  const contextLimit =
    payload.context_limit === undefined || payload.context_limit === null
      ? null
      : asInt(payload.context_limit, "context_limit");
  return { vocabSize, eosToken, maxGenerationLen, contextLimit };
}

function readClipScript(spec: Record<string, unknown>): ClipScript {
  const script: ClipScript = {
    frameMarkerBase: asInt(spec.frame_marker_base, "frame_marker_base"),
    frameIndexBase: asInt(spec.frame_index_base, "frame_index_base"),
    captionBase: asInt(spec.caption_base, "caption_base"),
    captionLen: asInt(spec.caption_len, "caption_len"),
    tokensPerFrame: asInt(spec.tokens_per_frame, "tokens_per_frame"),
    numClips: asInt(spec.num_clips, "num_clips"),
    lpIn: readLogprobList(spec.lp_in, "lp_in"),
    lpOut: readLogprobList(spec.lp_out, "lp_out"),
    jitterAmp: typeof spec.jitter_amp === "number" ? spec.jitter_amp : 0.0,
  };
  if (script.numClips < 1 || script.captionLen < 1 || script.tokensPerFrame < 1) {
    throw new Error("clip script needs at least one clip, caption token, frame token");
  }
  if (script.lpIn.length !== script.numClips || script.lpOut.length !== script.numClips) {
    throw new Error("lp_in/lp_out must carry one entry per clip");
  }
  if (!(script.jitterAmp >= 0.0)) {
    throw new Error("jitter_amp must be non-negative");
  }
  if (script.frameMarkerBase + script.numClips > script.frameIndexBase) {
    throw new Error("frame marker range runs into frame index range");
  }
  if (script.frameIndexBase + MAX_FRAME_INDEX > script.captionBase) {
    throw new Error("frame index range runs into caption range");
  }
  return script;
}

function readLogprobList(value: unknown, what: string): number[] {
  if (!Array.isArray(value)) {
    throw new Error(`${what} must be an array of logprobs`);
  }
  return value.map((lp, i) => asLogprob(lp, `${what}[${i}]`));
}

function readFallback(spec: unknown, vocabSize: number): FallbackRule {
  if (spec === undefined || spec === null) {
    return { mode: "uniform", lp: uniformForVocab(vocabSize) };
  }
  const fb = spec as Record<string, unknown>;
  if (fb.mode === "uniform") {
    if (fb.lp === undefined || fb.lp === null) {
      return { mode: "uniform", lp: uniformForVocab(vocabSize) };
    }
    return { mode: "uniform", lp: asLogprob(fb.lp, "fallback lp") };
  }
  if (fb.mode === "hash") {
    const lpMin = asLogprob(fb.lp_min, "fallback lp_min");
    const lpMax = asLogprob(fb.lp_max, "fallback lp_max");
    if (!(lpMin <= lpMax)) {
      throw new Error("hash fallback needs lp_min <= lp_max <= 0");
    }
    return { mode: "hash", lpMin, lpMax };
  }
  throw new Error(`unknown fallback mode ${JSON.stringify(fb.mode)}`);
}

/** Parse and validate a scenario payload already decoded from JSON. */
export function scenarioFromPayload(payload: unknown): Scenario {
  if (typeof payload !== "object" || payload === null || Array.isArray(payload)) {
    throw new Error("scenario must be a JSON object");
  }
  const doc = payload as Record<string, unknown>;
  if (doc.format !== SCENARIO_FORMAT) {
    throw new Error("not a scenario file");
  }
  const config = readConfig(doc);

  const entries = new Map<string, number>();
  const byFingerprint = new Map<string, Array<[number, number]>>();
  const rawEntries = doc.entries === undefined ? [] : doc.entries;
  if (!Array.isArray(rawEntries)) {
    throw new Error("entries must be an array of [fingerprint, token, logprob] rows");
  }
  for (const row of rawEntries) {
    if (!Array.isArray(row) || row.length !== 3) {
      throw new Error("entries must be [fingerprint, token, logprob] rows");
    }
    const [fpRaw, tokenRaw, lpRaw] = row;
    if (typeof fpRaw !== "string" && typeof fpRaw !== "number") {
      throw new Error(`table fingerprint ${JSON.stringify(fpRaw)} must be a decimal string`);
    }
    const fp = BigInt(fpRaw);
    if (fp < 0n || fp >= 1n << 64n) {
      throw new Error(`table fingerprint ${fp} outside 64-bit range`);
    }
    const token = asInt(tokenRaw, "table token");
    if (token < 0 || token >= config.vocabSize) {
      throw new Error(`table token ${token} outside vocabulary`);
    }
    const lp = asLogprob(lpRaw, "table logprob");
    const key = fp.toString();
    entries.set(`${key}:${token}`, lp);
    let candidates = byFingerprint.get(key);
    if (candidates === undefined) {
      candidates = [];
      byFingerprint.set(key, candidates);
    }
    candidates.push([token, lp]);
  }
  for (const candidates of byFingerprint.values()) {
    candidates.sort((a, b) => a[0] - b[0]);
  }

  const scriptSpec = doc.clip_script;
  const clipScript =
    scriptSpec === undefined || scriptSpec === null
      ? null
      : readClipScript(scriptSpec as Record<string, unknown>);
  const fallback = readFallback(doc.fallback, config.vocabSize);
  return { config, entries, byFingerprint, clipScript, fallback };
}

/** Load a scenario from disk. */
export function loadScenario(path: string): Scenario {
  let payload: unknown;
  try {
    payload = JSON.parse(readFileSync(path, "utf8"));
  } catch (err) {
    throw new Error(`${path}: ${err instanceof Error ? err.message : String(err)}`);
  }
  try {
    return scenarioFromPayload(payload);
  } catch (err) {
    throw new Error(`${path}: ${err instanceof Error ? err.message : String(err)}`);
  }
}
