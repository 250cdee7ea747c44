/**
 * Deterministic table-driven scorer.
 *
 * This is a port of the engine's in-process reference scorer and must
 * stay numerically identical to it: same lookup precedence (exact
 * table entry, then clip script, then fallback), same fingerprint
 * stepping, same tie-breaks during generation.  All arithmetic here is
 * exact in IEEE doubles, which is what makes cross-process replays
 * byte-for-byte reproducible.
 */

import { FNV64_OFFSET, fingerprintStep, unitFromFingerprint } from "./fnv.js";
import { MAX_FRAME_INDEX, type ClipScript, type Scenario } from "./scenario.js";

/** Scoring request violated the scorer contract. */
export class ScorerError extends Error {}

// Weyl-style integer mix shared with the engine; exact in doubles for
// frame indices below 2**21.
const JITTER_MULTIPLIER = 2654435761;
const JITTER_MODULUS = 4294967296;

/** Deterministic value in [0, 1) keyed on a frame index. */
export function jitterUnit(frameIndex: number): number {
  if (!(frameIndex >= 0 && frameIndex < MAX_FRAME_INDEX)) {
    throw new ScorerError(`frame index ${frameIndex} outside jitterable range`);
  }
  return ((frameIndex * JITTER_MULTIPLIER) % JITTER_MODULUS) / JITTER_MODULUS;
}

function captionClipOf(script: ClipScript, token: number): number | null {
  const offset = token - script.captionBase;
  if (offset >= 0 && offset < script.numClips * script.captionLen) {
    return Math.floor(offset / script.captionLen);
  }
  return null;
}

function captionTokens(script: ClipScript, clip: number): number[] {
  const start = script.captionBase + clip * script.captionLen;
  const tokens: number[] = [];
  for (let i = 0; i < script.captionLen; i++) {
    tokens.push(start + i);
  }
  return tokens;
}

/** [position, clip, frameIndex] of the last frame marker in a context. */
function locateLatestFrame(
  script: ClipScript,
  context: readonly number[],
): [number, number, number] | null {
  const lo = script.frameMarkerBase;
  const hi = lo + script.numClips;
  for (let pos = context.length - 1; pos >= 0; pos--) {
    const t = context[pos];
    if (t >= lo && t < hi) {
      let frameIndex = 0;
      if (pos + 1 < context.length) {
        const nxt = context[pos + 1];
        if (nxt >= script.frameIndexBase && nxt < script.frameIndexBase + MAX_FRAME_INDEX) {
          frameIndex = nxt - script.frameIndexBase;
        }
      }
      return [pos, t - lo, frameIndex];
    }
  }
  return null;
}

/**
 * Rolling cache of context fingerprints.  Scoring calls mostly extend
 * the previous context at the tail, so stepping from a cached prefix
 * avoids rehashing long histories; results are identical either way.
 */
class PrefixFingerprints {
  private known: Array<[number[], bigint]> = [];

  constructor(private readonly capacity = 8) {}

  fingerprint(context: readonly number[]): bigint {
    let bestLen = -1;
    let bestFp = FNV64_OFFSET;
    for (const [prefix, fp] of this.known) {
      const n = prefix.length;
      if (n <= context.length && n > bestLen && matchesPrefix(context, prefix)) {
        bestLen = n;
        bestFp = fp;
      }
    }
    if (bestLen < 0) {
      bestLen = 0;
      bestFp = FNV64_OFFSET;
    }
    let fp = bestFp;
    for (let i = bestLen; i < context.length; i++) {
      fp = fingerprintStep(fp, context[i]);
    }
    this.known.push([context.slice(), fp]);
    if (this.known.length > this.capacity) {
      this.known.shift();
    }
    return fp;
  }
}

function matchesPrefix(context: readonly number[], prefix: readonly number[]): boolean {
  for (let i = 0; i < prefix.length; i++) {
    if (context[i] !== prefix[i]) {
      return false;
    }
  }
  return true;
}

function validatedLogprobs(logprobs: number[]): number[] {
  for (const lp of logprobs) {
    if (!Number.isFinite(lp) || lp > 0.0) {
      throw new ScorerError(`logprob ${lp} is not finite non-positive`);
    }
  }
  return logprobs;
}

export interface GenerationResult {
  tokens: number[];
  logprobs: number[];
}

export class TableScorer {
  private readonly fingerprints = new PrefixFingerprints();

  constructor(readonly scenario: Scenario) {}

  private checkIds(tokens: readonly number[], what: string): void {
    const vocab = this.scenario.config.vocabSize;
    for (const t of tokens) {
      if (!Number.isInteger(t) || t < 0 || t >= vocab) {
        throw new ScorerError(`${what} token id ${t} outside vocabulary of ${vocab}`);
      }
    }
  }

  private fallbackLp(fp: bigint | null, token: number): number {
    const fb = this.scenario.fallback;
    if (fb.mode === "uniform") {
      return fb.lp;
    }
    if (fp === null) {
      throw new ScorerError("hash fallback requires a fingerprint");
    }
    const u = unitFromFingerprint(fingerprintStep(fp, token));
    return fb.lpMin + (fb.lpMax - fb.lpMin) * u;
  }

  scoreContinuation(context: readonly number[], continuation: readonly number[]): number[] {
    if (continuation.length === 0) {
      throw new ScorerError("cannot score an empty continuation");
    }
    const limit = this.scenario.config.contextLimit;
    if (limit !== null && context.length + continuation.length > limit) {
      throw new ScorerError(
        `context of ${context.length}+${continuation.length} tokens exceeds limit ${limit}`,
      );
    }
    this.checkIds(context, "context");
    this.checkIds(continuation, "continuation");

    const script = this.scenario.clipScript;
    const frameInfo = script === null ? null : locateLatestFrame(script, context);
    const needFp = this.scenario.entries.size > 0 || this.scenario.fallback.mode === "hash";
    let fp: bigint | null = needFp ? this.fingerprints.fingerprint(context) : null;

    const logprobs: number[] = [];
    for (const token of continuation) {
      let lp: number | undefined;
      if (fp !== null) {
        lp = this.scenario.entries.get(`${fp}:${token}`);
      }
      if (lp === undefined && script !== null && frameInfo !== null) {
        const clipOfToken = captionClipOf(script, token);
        if (clipOfToken !== null) {
          const [, frameClip, frameIndex] = frameInfo;
          const base =
            clipOfToken === frameClip ? script.lpIn[frameClip] : script.lpOut[frameClip];
          lp = base - script.jitterAmp * jitterUnit(frameIndex);
        }
      }
      if (lp === undefined) {
        lp = this.fallbackLp(fp, token);
      }
      logprobs.push(lp);
      if (fp !== null) {
        fp = fingerprintStep(fp, token);
      }
    }
    return validatedLogprobs(logprobs);
  }

  /**
   * Greedy decode until the end-of-caption sentinel or maxLen.  Among
   * table candidates at the current fingerprint the highest logprob
   * wins, ties to the smallest token id; with no candidate the clip
   * script may continue its caption; otherwise decoding stops.
   */
  generateCaption(context: readonly number[], maxLen: number): GenerationResult {
    if (!(maxLen >= 0)) {
      throw new ScorerError(`max_len must be non-negative, got ${maxLen}`);
    }
    this.checkIds(context, "context");
    if (maxLen === 0) {
      return { tokens: [], logprobs: [] };
    }

    const script = this.scenario.clipScript;
    let scripted: number[] | null = null;
    if (script !== null) {
      const frameInfo = locateLatestFrame(script, context);
      if (frameInfo !== null) {
        const [pos, frameClip] = frameInfo;
        const trailing = context.slice(pos + script.tokensPerFrame);
        const caption = captionTokens(script, frameClip);
        if (trailing.length <= caption.length && matchesPrefix(caption, trailing)) {
          scripted = caption.slice(trailing.length);
        }
      }
    }

    const out: number[] = [];
    let fp: bigint | null = null;
    if (this.scenario.entries.size > 0) {
      fp = this.fingerprints.fingerprint(context);
    }
    while (out.length < maxLen) {
      let chosen: number | null = null;
      if (fp !== null) {
        const candidates = this.scenario.byFingerprint.get(fp.toString());
        if (candidates !== undefined && candidates.length > 0) {
          let [bestToken, bestLp] = candidates[0];
          for (let i = 1; i < candidates.length; i++) {
            const [token, lp] = candidates[i];
            if (lp > bestLp) {
              bestToken = token;
              bestLp = lp;
            }
          }
          chosen = bestToken;
        }
      }
      if (chosen === null && scripted !== null && scripted.length > 0) {
        chosen = scripted[0];
      }
      if (chosen === null || chosen === this.scenario.config.eosToken) {
        break;
      }
      if (scripted !== null) {
        // keep the scripted continuation aligned with what was emitted
        if (scripted.length > 0 && scripted[0] === chosen) {
          scripted.shift();
        } else {
          scripted = null;
        }
      }
      out.push(chosen);
      if (fp !== null) {
        fp = fingerprintStep(fp, chosen);
      }
    }
    if (out.length === 0) {
      return { tokens: [], logprobs: [] };
    }
    return { tokens: out, logprobs: this.scoreContinuation(context, out) };
  }
}
