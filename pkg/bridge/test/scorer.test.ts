import { describe, expect, test } from "vitest";

import { loadScenario, scenarioFromPayload, uniformForVocab } from "../src/scenario.js";
import { ScorerError, TableScorer } from "../src/scorer.js";
import { fixture, loadGoldens, type GoldenCase } from "./util.js";

const goldens = loadGoldens();

function freshScorer(name: string): TableScorer {
  return new TableScorer(loadScenario(fixture(`${name}.scenario.json`)));
}

const scorers = new Map<string, TableScorer>([
  ["gate", freshScorer("gate")],
  ["jitter", freshScorer("jitter")],
  ["table", freshScorer("table")],
]);

describe("golden parity with the engine scorer", () => {
  goldens.cases.forEach((gc: GoldenCase, i: number) => {
    test(`${gc.scenario} ${gc.op} ${i}`, () => {
      const scorer = scorers.get(gc.scenario)!;
      if (gc.op === "score") {
        expect(scorer.scoreContinuation(gc.context, gc.continuation!)).toEqual(gc.logprobs);
      } else {
        const out = scorer.generateCaption(gc.context, gc.max_len!);
        expect(out.tokens).toEqual(gc.tokens);
        expect(out.logprobs).toEqual(gc.logprobs);
      }
    });
  });
});

test("a cold scorer reproduces every golden case", () => {
  // the prefix-fingerprint memo is a cache only; results must not
  // depend on what was scored before
  for (const gc of goldens.cases) {
    const scorer = freshScorer(gc.scenario);
    if (gc.op === "score") {
      expect(scorer.scoreContinuation(gc.context, gc.continuation!)).toEqual(gc.logprobs);
    } else {
      expect(scorer.generateCaption(gc.context, gc.max_len!).tokens).toEqual(gc.tokens);
    }
  }
});

test("empty continuation is rejected", () => {
  expect(() => scorers.get("table")!.scoreContinuation([3, 4], [])).toThrow(ScorerError);
});

test("out-of-vocabulary ids are rejected", () => {
  const scorer = scorers.get("table")!; // vocab_size 50
  expect(() => scorer.scoreContinuation([50], [1])).toThrow(/vocabulary/);
  expect(() => scorer.scoreContinuation([1], [-1])).toThrow(/vocabulary/);
  expect(() => scorer.generateCaption([50], 4)).toThrow(/vocabulary/);
});

test("requests over the context limit are rejected", () => {
  const scorer = scorers.get("table")!; // context_limit 12
  const context = Array(10).fill(1);
  expect(() => scorer.scoreContinuation(context, [1, 2, 3])).toThrow(/limit/);
  expect(scorer.scoreContinuation(context, [1, 2]).length).toBe(2);
});

test("negative max_len is rejected", () => {
  expect(() => scorers.get("table")!.generateCaption([3, 4], -1)).toThrow(/max_len/);
});

test("loader rejects foreign payloads", () => {
  expect(() => scenarioFromPayload({})).toThrow(/not a scenario file/);
  expect(() => scenarioFromPayload([1, 2])).toThrow(/JSON object/);
  expect(() => scenarioFromPayload("x")).toThrow(/JSON object/);
});

test("loader validates the config block", () => {
  const base = { format: "streamgate-scenario", version: 1, vocab_size: 8, eos_token: 0 };
  expect(() => scenarioFromPayload({ ...base, vocab_size: 1 })).toThrow(/vocab_size/);
  expect(() => scenarioFromPayload({ ...base, eos_token: 8 })).toThrow(/eos_token/);
  expect(() => scenarioFromPayload({ ...base, max_generation_len: -1 })).toThrow(/max_generation_len/);
});

test("loader validates table entries", () => {
  const base = { format: "streamgate-scenario", version: 1, vocab_size: 8, eos_token: 0 };
  expect(() => scenarioFromPayload({ ...base, entries: [["1", 8, -1.0]] })).toThrow(/vocabulary/);
  expect(() => scenarioFromPayload({ ...base, entries: [["1", 2, 0.5]] })).toThrow(/non-positive/);
  expect(() =>
    scenarioFromPayload({ ...base, entries: [["18446744073709551616", 2, -1.0]] }),
  ).toThrow(/64-bit/);
  expect(() => scenarioFromPayload({ ...base, entries: [["1", 2]] })).toThrow(/rows/);
});

test("loader validates the fallback rule", () => {
  const base = { format: "streamgate-scenario", version: 1, vocab_size: 8, eos_token: 0 };
  expect(() => scenarioFromPayload({ ...base, fallback: { mode: "dice" } })).toThrow(/fallback mode/);
  expect(() =>
    scenarioFromPayload({ ...base, fallback: { mode: "hash", lp_min: -1.0, lp_max: -2.0 } }),
  ).toThrow(/lp_min/);
  expect(() => scenarioFromPayload({ ...base, fallback: { mode: "uniform", lp: 0.5 } })).toThrow(
    /non-positive/,
  );
});

test("missing fallback defaults to a uniform vocabulary draw", () => {
  const base = { format: "streamgate-scenario", version: 1, vocab_size: 8, eos_token: 0 };
  for (const payload of [base, { ...base, fallback: { mode: "uniform", lp: null } }]) {
    const scenario = scenarioFromPayload(payload);
    expect(scenario.fallback).toEqual({ mode: "uniform", lp: uniformForVocab(8) });
    expect(new TableScorer(scenario).scoreContinuation([], [3])).toEqual([uniformForVocab(8)]);
  }
});

test("loader validates the clip script", () => {
  const base = { format: "streamgate-scenario", version: 1, vocab_size: 9000000, eos_token: 0 };
  const script = {
    frame_marker_base: 8,
    frame_index_base: 10,
    caption_base: 10 + (1 << 21),
    caption_len: 4,
    tokens_per_frame: 4,
    num_clips: 2,
    lp_in: [-0.1, -0.1],
    lp_out: [-0.7, -0.7],
    jitter_amp: 0.0,
  };
  expect(scenarioFromPayload({ ...base, clip_script: script }).clipScript?.numClips).toBe(2);
  expect(() =>
    scenarioFromPayload({ ...base, clip_script: { ...script, lp_in: [-0.1] } }),
  ).toThrow(/per clip/);
  expect(() =>
    scenarioFromPayload({ ...base, clip_script: { ...script, frame_index_base: 9 } }),
  ).toThrow(/marker range/);
  expect(() =>
    scenarioFromPayload({ ...base, clip_script: { ...script, caption_base: 100 } }),
  ).toThrow(/caption range/);
  expect(() =>
    scenarioFromPayload({ ...base, clip_script: { ...script, jitter_amp: -0.5 } }),
  ).toThrow(/jitter_amp/);
});

test("generation truncates at the requested length", () => {
  // golden cases pin exact outputs; this covers the running-prefix
  // interaction: a partial caption in context resumes mid-caption
  const scorer = scorers.get("gate")!;
  const full = scorer.generateCaption(goldens.cases[3].context, 8);
  const short = scorer.generateCaption(goldens.cases[3].context, 5);
  expect(short.tokens).toEqual(full.tokens.slice(0, 5));
});
