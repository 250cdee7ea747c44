/** Shared paths, fixtures, and process helpers for the bridge tests. */

import { spawnSync, type SpawnSyncReturns } from "node:child_process";
import { existsSync, readFileSync } from "node:fs";
import { dirname, join, resolve } from "node:path";
import { fileURLToPath } from "node:url";

export const TEST_DIR = dirname(fileURLToPath(import.meta.url));
export const BRIDGE_ROOT = resolve(TEST_DIR, "..");
export const PKG_ROOT = resolve(BRIDGE_ROOT, "..");
export const FIXTURES = join(TEST_DIR, "fixtures");
export const DIST_MAIN = join(BRIDGE_ROOT, "dist", "main.js");

export function fixture(name: string): string {
  return join(FIXTURES, name);
}

export interface GoldenCase {
  scenario: string;
  op: "score" | "generate";
  context: number[];
  continuation?: number[];
  max_len?: number;
  tokens?: number[];
  logprobs: number[];
}

export interface Goldens {
  fnv: Array<{ tokens: number[]; fingerprint: string }>;
  jitter: Array<{ frame_index: number; value: number }>;
  hash_fallback: Array<{ fp: string; token: number; lp_min: number; lp_max: number; lp: number }>;
  cases: GoldenCase[];
}

export function loadGoldens(): Goldens {
  return JSON.parse(readFileSync(fixture("goldens.json"), "utf8")) as Goldens;
}

/** Compile dist/ if a test needs the runnable server and it is missing. */
export function ensureBuilt(): void {
  if (existsSync(DIST_MAIN)) {
    return;
  }
  const result = spawnSync("npm", ["run", "build"], { cwd: BRIDGE_ROOT, encoding: "utf8" });
  if (result.status !== 0) {
    throw new Error(`build failed:\n${result.stdout}\n${result.stderr}`);
  }
}

/** Run the engine CLI; the engine package must be importable by python3. */
export function runEngine(args: string[]): SpawnSyncReturns<string> {
  return spawnSync("python3", ["-m", "streamgate", ...args], {
    cwd: PKG_ROOT,
    encoding: "utf8",
    maxBuffer: 64 * 1024 * 1024,
  });
}

/** Small deterministic PRNG so fuzz corpora are reproducible. */
export function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}
