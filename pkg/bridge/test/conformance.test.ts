import { spawn } from "node:child_process";
import { mkdtempSync, readFileSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, expect, test } from "vitest";

import { DIST_MAIN, ensureBuilt, runEngine } from "./util.js";

/**
 * End-to-end parity: the engine CLI replays each synthetic trace twice,
 * once against its in-process scorer and once against this server over
 * the wire, and every artifact that records a gate decision must come
 * out byte-identical.
 */

interface Pair {
  name: string;
  trace: string;
  scenario: string;
}

const TRACES = 20;
let workDir: string;
const pairs: Pair[] = [];

function synthPair(name: string, args: string[]): Pair {
  const dir = join(workDir, name);
  const result = runEngine(["synth", "--out-dir", dir, "--stem", name, ...args]);
  if (result.status !== 0) {
    throw new Error(`synth ${name} failed: ${result.stderr}`);
  }
  return {
    name,
    trace: join(dir, `${name}.trace.ndjson`),
    scenario: join(dir, `${name}.scenario.json`),
  };
}

function replay(trace: string, scorer: string, outDir: string): void {
  const result = runEngine([
    "replay",
    trace,
    "--alpha",
    "1.03",
    "--window-frames",
    "40",
    "--scorer",
    scorer,
    "--out-dir",
    outDir,
  ]);
  expect(result.status, result.stderr).toBe(0);
}

function bridgeEndpoint(scenario: string): string {
  return `bridge:cmd:node "${DIST_MAIN}" "${scenario}"`;
}

beforeAll(() => {
  ensureBuilt();
  workDir = mkdtempSync(join(tmpdir(), "streamgate-bridge-"));
  pairs.push(synthPair("gate", ["--kind", "gate"]));
  for (let seed = 1; seed < TRACES; seed++) {
    pairs.push(
      synthPair(`random-${seed}`, ["--kind", "random", "--seed", String(seed), "--num-clips", "6"]),
    );
  }
});

afterAll(() => {
  if (workDir) {
    rmSync(workDir, { recursive: true, force: true });
  }
});

test(`gate decisions match the in-process scorer on ${TRACES} scripted traces`, () => {
  expect(pairs.length).toBe(TRACES);
  for (const pair of pairs) {
    const refDir = join(workDir, pair.name, "ref");
    const wireDir = join(workDir, pair.name, "wire");
    replay(pair.trace, `reference:${pair.scenario}`, refDir);
    replay(pair.trace, bridgeEndpoint(pair.scenario), wireDir);

    const events = readFileSync(join(refDir, "events.ndjson"), "utf8");
    expect(events.length, `${pair.name} produced no events`).toBeGreaterThan(0);
    const responses = JSON.parse(readFileSync(join(refDir, "responses.json"), "utf8"));
    expect(responses.responses.length, `${pair.name} produced no responses`).toBeGreaterThan(0);

    for (const artifact of ["events.ndjson", "responses.json", "report.json"]) {
      expect(
        readFileSync(join(wireDir, artifact), "utf8"),
        `${pair.name}/${artifact} differs`,
      ).toBe(readFileSync(join(refDir, artifact), "utf8"));
    }
  }
});

test("the tcp transport replays identically to stdio", async () => {
  const pair = pairs[0];
  const child = spawn("node", [DIST_MAIN, pair.scenario, "--tcp", "0"], {
    stdio: ["ignore", "ignore", "pipe"],
  });
  const exited = new Promise<number | null>((resolve) => {
    child.once("exit", (code) => resolve(code));
  });
  try {
    const port = await new Promise<number>((resolve, reject) => {
      let buffered = "";
      child.stderr.setEncoding("utf8");
      child.stderr.on("data", (chunk: string) => {
        buffered += chunk;
        const match = buffered.match(/listening on [^\s:]+:(\d+)/);
        if (match) {
          resolve(Number(match[1]));
        }
      });
      child.once("exit", (code) => reject(new Error(`server exited early with ${code}: ${buffered}`)));
      setTimeout(() => reject(new Error("server never reported its port")), 20_000).unref();
    });

    const refDir = join(workDir, pair.name, "tcp-ref");
    const tcpDir = join(workDir, pair.name, "tcp-wire");
    replay(pair.trace, `reference:${pair.scenario}`, refDir);
    replay(pair.trace, `bridge:tcp:127.0.0.1:${port}`, tcpDir);
    for (const artifact of ["events.ndjson", "responses.json", "report.json"]) {
      expect(readFileSync(join(tcpDir, artifact), "utf8")).toBe(
        readFileSync(join(refDir, artifact), "utf8"),
      );
    }
  } finally {
    child.kill("SIGINT");
  }
  expect(await exited).toBe(0);
});
