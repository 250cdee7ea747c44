import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["test/**/*.test.ts"],
    // conformance tests shell out to the engine CLI, which replays
    // whole traces through a spawned server; give them room
    testTimeout: 120_000,
    hookTimeout: 120_000,
  },
});
