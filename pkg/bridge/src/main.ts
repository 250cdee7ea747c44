/**
 * Bridge server entry point.
 *
 * Usage:
 *   node dist/main.js <scenario.json>              stdio transport
 *   node dist/main.js <scenario.json> --tcp PORT   TCP transport
 *
 * With --tcp the bound address is reported on stderr (port 0 asks the
 * OS for a free port).  SIGINT and a closed stdin both shut the server
 * down cleanly.  Exit codes: 0 success, 1 scenario failure, 2 usage.
 */

import { parseArgs } from "node:util";
import type { AddressInfo, Socket } from "node:net";

import { loadScenario } from "./scenario.js";
import { TableScorer } from "./scorer.js";
import { serveStdio, serveTcp } from "./server.js";

const USAGE = "usage: streamgate-bridge <scenario.json> [--tcp PORT] [--host HOST]";

function fail(message: string): void {
  process.stderr.write(`streamgate-bridge: ${message}\n`);
}

async function main(argv: string[]): Promise<number> {
  let values: { tcp?: string; host: string };
  let positionals: string[];
  try {
    ({ values, positionals } = parseArgs({
      args: argv,
      options: {
        tcp: { type: "string" },
        host: { type: "string", default: "127.0.0.1" },
      },
      allowPositionals: true,
    }));
  } catch (err) {
    fail(err instanceof Error ? err.message : String(err));
    fail(USAGE);
    return 2;
  }
  if (positionals.length !== 1) {
    fail(USAGE);
    return 2;
  }

  let scorer: TableScorer;
  try {
    scorer = new TableScorer(loadScenario(positionals[0]));
  } catch (err) {
    fail(err instanceof Error ? err.message : String(err));
    return 1;
  }

  if (values.tcp !== undefined) {
    const port = Number(values.tcp);
    if (!Number.isInteger(port) || port < 0 || port > 65535) {
      fail(`--tcp needs a port number, got ${values.tcp}`);
      return 2;
    }
    const server = serveTcp(scorer, values.host, port);
    const sockets = new Set<Socket>();
    server.on("connection", (socket) => {
      sockets.add(socket);
      socket.once("close", () => sockets.delete(socket));
    });
    await new Promise<void>((resolve, reject) => {
      server.once("error", (err) => reject(err));
      server.once("listening", () => {
        const addr = server.address() as AddressInfo;
        process.stderr.write(`streamgate-bridge: listening on ${addr.address}:${addr.port}\n`);
      });
      const shutdown = () => {
        for (const socket of sockets) {
          socket.destroy();
        }
        server.close(() => resolve());
      };
      process.once("SIGINT", shutdown);
      process.once("SIGTERM", shutdown);
    }).catch((err) => {
      fail(err instanceof Error ? err.message : String(err));
      process.exit(1);
    });
    return 0;
  }

  process.once("SIGINT", () => process.exit(0));
  // a consumer that goes away mid-write is a normal shutdown, not a crash
  process.stdout.on("error", () => process.exit(0));
  await serveStdio(scorer);
  return 0;
}

const code = await main(process.argv.slice(2));
if (code !== 0) {
  process.exit(code);
}
