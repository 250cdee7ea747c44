/**
 * Transports for the bridge protocol: stdio (one session per process)
 * and TCP (one session per connection).  Both split the byte stream on
 * newlines and hand each line to a ProtocolSession, which never throws,
 * so malformed traffic degrades to error responses instead of crashes.
 */

import { createServer, type Server, type Socket } from "node:net";
import { createInterface } from "node:readline";

import { ProtocolSession } from "./protocol.js";
import type { TableScorer } from "./scorer.js";

/** Serve one session over stdin/stdout; resolves when stdin ends. */
export function serveStdio(scorer: TableScorer): Promise<void> {
  const session = new ProtocolSession(scorer);
  const rl = createInterface({ input: process.stdin, crlfDelay: Infinity, terminal: false });
  return new Promise((resolve) => {
    rl.on("line", (line) => {
      process.stdout.write(session.handleLine(line) + "\n");
    });
    rl.once("close", () => resolve());
  });
}

/** Serve a fresh session per connection; caller closes the returned server. */
export function serveTcp(scorer: TableScorer, host: string, port: number): Server {
  const server = createServer((socket) => handleConnection(scorer, socket));
  server.listen(port, host);
  return server;
}

function handleConnection(scorer: TableScorer, socket: Socket): void {
  const session = new ProtocolSession(scorer);
  let buffered = "";
  socket.setEncoding("utf8");
  socket.on("data", (chunk: string) => {
    buffered += chunk;
    let newline: number;
    while ((newline = buffered.indexOf("\n")) >= 0) {
      const line = buffered.slice(0, newline);
      buffered = buffered.slice(newline + 1);
      socket.write(session.handleLine(line) + "\n");
    }
  });
  socket.on("error", () => {
    socket.destroy();
  });
}
