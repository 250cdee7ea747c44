"""Client for out-of-process scorers speaking newline-delimited JSON.

Endpoints:
    cmd:<command line>    spawn the command and talk over stdin/stdout
    tcp:<host>:<port>     connect a TCP socket

One request per line, one response per line, at most one in flight:

    -> {"id": 1, "method": "hello", "params": {"format": "streamgate-bridge", "version": 1}}
    <- {"id": 1, "result": {"name": "...", "version": 1}}
    -> {"id": 2, "method": "score", "params": {"context": [...], "continuation": [...]}}
    <- {"id": 2, "result": {"logprobs": [...]}}
    -> {"id": 3, "method": "generate", "params": {"context": [...], "max_len": 64}}
    <- {"id": 3, "result": {"tokens": [...], "logprobs": [...]}}

A server-side failure arrives as {"id": n, "error": {"message": "..."}}
and surfaces as ScorerError; so do transport failures and malformed
responses.  Servers answer a line they cannot parse with id -1, which
the client also treats as an error.
"""

from __future__ import annotations

import json
import shlex
import socket
import subprocess
from typing import Sequence

from .scoring import ScoreResult, ScorerError

PROTOCOL_FORMAT = "streamgate-bridge"
PROTOCOL_VERSION = 1


def parse_endpoint(endpoint: str) -> tuple:
    """("cmd", argv) or ("tcp", host, port); ValueError on malformed input."""
    kind, _, rest = endpoint.partition(":")
    if kind == "cmd":
        argv = shlex.split(rest)
        if not argv:
            raise ValueError(f"empty command in endpoint {endpoint!r}")
        return ("cmd", argv)
    if kind == "tcp":
        host, _, port = rest.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"tcp endpoint must be tcp:<host>:<port>, got {endpoint!r}")
        return ("tcp", host, int(port))
    raise ValueError(f"unknown endpoint kind {kind!r} (want cmd: or tcp:)")


class BridgeScorer:
    """Scorer backed by a bridge server; performs the hello handshake on open."""

    def __init__(self, endpoint: str, *, timeout_s: float = 30.0):
        parsed = parse_endpoint(endpoint)
        self._endpoint = endpoint
        self._next_id = 1
        self._proc: subprocess.Popen | None = None
        self._sock: socket.socket | None = None
        if parsed[0] == "cmd":
            try:
                self._proc = subprocess.Popen(
                    parsed[1],
                    stdin=subprocess.PIPE,
                    stdout=subprocess.PIPE,
                    text=True,
                    bufsize=1,
                )
            except OSError as exc:
                raise ScorerError(f"cannot launch bridge {endpoint!r}: {exc}") from exc
            self._reader = self._proc.stdout
            self._writer = self._proc.stdin
        else:
            _, host, port = parsed
            try:
                self._sock = socket.create_connection((host, port), timeout=timeout_s)
            except OSError as exc:
                raise ScorerError(f"cannot connect to bridge {endpoint!r}: {exc}") from exc
            self._sock.settimeout(timeout_s)
            self._reader = self._sock.makefile("r", encoding="utf-8", newline="\n")
            self._writer = self._sock.makefile("w", encoding="utf-8", newline="\n")
        self._handshake()

    # -- transport -----------------------------------------------------

    def _request(self, method: str, params: dict) -> dict:
        request_id = self._next_id
        self._next_id += 1
        line = json.dumps({"id": request_id, "method": method, "params": params})
        try:
            self._writer.write(line + "\n")
            self._writer.flush()
            answer = self._reader.readline()
        except (OSError, ValueError) as exc:
            raise ScorerError(f"bridge transport failed: {exc}") from exc
        if not answer:
            raise ScorerError("bridge closed the connection")
        try:
            response = json.loads(answer)
        except json.JSONDecodeError as exc:
            raise ScorerError(f"bridge sent a malformed response: {answer!r}") from exc
        if not isinstance(response, dict):
            raise ScorerError(f"bridge response is not an object: {answer!r}")
        if "error" in response:
            message = response["error"].get("message", "unknown bridge error")
            raise ScorerError(f"bridge error for {method}: {message}")
        if response.get("id") != request_id:
            raise ScorerError(
                f"bridge answered id {response.get('id')} to request {request_id}"
            )
        result = response.get("result")
        if not isinstance(result, dict):
            raise ScorerError(f"bridge response carries no result: {answer!r}")
        return result

    def _handshake(self) -> None:
        result = self._request(
            "hello", {"format": PROTOCOL_FORMAT, "version": PROTOCOL_VERSION}
        )
        if result.get("version") != PROTOCOL_VERSION:
            raise ScorerError(
                f"bridge speaks protocol version {result.get('version')}, "
                f"client needs {PROTOCOL_VERSION}"
            )

    # -- Scorer protocol ----------------------------------------------

    def score_continuation(
        self,
        context: Sequence[int],
        continuation: Sequence[int],
        mask: object | None = None,
    ) -> ScoreResult:
        del mask  # rides through opaquely; the wire protocol has no mask field
        result = self._request(
            "score", {"context": list(context), "continuation": list(continuation)}
        )
        logprobs = result.get("logprobs")
        if not isinstance(logprobs, list):
            raise ScorerError("score result lacks a logprobs array")
        if len(logprobs) != len(continuation):
            raise ScorerError(
                f"bridge scored {len(logprobs)} of {len(continuation)} tokens"
            )
        return ScoreResult(tuple(float(lp) for lp in logprobs))

    def generate_caption(
        self,
        context: Sequence[int],
        max_len: int,
        mask: object | None = None,
    ) -> tuple[list[int], ScoreResult]:
        del mask
        result = self._request("generate", {"context": list(context), "max_len": max_len})
        tokens = result.get("tokens")
        logprobs = result.get("logprobs")
        if not isinstance(tokens, list) or not isinstance(logprobs, list):
            raise ScorerError("generate result lacks tokens or logprobs arrays")
        if len(tokens) != len(logprobs):
            raise ScorerError(
                f"bridge generated {len(tokens)} tokens with {len(logprobs)} logprobs"
            )
        return [int(t) for t in tokens], ScoreResult(tuple(float(lp) for lp in logprobs))

    # -- lifecycle -----------------------------------------------------

    def close(self) -> None:
        if self._proc is not None:
            try:
                if self._proc.stdin:
                    self._proc.stdin.close()
                self._proc.wait(timeout=5.0)
            except (OSError, subprocess.TimeoutExpired):
                self._proc.kill()
                self._proc.wait()
            self._proc = None
        if self._sock is not None:
            try:
                self._reader.close()
                self._writer.close()
                self._sock.close()
            except OSError:
                pass
            self._sock = None

    def __enter__(self) -> "BridgeScorer":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()
