"""Command-line harness: replay traces, sweep parameter grids, build data artifacts.

Subcommands:
    replay   run one streaming session over a trace and write artifacts
    sweep    run a (trace x alpha x window) grid of sessions into one CSV
    datagen  assemble an interleaved training sequence from a trace
    synth    generate a synthetic trace + scenario pair

Exit codes: 0 success, 2 usage or configuration, 3 trace parsing,
4 scorer (scenario load or bridge handshake), 5 internal invariant.
The STREAMGATE_LOG environment variable sets the logging level.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import random
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .bridge_client import BridgeScorer, parse_endpoint
from .engine import (
    ConfigError,
    ContextBudgetExceeded,
    EngineInvariantError,
    SessionConfig,
    init_session,
)
from .hashing import derive_substream_seed
from .metrics import (
    SEMANTIC_DIMENSIONS,
    StubJudge,
    build_report,
    response_token_accuracy,
    tim_cover,
    tim_diff,
    tim_redun,
    write_report_json,
    write_scene_csv,
)
from .model import TraceError, parse_trace
from .scam import interleave_trace, write_datagen_artifact
from .scoring import ScorerError, TableScorer, load_scenario
from .synth import gate_spec, long_spec, random_spec, write_pair

log = logging.getLogger("streamgate.cli")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_TRACE = 3
EXIT_SCORER = 4
EXIT_INTERNAL = 5

_SWEEP_FIELDS = (
    "trace",
    "alpha",
    "window_frames",
    "responses",
    "tim_diff",
    "tim_redun",
    "tim_cover",
    "tok_acc",
    "recompute_ratio",
    "status",
    "error",
)

_EMPTY_REPORT = {
    "tim_diff": None,
    "tim_redun": None,
    "tim_cover": None,
    "tok_acc": None,
    "per_scene": [],
    "judge": None,
}


class UsageError(ValueError):
    pass


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a comma-separated float list: {text!r}") from exc


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a comma-separated int list: {text!r}") from exc


def _add_session_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--pool-size", type=int, default=1, help="caption pool size")
    parser.add_argument("--tokens-per-frame", type=int, default=16)
    parser.add_argument("--fps", type=float, default=3.0)
    parser.add_argument("--context-budget", type=int, default=8192)
    parser.add_argument("--max-caption-len", type=int, default=64)
    parser.add_argument(
        "--scorer", required=True, help="reference:SCENARIO_PATH or bridge:ENDPOINT"
    )
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out-dir", required=True, help="directory for artifacts")
    parser.add_argument("--no-cache", action="store_true", help="disable the streaming cache")
    parser.add_argument(
        "--deviation-reference",
        choices=("anchor", "start"),
        default="anchor",
        help="per-scene reference time for the timing deviation metric",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streamgate",
        description="Streaming response-silence replay harness and data tooling.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    replay = sub.add_parser("replay", help="run one session over a trace")
    replay.add_argument("trace", help="NDJSON trace file")
    replay.add_argument("--alpha", type=float, default=1.03, help="gate threshold factor")
    replay.add_argument("--window-frames", type=int, default=40, help="pruning age window")
    _add_session_flags(replay)

    sweep = sub.add_parser("sweep", help="run a parameter grid into one CSV")
    sweep.add_argument("traces", nargs="+", help="NDJSON trace files")
    sweep.add_argument(
        "--alphas", type=_float_list, default=[1.03], help="comma-separated alpha values"
    )
    sweep.add_argument(
        "--windows", type=_int_list, default=[40], help="comma-separated window sizes"
    )
    sweep.add_argument("--jobs", type=int, default=1, help="parallel trace runs")
    _add_session_flags(sweep)

    datagen = sub.add_parser("datagen", help="build an interleaved training sequence")
    datagen.add_argument("trace", help="NDJSON trace file with tokenized caption pools")
    datagen.add_argument("--out", required=True, help="artifact output path")
    datagen.add_argument("--pool-size", type=int, default=None, help="trim pools before sampling")
    datagen.add_argument("--tokens-per-frame", type=int, default=None)
    datagen.add_argument("--seed", type=int, default=0)

    synth = sub.add_parser("synth", help="generate a synthetic trace + scenario pair")
    synth.add_argument("--out-dir", required=True)
    synth.add_argument("--kind", choices=("gate", "random", "long"), default="gate")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--num-clips", type=int, default=12, help="clips for --kind random")
    synth.add_argument("--total-frames", type=int, default=1800, help="frames for --kind long")
    synth.add_argument("--stem", default="stream", help="output file stem")

    return parser


def _setup_logging() -> None:
    name = os.environ.get("STREAMGATE_LOG", "WARNING").upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(
        level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )


def _fail(code: int, message: str) -> int:
    print(f"streamgate: {message}", file=sys.stderr)
    return code


def _build_scorer(spec: str):
    kind, _, rest = spec.partition(":")
    if kind == "reference" and rest:
        try:
            scenario = load_scenario(rest)
        except OSError as exc:
            raise ScorerError(f"cannot read scenario {rest!r}: {exc}") from exc
        except (ValueError, KeyError, TypeError) as exc:
            raise ScorerError(f"bad scenario {rest!r}: {exc}") from exc
        return TableScorer(scenario)
    if kind == "bridge" and rest:
        try:
            parse_endpoint(rest)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        return BridgeScorer(rest)
    raise UsageError(f"--scorer takes reference:PATH or bridge:ENDPOINT, got {spec!r}")


def _close_scorer(scorer) -> None:
    close = getattr(scorer, "close", None)
    if close is not None:
        close()


def _session_config(args, *, alpha: float, window_frames: int) -> SessionConfig:
    return SessionConfig(
        alpha=alpha,
        tokens_per_frame=args.tokens_per_frame,
        window_frames=window_frames,
        fps=args.fps,
        context_budget=args.context_budget,
        pool_size=args.pool_size,
        max_caption_len=args.max_caption_len,
        seed=args.seed,
        cache_enabled=not args.no_cache,
    )


def _drive(config: SessionConfig, scorer, frames):
    """Run one session to completion with a single prune-and-retry per overflow."""
    session = init_session(config, scorer)
    for frame in frames:
        try:
            session.ingest_frame(frame)
        except ContextBudgetExceeded:
            event = session.prune_memory(frame.timestamp_s)
            log.info(
                "pruned %d frames at t=%.3f", len(event["pruned_frames"]), frame.timestamp_s
            )
            session.ingest_frame(frame)  # a second overflow is not recoverable
    stats = session.cache_stats()
    violations = session.consistency_violations()
    response_log = session.finalize()
    return session, response_log, stats, violations


def _judge_block(response_log, timeline) -> dict | None:
    """Stub judge over each pooled scene's first response, averaged per dimension."""
    judge = StubJudge()
    totals = {name: 0.0 for name in SEMANTIC_DIMENSIONS}
    scored = 0
    for clip in timeline.clips:
        pool = clip.token_pool
        if not pool or not pool[0]:
            continue
        event = next(
            (e for e in response_log.events if clip.t_start <= e.t_s < clip.t_end), None
        )
        if event is None:
            continue
        response_text = " ".join(str(t) for t in event.tokens)
        reference_text = " ".join(str(t) for t in pool[0])
        result = judge.score(response_text, reference_text)
        for name, value in result.dimensions.items():
            totals[name] += value
        scored += 1
    if scored == 0:
        return None
    return {
        "dimensions": {name: total / scored for name, total in totals.items()},
        "mean": sum(totals.values()) / (scored * len(totals)),
        "scenes_scored": scored,
    }


def _write_replay_artifacts(
    out_dir: Path, session, response_log, timeline, stats, violations, deviation_reference
) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "events.ndjson", "w", encoding="utf-8") as fh:
        for event in session.events:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
    responses = [
        {"t_s": e.t_s, "tokens": list(e.tokens), "clip_hint": e.clip_hint}
        for e in response_log.events
    ]
    with open(out_dir / "responses.json", "w", encoding="utf-8") as fh:
        json.dump({"responses": responses}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if timeline.clips:
        report = build_report(
            response_log,
            timeline,
            tok_acc=response_token_accuracy(response_log, timeline),
            judge=_judge_block(response_log, timeline),
            deviation_reference=deviation_reference,
        )
    else:
        report = dict(_EMPTY_REPORT)
    write_report_json(out_dir / "report.json", report)
    write_scene_csv(out_dir / "scenes.csv", report["per_scene"])
    with open(out_dir / "cache_stats.json", "w", encoding="utf-8") as fh:
        json.dump({"stats": stats, "violations": violations}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report


def _run_replay(args) -> int:
    try:
        config = _session_config(args, alpha=args.alpha, window_frames=args.window_frames)
        config.validate()
    except ConfigError as exc:
        return _fail(EXIT_USAGE, f"invalid configuration: {exc}")
    trace_path = Path(args.trace)
    if not trace_path.is_file():
        return _fail(EXIT_USAGE, f"trace file not found: {trace_path}")
    try:
        frames, timeline = parse_trace(trace_path, tokens_per_frame=config.tokens_per_frame)
    except TraceError as exc:
        return _fail(EXIT_TRACE, f"cannot parse trace {trace_path}: {exc}")
    try:
        scorer = _build_scorer(args.scorer)
    except UsageError as exc:
        return _fail(EXIT_USAGE, str(exc))
    except ScorerError as exc:
        return _fail(EXIT_SCORER, str(exc))
    try:
        session, response_log, stats, violations = _drive(config, scorer, frames)
    except ScorerError as exc:
        return _fail(EXIT_SCORER, f"scorer failed mid-stream: {exc}")
    except ContextBudgetExceeded as exc:
        return _fail(EXIT_INTERNAL, f"context budget still exceeded after pruning: {exc}")
    except EngineInvariantError as exc:
        return _fail(EXIT_INTERNAL, f"invariant violation: {exc}")
    finally:
        _close_scorer(scorer)
    report = _write_replay_artifacts(
        Path(args.out_dir),
        session,
        response_log,
        timeline,
        stats,
        violations,
        args.deviation_reference,
    )
    print(
        f"replayed {len(frames)} frames -> {len(response_log.events)} responses; "
        f"artifacts in {args.out_dir}"
    )
    if report["tim_diff"] is not None:
        print(
            f"tim_diff={report['tim_diff']:.6g} tim_redun={report['tim_redun']:.6g} "
            f"tim_cover={report['tim_cover']:.6g}"
        )
    return EXIT_OK


def _sweep_cell(args, trace: str, alpha: float, window: int) -> dict:
    row = {
        "trace": trace,
        "alpha": alpha,
        "window_frames": window,
        "responses": "",
        "tim_diff": "",
        "tim_redun": "",
        "tim_cover": "",
        "tok_acc": "",
        "recompute_ratio": "",
        "status": "failed",
        "error": "",
    }
    scorer = None
    try:
        config = _session_config(args, alpha=alpha, window_frames=window)
        config.validate()
        frames, timeline = parse_trace(trace, tokens_per_frame=config.tokens_per_frame)
        scorer = _build_scorer(args.scorer)
        _, response_log, stats, _ = _drive(config, scorer, frames)
        row["responses"] = len(response_log.events)
        if timeline.clips:
            row["tim_diff"] = tim_diff(
                response_log, timeline, deviation_reference=args.deviation_reference
            )
            row["tim_redun"] = tim_redun(response_log, timeline)
            row["tim_cover"] = tim_cover(response_log, timeline)
            acc = response_token_accuracy(response_log, timeline)
            row["tok_acc"] = "" if acc is None else acc
        if stats is not None:
            row["recompute_ratio"] = stats["recompute_ratio"]
        row["status"] = "ok"
    except Exception as exc:  # in-row capture keeps the sweep going
        row["error"] = " ".join(f"{type(exc).__name__}: {exc}".split())
    finally:
        if scorer is not None:
            _close_scorer(scorer)
    return row


def _run_sweep(args) -> int:
    if not args.alphas or not args.windows:
        return _fail(EXIT_USAGE, "sweep grid is empty")
    for alpha in args.alphas:
        if alpha < 1.0:
            return _fail(EXIT_USAGE, f"alpha must be >= 1, got {alpha}")
    for window in args.windows:
        if window < 1:
            return _fail(EXIT_USAGE, f"window size must be positive, got {window}")
    if args.jobs < 1:
        return _fail(EXIT_USAGE, f"--jobs must be >= 1, got {args.jobs}")
    kind = args.scorer.partition(":")[0]
    if kind not in ("reference", "bridge"):
        return _fail(
            EXIT_USAGE, f"--scorer takes reference:PATH or bridge:ENDPOINT, got {args.scorer!r}"
        )
    grid = [
        (trace, alpha, window)
        for trace in args.traces
        for alpha in args.alphas
        for window in args.windows
    ]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.jobs == 1:
        rows = [_sweep_cell(args, *cell) for cell in grid]
    else:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_sweep_cell, args, *cell) for cell in grid]
            rows = [future.result() for future in futures]
    csv_path = out_dir / "sweep.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_SWEEP_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    failed = sum(1 for r in rows if r["status"] != "ok")
    print(f"swept {len(rows)} runs ({failed} failed) -> {csv_path}")
    return EXIT_OK


def _run_datagen(args) -> int:
    if args.pool_size is not None and args.pool_size < 1:
        return _fail(EXIT_USAGE, f"pool size must be positive, got {args.pool_size}")
    trace_path = Path(args.trace)
    if not trace_path.is_file():
        return _fail(EXIT_USAGE, f"trace file not found: {trace_path}")
    try:
        frames, timeline = parse_trace(trace_path, tokens_per_frame=args.tokens_per_frame)
    except TraceError as exc:
        return _fail(EXIT_TRACE, f"cannot parse trace {trace_path}: {exc}")
    rng = random.Random(derive_substream_seed(args.seed, "pool-sampling"))
    try:
        layout = interleave_trace(frames, timeline, rng, pool_size=args.pool_size)
    except TraceError as exc:
        return _fail(EXIT_TRACE, str(exc))
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_datagen_artifact(out_path, layout)
    print(f"wrote {out_path}: {layout.n} tokens in {len(layout.spans)} spans")
    return EXIT_OK


def _run_synth(args) -> int:
    try:
        if args.kind == "gate":
            spec = gate_spec()
        elif args.kind == "random":
            rng = random.Random(derive_substream_seed(args.seed, "synth"))
            spec = random_spec(rng, num_clips=args.num_clips)
        else:
            rng = random.Random(derive_substream_seed(args.seed, "synth"))
            spec = long_spec(rng, total_frames=args.total_frames)
    except ValueError as exc:
        return _fail(EXIT_USAGE, f"cannot build synthetic spec: {exc}")
    trace_path, scenario_path = write_pair(args.out_dir, spec, stem=args.stem)
    print(f"wrote {trace_path}")
    print(f"wrote {scenario_path}")
    return EXIT_OK


_HANDLERS = {
    "replay": _run_replay,
    "sweep": _run_sweep,
    "datagen": _run_datagen,
    "synth": _run_synth,
}


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    return _HANDLERS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
