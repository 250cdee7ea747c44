"""Domain types for streamed frame/caption sequences plus trace file IO.

A trace is newline-delimited JSON.  Three record types are understood:

    {"type": "frame", "t": <float>, "frame_index": <int>, "tokens": [<int> ...]}
    {"type": "gt_clip", "clip_id": <int>, "t_start": <float>, "t_end": <float>,
     "anchor": <float | null>, "captions": [<str> ...]}
    {"type": "gt_caption_tokens", "clip_id": <int>, "pool": [[<int> ...] ...]}

Unknown record types are skipped with a warning so traces can carry
side-channel data.  Timestamps are float64 seconds; comparisons use an
absolute tolerance of 1e-6 s.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

log = logging.getLogger("streamgate.model")

TIME_EPS = 1e-6


class TraceError(ValueError):
    """Raised for malformed trace files; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TimelineError(TraceError):
    """Ground-truth timeline fails validation (overlap, bad anchor, ...)."""


class TokenKind(Enum):
    FRAME = "frame"
    TEXT = "text"


@dataclass(frozen=True)
class Token:
    id: int
    kind: TokenKind

    def __post_init__(self) -> None:
        if self.id < 0:
            raise ValueError(f"token id must be non-negative, got {self.id}")


def frame_tokens(ids: Iterable[int]) -> tuple[Token, ...]:
    return tuple(Token(i, TokenKind.FRAME) for i in ids)


def text_tokens(ids: Iterable[int]) -> tuple[Token, ...]:
    return tuple(Token(i, TokenKind.TEXT) for i in ids)


def token_ids(tokens: Sequence[Token]) -> list[int]:
    return [t.id for t in tokens]


@dataclass(frozen=True)
class FrameBlock:
    """One video frame's worth of visual tokens."""

    timestamp_s: float
    frame_index: int
    tokens: tuple[Token, ...]

    def __post_init__(self) -> None:
        if self.frame_index < 0:
            raise ValueError(f"frame_index must be non-negative, got {self.frame_index}")
        if not self.tokens:
            raise ValueError("frame must carry at least one token")
        if any(t.kind is not TokenKind.FRAME for t in self.tokens):
            raise ValueError("frame blocks may only carry frame-kind tokens")


@dataclass(frozen=True)
class CaptionBlock:
    """A decoded caption, stamped with the frame time that triggered it."""

    tokens: tuple[Token, ...]
    emitted_at_s: float
    clip_hint: int | None = None

    def __post_init__(self) -> None:
        if not self.tokens:
            raise ValueError("caption must carry at least one token")
        if any(t.kind is not TokenKind.TEXT for t in self.tokens):
            raise ValueError("caption blocks may only carry text-kind tokens")


@dataclass(frozen=True)
class SemanticClip:
    """Ground-truth annotated segment with a pool of paraphrased captions.

    anchor_s is the annotated response time; when the annotation has none
    it defaults to t_start.  The anchor must lie inside [t_start, t_end).
    """

    clip_id: int
    t_start: float
    t_end: float
    anchor_s: float
    caption_pool: tuple[str, ...]
    token_pool: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self) -> None:
        if self.t_end - self.t_start <= TIME_EPS:
            raise TimelineError(
                f"clip {self.clip_id}: empty interval [{self.t_start}, {self.t_end})"
            )
        if not (self.t_start - TIME_EPS <= self.anchor_s < self.t_end):
            raise TimelineError(
                f"clip {self.clip_id}: anchor {self.anchor_s} outside "
                f"[{self.t_start}, {self.t_end})"
            )
        if not self.caption_pool:
            raise TimelineError(f"clip {self.clip_id}: caption pool is empty")
        if self.token_pool is not None:
            if len(self.token_pool) != len(self.caption_pool):
                raise TimelineError(
                    f"clip {self.clip_id}: token pool size {len(self.token_pool)} "
                    f"!= caption pool size {len(self.caption_pool)}"
                )
            for entry in self.token_pool:
                if not entry:
                    raise TimelineError(f"clip {self.clip_id}: empty tokenized caption")
                if any(t < 0 for t in entry):
                    raise TimelineError(f"clip {self.clip_id}: negative token id in pool")

    @property
    def duration_s(self) -> float:
        return self.t_end - self.t_start


@dataclass(frozen=True)
class Timeline:
    """Validated, time-sorted, non-overlapping ground-truth clips."""

    clips: tuple[SemanticClip, ...]


def validate_timeline(clips: Sequence[SemanticClip]) -> Timeline:
    ordered = tuple(sorted(clips, key=lambda c: c.t_start))
    seen_ids: set[int] = set()
    for clip in ordered:
        if clip.clip_id in seen_ids:
            raise TimelineError(f"duplicate clip_id {clip.clip_id}")
        seen_ids.add(clip.clip_id)
    for left, right in zip(ordered, ordered[1:]):
        # Boundary-touching intervals are fine; real overlap is not.
        if right.t_start < left.t_end - TIME_EPS:
            raise TimelineError(
                f"clips {left.clip_id} and {right.clip_id} overlap at "
                f"t={right.t_start}..{min(left.t_end, right.t_end)}"
            )
    return Timeline(clips=ordered)


@dataclass(frozen=True)
class ResponseEvent:
    t_s: float
    tokens: tuple[int, ...]
    clip_hint: int | None = None


@dataclass(frozen=True)
class ResponseLog:
    events: tuple[ResponseEvent, ...]

    @property
    def timestamps(self) -> list[float]:
        return [e.t_s for e in self.events]


class ContextBuffer:
    """Ordered block container with a hard token budget.

    Blocks get a stable integer id on append; ids survive tail swaps and
    deletions so cache bookkeeping can refer to them.  A flat list of
    token ids is maintained incrementally for scorer calls.
    """

    def __init__(self, token_budget: int):
        if token_budget <= 0:
            raise ValueError(f"token budget must be positive, got {token_budget}")
        self.token_budget = token_budget
        self.blocks: list[FrameBlock | CaptionBlock] = []
        self.block_ids: list[int] = []
        self._flat: list[int] = []
        self._next_id = 0

    @property
    def token_count(self) -> int:
        return len(self._flat)

    @property
    def flat_token_ids(self) -> list[int]:
        return self._flat

    def would_fit(self, extra_tokens: int) -> bool:
        return self.token_count + extra_tokens <= self.token_budget

    def append(self, block: FrameBlock | CaptionBlock) -> int:
        if not self.would_fit(len(block.tokens)):
            raise ValueError(
                f"append of {len(block.tokens)} tokens exceeds budget "
                f"{self.token_budget} (have {self.token_count})"
            )
        block_id = self._next_id
        self._next_id += 1
        self.blocks.append(block)
        self.block_ids.append(block_id)
        self._flat.extend(t.id for t in block.tokens)
        return block_id

    def swap_last_two(self) -> tuple[int, int]:
        """Exchange the order of the final two blocks; returns their ids."""
        if len(self.blocks) < 2:
            raise ValueError("need at least two blocks to swap")
        a, b = self.blocks[-2], self.blocks[-1]
        self.blocks[-2], self.blocks[-1] = b, a
        ia, ib = self.block_ids[-2], self.block_ids[-1]
        self.block_ids[-2], self.block_ids[-1] = ib, ia
        tail = len(a.tokens) + len(b.tokens)
        del self._flat[len(self._flat) - tail:]
        self._flat.extend(t.id for t in b.tokens)
        self._flat.extend(t.id for t in a.tokens)
        return ib, ia

    def delete_blocks(self, ids: Iterable[int]) -> None:
        doomed = set(ids)
        if not doomed:
            return
        unknown = doomed - set(self.block_ids)
        if unknown:
            raise ValueError(f"cannot delete unknown block ids {sorted(unknown)}")
        if self.block_ids and self.block_ids[-1] in doomed:
            raise ValueError("refusing to delete the final context block")
        keep = [
            (bid, blk)
            for bid, blk in zip(self.block_ids, self.blocks)
            if bid not in doomed
        ]
        self.block_ids = [bid for bid, _ in keep]
        self.blocks = [blk for _, blk in keep]
        self._flat = [t.id for _, blk in keep for t in blk.tokens]

    def block_start_positions(self) -> list[int]:
        starts = []
        pos = 0
        for blk in self.blocks:
            starts.append(pos)
            pos += len(blk.tokens)
        return starts

    def last_frame_timestamp(self) -> float | None:
        latest = None
        for blk in self.blocks:
            if isinstance(blk, FrameBlock):
                latest = blk.timestamp_s if latest is None else max(latest, blk.timestamp_s)
        return latest


def _require(record: dict, key: str, line: int) -> object:
    if key not in record:
        raise TraceError(f"record is missing required field {key!r}", line)
    return record[key]


def _int_list(value: object, what: str, line: int) -> list[int]:
    if not isinstance(value, list) or not all(
        isinstance(v, int) and not isinstance(v, bool) for v in value
    ):
        raise TraceError(f"{what} must be a list of integers", line)
    return list(value)


def parse_trace(
    path: str | Path,
    *,
    tokens_per_frame: int | None = None,
) -> tuple[list[FrameBlock], Timeline]:
    """Read a trace file; returns time-ordered frames and a validated timeline.

    When tokens_per_frame is given every frame must match it; otherwise the
    first frame fixes the width and later frames must agree.
    """
    frames: list[FrameBlock] = []
    clips: dict[int, dict] = {}
    token_pools: dict[int, tuple[tuple[int, ...], ...]] = {}
    clip_lines: dict[int, int] = {}
    expected_width = tokens_per_frame
    prev_t: float | None = None
    prev_index: int | None = None

    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise TraceError(f"malformed JSON ({exc.msg})", line_no) from exc
            if not isinstance(record, dict):
                raise TraceError("record must be a JSON object", line_no)
            rtype = record.get("type")
            if rtype == "frame":
                t = float(_require(record, "t", line_no))
                index = int(_require(record, "frame_index", line_no))
                ids = _int_list(_require(record, "tokens", line_no), "tokens", line_no)
                if not ids:
                    raise TraceError("frame has no tokens", line_no)
                if any(i < 0 for i in ids):
                    raise TraceError("negative token id", line_no)
                if expected_width is None:
                    expected_width = len(ids)
                elif len(ids) != expected_width:
                    raise TraceError(
                        f"frame carries {len(ids)} tokens, expected {expected_width}",
                        line_no,
                    )
                if prev_t is not None and t <= prev_t + TIME_EPS:
                    raise TraceError(
                        f"frame timestamps must strictly increase "
                        f"({t} after {prev_t})",
                        line_no,
                    )
                if prev_index is not None and index <= prev_index:
                    raise TraceError(
                        f"frame_index must strictly increase ({index} after {prev_index})",
                        line_no,
                    )
                frames.append(FrameBlock(t, index, frame_tokens(ids)))
                prev_t, prev_index = t, index
            elif rtype == "gt_clip":
                clip_id = int(_require(record, "clip_id", line_no))
                if clip_id in clips:
                    raise TraceError(f"duplicate clip_id {clip_id}", line_no)
                captions = _require(record, "captions", line_no)
                if not isinstance(captions, list) or not all(
                    isinstance(c, str) for c in captions
                ):
                    raise TraceError("captions must be a list of strings", line_no)
                clips[clip_id] = {
                    "t_start": float(_require(record, "t_start", line_no)),
                    "t_end": float(_require(record, "t_end", line_no)),
                    "anchor": record.get("anchor"),
                    "captions": tuple(captions),
                }
                clip_lines[clip_id] = line_no
            elif rtype == "gt_caption_tokens":
                clip_id = int(_require(record, "clip_id", line_no))
                pool = _require(record, "pool", line_no)
                if not isinstance(pool, list) or not pool:
                    raise TraceError("pool must be a non-empty list", line_no)
                token_pools[clip_id] = tuple(
                    tuple(_int_list(entry, "pool entry", line_no)) for entry in pool
                )
                if clip_id not in clips:
                    raise TraceError(
                        f"gt_caption_tokens for unknown clip_id {clip_id} "
                        "(must follow its gt_clip record)",
                        line_no,
                    )
            elif rtype is None:
                raise TraceError("record has no 'type' field", line_no)
            else:
                log.warning("skipping unknown trace record type %r at line %d", rtype, line_no)

    built: list[SemanticClip] = []
    for clip_id, spec in clips.items():
        anchor = spec["anchor"]
        anchor_s = float(anchor) if anchor is not None else spec["t_start"]
        try:
            built.append(
                SemanticClip(
                    clip_id=clip_id,
                    t_start=spec["t_start"],
                    t_end=spec["t_end"],
                    anchor_s=anchor_s,
                    caption_pool=spec["captions"],
                    token_pool=token_pools.get(clip_id),
                )
            )
        except TimelineError as exc:
            raise TimelineError(str(exc), clip_lines[clip_id]) from exc
    return frames, validate_timeline(built)


def serialize_trace(
    path: str | Path,
    frames: Sequence[FrameBlock],
    timeline: Timeline,
) -> None:
    """Write the inverse of parse_trace; fields in fixed order for stable bytes."""
    with open(path, "w", encoding="utf-8") as fh:
        for clip in timeline.clips:
            fh.write(
                json.dumps(
                    {
                        "type": "gt_clip",
                        "clip_id": clip.clip_id,
                        "t_start": clip.t_start,
                        "t_end": clip.t_end,
                        "anchor": clip.anchor_s,
                        "captions": list(clip.caption_pool),
                    }
                )
                + "\n"
            )
            if clip.token_pool is not None:
                fh.write(
                    json.dumps(
                        {
                            "type": "gt_caption_tokens",
                            "clip_id": clip.clip_id,
                            "pool": [list(entry) for entry in clip.token_pool],
                        }
                    )
                    + "\n"
                )
        for frame in frames:
            fh.write(
                json.dumps(
                    {
                        "type": "frame",
                        "t": frame.timestamp_s,
                        "frame_index": frame.frame_index,
                        "tokens": token_ids(frame.tokens),
                    }
                )
                + "\n"
            )
