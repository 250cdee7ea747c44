"""Interleaved frame/caption training sequences and their attention mask.

Training sequences interleave, per clip, one frame block then one caption
span per turn; the caption after a clip's last frame is flagged clip-final.
The streaming mask starts causal and additionally blocks every caption key
that is (a) a non-final caption of an earlier clip or (b) any caption of
the query's own clip other than the query's own span.  Frame queries obey
the same caption blocking as caption queries of their clip, so a clip's
final caption stays invisible inside its own clip until the clip is over.

Masks are stored dense (boolean matrix) up to 4096 positions and as
little-endian bit-packed rows above that.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import FrameBlock, Timeline, TraceError

log = logging.getLogger("streamgate.scam")

DENSE_LIMIT = 4096


class SpanKind(Enum):
    FRAME = "frame"
    CAPTION = "caption"


@dataclass(frozen=True)
class Span:
    kind: SpanKind
    clip_ordinal: int
    clip_final: bool
    start: int
    end: int

    def __post_init__(self) -> None:
        if self.end <= self.start:
            raise ValueError(f"span [{self.start}, {self.end}) is empty")
        if self.clip_final and self.kind is not SpanKind.CAPTION:
            raise ValueError("only caption spans can be clip-final")

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class SequenceLayout:
    spans: tuple[Span, ...]
    tokens: tuple[int, ...]

    def __post_init__(self) -> None:
        pos = 0
        for span in self.spans:
            if span.start != pos:
                raise ValueError(f"span starting at {span.start} leaves a gap at {pos}")
            pos = span.end
        if pos != len(self.tokens):
            raise ValueError(f"spans cover {pos} tokens but layout has {len(self.tokens)}")

    @property
    def n(self) -> int:
        return len(self.tokens)

    def span_of(self, position: int) -> Span:
        for span in self.spans:
            if span.start <= position < span.end:
                return span
        raise IndexError(f"position {position} outside layout of {self.n} tokens")


@dataclass(frozen=True)
class ClipTurns:
    """Per-clip datagen input: one caption (possibly resampled) per frame turn."""

    frames: tuple[tuple[int, ...], ...]
    captions: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        if not self.frames:
            raise ValueError("clip needs at least one frame")
        if len(self.captions) != len(self.frames):
            raise ValueError(
                f"{len(self.captions)} captions for {len(self.frames)} frames"
            )
        if any(len(f) == 0 for f in self.frames) or any(len(c) == 0 for c in self.captions):
            raise ValueError("frames and captions must be non-empty token sequences")

    @staticmethod
    def from_single_caption(
        frames: Sequence[Sequence[int]], caption: Sequence[int]
    ) -> "ClipTurns":
        return ClipTurns(
            frames=tuple(tuple(f) for f in frames),
            captions=tuple(tuple(caption) for _ in frames),
        )


def sample_caption(pool: Sequence[Sequence[int]], rng) -> list[int]:
    """Uniform draw from a tokenized caption pool: one randrange call."""
    if not pool:
        raise ValueError("caption pool is empty")
    return list(pool[rng.randrange(len(pool))])


def build_interleaved_sequence(clips: Sequence[ClipTurns]) -> SequenceLayout:
    if not clips:
        raise ValueError("need at least one clip")
    spans: list[Span] = []
    tokens: list[int] = []
    for ordinal, clip in enumerate(clips):
        last_turn = len(clip.frames) - 1
        for turn, (frame, caption) in enumerate(zip(clip.frames, clip.captions)):
            start = len(tokens)
            tokens.extend(frame)
            spans.append(Span(SpanKind.FRAME, ordinal, False, start, len(tokens)))
            start = len(tokens)
            tokens.extend(caption)
            spans.append(
                Span(SpanKind.CAPTION, ordinal, turn == last_turn, start, len(tokens))
            )
    return SequenceLayout(spans=tuple(spans), tokens=tuple(tokens))


class AttentionMask:
    """Boolean visibility per (query, key); dense or bit-packed rows."""

    def __init__(self, n: int, dense: np.ndarray | None = None, packed: np.ndarray | None = None):
        if (dense is None) == (packed is None):
            raise ValueError("exactly one of dense/packed must be given")
        self.n = n
        self._dense = dense
        self._packed = packed
        if dense is not None and dense.shape != (n, n):
            raise ValueError(f"dense mask shape {dense.shape} != ({n}, {n})")
        if packed is not None and packed.shape != (n, (n + 7) // 8):
            raise ValueError(f"packed mask shape {packed.shape} inconsistent with n={n}")

    @property
    def row_bytes(self) -> int:
        return (self.n + 7) // 8

    def is_allowed(self, q: int, k: int) -> bool:
        if self._dense is not None:
            return bool(self._dense[q, k])
        byte = self._packed[q, k // 8]
        return bool((byte >> (k % 8)) & 1)

    def row(self, q: int) -> np.ndarray:
        if self._dense is not None:
            return self._dense[q].copy()
        return np.unpackbits(self._packed[q], bitorder="little")[: self.n].astype(bool)

    def to_dense(self) -> np.ndarray:
        if self._dense is not None:
            return self._dense.copy()
        bits = np.unpackbits(self._packed, axis=1, bitorder="little")[:, : self.n]
        return bits.astype(bool)

    def packed_rows(self) -> np.ndarray:
        """Row-major bit-packed mask, little-endian within each byte."""
        if self._packed is not None:
            return self._packed.copy()
        return np.packbits(self._dense, axis=1, bitorder="little")


def _layout_arrays(layout: SequenceLayout) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    n = layout.n
    span_id = np.empty(n, dtype=np.int64)
    clip = np.empty(n, dtype=np.int64)
    is_caption = np.zeros(n, dtype=bool)
    is_final_caption = np.zeros(n, dtype=bool)
    for idx, span in enumerate(layout.spans):
        span_id[span.start : span.end] = idx
        clip[span.start : span.end] = span.clip_ordinal
        if span.kind is SpanKind.CAPTION:
            is_caption[span.start : span.end] = True
            if span.clip_final:
                is_final_caption[span.start : span.end] = True
    return span_id, clip, is_caption, is_final_caption


def build_scam_mask(layout: SequenceLayout, representation: str | None = None) -> AttentionMask:
    """Construct the streaming mask for a layout.

    representation: None picks dense up to DENSE_LIMIT positions and
    bit-packed rows above; "dense"/"packed" force one.
    """
    n = layout.n
    if representation is None:
        representation = "dense" if n <= DENSE_LIMIT else "packed"
    if representation not in ("dense", "packed"):
        raise ValueError(f"unknown mask representation {representation!r}")
    span_id, clip, is_caption, is_final_caption = _layout_arrays(layout)
    cols = np.arange(n)

    def rows_for(q_lo: int, q_hi: int) -> np.ndarray:
        q = np.arange(q_lo, q_hi)
        causal = cols[None, :] <= q[:, None]
        earlier_final = is_final_caption[None, :] & (clip[None, :] < clip[q, None])
        own_span = span_id[None, :] == span_id[q, None]
        return causal & (~is_caption[None, :] | earlier_final | own_span)

    if representation == "dense":
        return AttentionMask(n, dense=rows_for(0, n))
    packed = np.empty((n, (n + 7) // 8), dtype=np.uint8)
    chunk = 512
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        packed[lo:hi] = np.packbits(rows_for(lo, hi), axis=1, bitorder="little")
    return AttentionMask(n, packed=packed)


def build_loss_mask(layout: SequenceLayout) -> np.ndarray:
    """True exactly on caption positions: loss is taken on captions only."""
    _, _, is_caption, _ = _layout_arrays(layout)
    return is_caption


def interleave_trace(
    frames: Sequence[FrameBlock],
    timeline: Timeline,
    rng,
    pool_size: int | None = None,
) -> SequenceLayout:
    """Datagen assembly: group trace frames by clip, sample one caption per turn.

    Every clip must own at least one frame; frames outside all clips are
    skipped with a warning.  pool_size trims each tokenized pool to its
    first entries before sampling (pool_size 1 makes sampling a no-op).
    """
    clips: list[ClipTurns] = []
    cursor = 0
    for clip in timeline.clips:
        if clip.token_pool is None:
            raise TraceError(f"clip {clip.clip_id} has no tokenized caption pool")
        while cursor < len(frames) and frames[cursor].timestamp_s < clip.t_start - 1e-6:
            log.warning(
                "frame %d at t=%s is outside every clip; skipping",
                frames[cursor].frame_index,
                frames[cursor].timestamp_s,
            )
            cursor += 1
        clip_frames: list[tuple[int, ...]] = []
        while cursor < len(frames) and frames[cursor].timestamp_s < clip.t_end - 1e-6:
            clip_frames.append(tuple(t.id for t in frames[cursor].tokens))
            cursor += 1
        if not clip_frames:
            raise TraceError(f"clip {clip.clip_id} has no frames in the trace")
        pool = clip.token_pool if pool_size is None else clip.token_pool[:pool_size]
        if not pool:
            raise TraceError(f"clip {clip.clip_id}: pool_size {pool_size} leaves no captions")
        captions = tuple(tuple(sample_caption(pool, rng)) for _ in clip_frames)
        clips.append(ClipTurns(frames=tuple(clip_frames), captions=captions))
    for frame in frames[cursor:]:
        log.warning(
            "frame %d at t=%s is outside every clip; skipping",
            frame.frame_index,
            frame.timestamp_s,
        )
    return build_interleaved_sequence(clips)


ARTIFACT_FORMAT = "streamgate-scam-datagen"


def write_datagen_artifact(path: str | Path, layout: SequenceLayout) -> None:
    """One JSON header line plus binary payload; see docs/formats.md.

    Sections, in payload order: token ids as uint32 little-endian; the
    streaming mask as row-major bit-packed rows (little-endian within each
    byte); the loss mask bit-packed the same way.  Offsets are relative to
    the first byte after the header's terminating newline.
    """
    n = layout.n
    if any(t < 0 or t >= 1 << 32 for t in layout.tokens):
        raise ValueError("token ids must fit in uint32 for the artifact encoding")
    mask = build_scam_mask(layout)
    loss = build_loss_mask(layout)
    tokens_bytes = np.asarray(layout.tokens, dtype="<u4").tobytes()
    mask_bytes = mask.packed_rows().tobytes()
    loss_bytes = np.packbits(loss, bitorder="little").tobytes()
    row_bytes = mask.row_bytes
    header = {
        "format": ARTIFACT_FORMAT,
        "version": 1,
        "total_tokens": n,
        "spans": [
            {
                "kind": span.kind.value,
                "clip": span.clip_ordinal,
                "clip_final": span.clip_final,
                "start": span.start,
                "end": span.end,
            }
            for span in layout.spans
        ],
        "sections": [
            {
                "name": "tokens",
                "dtype": "uint32le",
                "count": n,
                "offset": 0,
                "nbytes": len(tokens_bytes),
            },
            {
                "name": "scam_mask",
                "encoding": "bitpacked-rows-le",
                "rows": n,
                "row_bytes": row_bytes,
                "offset": len(tokens_bytes),
                "nbytes": len(mask_bytes),
            },
            {
                "name": "loss_mask",
                "encoding": "bitpacked-le",
                "count": n,
                "offset": len(tokens_bytes) + len(mask_bytes),
                "nbytes": len(loss_bytes),
            },
        ],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(tokens_bytes)
        fh.write(mask_bytes)
        fh.write(loss_bytes)


def read_datagen_artifact(path: str | Path) -> tuple[SequenceLayout, AttentionMask, np.ndarray, dict]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format") != ARTIFACT_FORMAT:
        raise ValueError(f"{path}: not a datagen artifact")
    n = header["total_tokens"]
    sections = {s["name"]: s for s in header["sections"]}

    def section_bytes(name: str) -> bytes:
        s = sections[name]
        return payload[s["offset"] : s["offset"] + s["nbytes"]]

    tokens = np.frombuffer(section_bytes("tokens"), dtype="<u4")
    row_bytes = sections["scam_mask"]["row_bytes"]
    packed = np.frombuffer(section_bytes("scam_mask"), dtype=np.uint8).reshape(n, row_bytes)
    mask = AttentionMask(n, packed=packed.copy())
    loss_bits = np.frombuffer(section_bytes("loss_mask"), dtype=np.uint8)
    loss = np.unpackbits(loss_bits, bitorder="little")[:n].astype(bool)
    spans = tuple(
        Span(
            kind=SpanKind(s["kind"]),
            clip_ordinal=s["clip"],
            clip_final=s["clip_final"],
            start=s["start"],
            end=s["end"],
        )
        for s in header["spans"]
    )
    layout = SequenceLayout(spans=spans, tokens=tuple(int(t) for t in tokens))
    return layout, mask, loss, header
