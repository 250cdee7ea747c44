"""Peak-end retention: probabilistic pruning of old, unremarkable frames.

Frames older than the retention window are deleted with probability

    p = p_max * rel * agefac
    rel = (frame_ppl - clip_min) / (clip_max - clip_min + 1e-9)
    agefac = min(1, (age_frames - W) / W)
    age_frames = (now_s - timestamp_s) * fps

so a clip's most surprising old frames go first and its calmest frames
linger.  Protected records (clip-final captions are never candidates at
all; the per-clip minimum-perplexity keyframe of each completed clip is
marked protected) always survive.  Frames recorded before any caption
existed have no perplexity; they count as maximally deletable (rel 1).
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import ContextBuffer

P_MAX_DEFAULT = 0.9
REL_EPS = 1e-9


@dataclass
class MemoryRecord:
    """Retention metadata for one frame block living in the context."""

    block_id: int
    frame_index: int
    timestamp_s: float
    clip_id: int
    frame_ppl: float | None
    protected: bool = False


def deletion_probability(
    record: MemoryRecord,
    *,
    now_s: float,
    window_frames: int,
    fps: float,
    clip_ppl_min: float,
    clip_ppl_max: float,
    p_max: float = P_MAX_DEFAULT,
) -> float:
    if record.protected:
        return 0.0
    age_frames = (now_s - record.timestamp_s) * fps
    if age_frames <= window_frames:
        return 0.0
    if record.frame_ppl is None:
        rel = 1.0
    else:
        rel = (record.frame_ppl - clip_ppl_min) / (clip_ppl_max - clip_ppl_min + REL_EPS)
    agefac = min(1.0, (age_frames - window_frames) / window_frames)
    return p_max * rel * agefac


def clip_ppl_extremes(records: list[MemoryRecord]) -> dict[int, tuple[float, float]]:
    extremes: dict[int, tuple[float, float]] = {}
    for record in records:
        if record.frame_ppl is None:
            continue
        lo, hi = extremes.get(record.clip_id, (record.frame_ppl, record.frame_ppl))
        extremes[record.clip_id] = (min(lo, record.frame_ppl), max(hi, record.frame_ppl))
    return extremes


def prune(
    ctx: ContextBuffer,
    records: list[MemoryRecord],
    *,
    now_s: float,
    window_frames: int,
    fps: float,
    rng,
    p_max: float = P_MAX_DEFAULT,
) -> list[MemoryRecord]:
    """Delete old frames from ctx in place; returns the deleted records.

    Candidates are visited in ascending timestamp order and each consumes
    exactly one uniform draw (even at probability zero), so a fixed rng
    seed fixes the outcome.  The buffer's final block is never a
    candidate, and caption blocks carry no records so they are never
    deleted.  Survivor order is preserved.
    """
    extremes = clip_ppl_extremes(records)
    tail_id = ctx.block_ids[-1] if ctx.block_ids else None
    deleted: list[MemoryRecord] = []
    for record in sorted(records, key=lambda r: (r.timestamp_s, r.block_id)):
        if record.block_id == tail_id:
            continue
        lo, hi = extremes.get(record.clip_id, (0.0, 0.0))
        p = deletion_probability(
            record,
            now_s=now_s,
            window_frames=window_frames,
            fps=fps,
            clip_ppl_min=lo,
            clip_ppl_max=hi,
            p_max=p_max,
        )
        if rng.random() < p:
            deleted.append(record)
    if deleted:
        ctx.delete_blocks([r.block_id for r in deleted])
    return deleted
