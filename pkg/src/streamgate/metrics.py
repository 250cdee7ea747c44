"""Timing, accuracy, and judge metrics over response logs.

The three timing metrics are macro-averaged per scene.  Scenes are the
validated ground-truth clips; a response belongs to the scene whose
interval contains it.  Responses outside every scene ("orphans") are
charged to the temporally nearest scene: they add their deviation to
that scene's timing difference and count as redundant there, and they
never cover anything.  A missed scene is penalized with its full
duration.

Timing deviation is measured against the scene anchor by default; pass
deviation_reference="start" to measure against scene starts instead.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

from .model import ResponseLog, SemanticClip, Timeline

SEMANTIC_DIMENSIONS = ("accuracy", "quality", "completeness")
FLUENCY_DIMENSIONS = ("logic", "fluency", "conciseness", "consistency", "completeness")

_DEVIATION_REFERENCES = ("anchor", "start")


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class SceneAssignment:
    """Responses bucketed by scene, with out-of-scene responses kept aside."""

    by_scene: tuple[tuple[float, ...], ...]
    orphans: tuple[float, ...]
    orphan_scene: tuple[int, ...]


def _scenes(timeline: Timeline) -> tuple[SemanticClip, ...]:
    if not timeline.clips:
        raise MetricsError("timeline has no scenes")
    return timeline.clips


def _nearest_scene(t: float, clips: Sequence[SemanticClip]) -> int:
    best, best_d = 0, None
    for k, clip in enumerate(clips):
        if t < clip.t_start:
            d = clip.t_start - t
        elif t >= clip.t_end:
            d = t - clip.t_end
        else:
            d = 0.0
        # strict < keeps the earlier scene on ties
        if best_d is None or d < best_d:
            best, best_d = k, d
    return best


def _reference_times(clips: Sequence[SemanticClip], deviation_reference: str) -> list[float]:
    if deviation_reference not in _DEVIATION_REFERENCES:
        raise MetricsError(
            f"deviation_reference must be one of {_DEVIATION_REFERENCES}, "
            f"got {deviation_reference!r}"
        )
    if deviation_reference == "anchor":
        return [c.anchor_s for c in clips]
    return [c.t_start for c in clips]


def assign_responses(log: ResponseLog, timeline: Timeline) -> SceneAssignment:
    clips = _scenes(timeline)
    per: list[list[float]] = [[] for _ in clips]
    orphans: list[float] = []
    orphan_scene: list[int] = []
    for t in log.timestamps:
        for k, clip in enumerate(clips):
            if clip.t_start <= t < clip.t_end:
                per[k].append(t)
                break
        else:
            orphans.append(t)
            orphan_scene.append(_nearest_scene(t, clips))
    return SceneAssignment(
        by_scene=tuple(tuple(x) for x in per),
        orphans=tuple(orphans),
        orphan_scene=tuple(orphan_scene),
    )


def _scene_deviations(
    log: ResponseLog, timeline: Timeline, deviation_reference: str
) -> list[float]:
    clips = _scenes(timeline)
    assignment = assign_responses(log, timeline)
    refs = _reference_times(clips, deviation_reference)
    totals = []
    for k, clip in enumerate(clips):
        hits = assignment.by_scene[k]
        totals.append(sum(abs(t - refs[k]) for t in hits) if hits else clip.duration_s)
    for t, k in zip(assignment.orphans, assignment.orphan_scene):
        totals[k] += abs(t - refs[k])
    return totals


def tim_diff(
    log: ResponseLog, timeline: Timeline, *, deviation_reference: str = "anchor"
) -> float:
    """Mean per-scene absolute response-time deviation, in seconds."""
    totals = _scene_deviations(log, timeline, deviation_reference)
    return sum(totals) / len(totals)


def tim_redun(log: ResponseLog, timeline: Timeline) -> float:
    """Mean count of unnecessary responses per scene."""
    clips = _scenes(timeline)
    assignment = assign_responses(log, timeline)
    extras = [max(0, len(hits) - 1) for hits in assignment.by_scene]
    for k in assignment.orphan_scene:
        extras[k] += 1
    return sum(extras) / len(clips)


def tim_cover(log: ResponseLog, timeline: Timeline) -> float:
    """Fraction of scenes holding at least one response."""
    clips = _scenes(timeline)
    assignment = assign_responses(log, timeline)
    return sum(1 for hits in assignment.by_scene if hits) / len(clips)


def token_accuracy(predicted: Sequence[int], reference: Sequence[int]) -> float:
    """Position-wise match fraction between aligned token sequences."""
    if len(reference) == 0:
        raise MetricsError("reference token sequence is empty")
    if len(predicted) != len(reference):
        raise MetricsError(
            f"prediction of {len(predicted)} tokens does not align with "
            f"reference of {len(reference)}"
        )
    return sum(1 for p, r in zip(predicted, reference) if p == r) / len(reference)


def otg_localize(ppl_series: Sequence[float], window_len: int) -> tuple[int, int]:
    """Fixed-length window with the lowest mean value; earliest on ties."""
    if window_len < 1:
        raise MetricsError(f"window length must be positive, got {window_len}")
    n = len(ppl_series)
    if n < window_len:
        raise MetricsError(f"series of {n} frames is shorter than window {window_len}")
    best_start = 0
    best_mean = sum(ppl_series[0:window_len]) / window_len
    for i in range(1, n - window_len + 1):
        mean = sum(ppl_series[i:i + window_len]) / window_len
        if mean < best_mean:
            best_start, best_mean = i, mean
    return best_start, best_start + window_len


# -- judge ------------------------------------------------------------


@dataclass(frozen=True)
class JudgeScore:
    dimensions: dict[str, float]
    mean: float


class JudgeClient(Protocol):
    """Anything that can grade a response text against a reference text."""

    def score(
        self, response: str, reference: str, dimensions: Sequence[str]
    ) -> JudgeScore:
        ...


def overlap_f1(response: str, reference: str) -> float:
    """Set-based token F1 over whitespace tokens, in [0, 1]."""
    ref_tokens = set(reference.split())
    if not ref_tokens:
        raise MetricsError("reference text is empty")
    resp_tokens = set(response.split())
    hits = len(ref_tokens & resp_tokens)
    if hits == 0:
        return 0.0
    precision = hits / len(resp_tokens)
    recall = hits / len(ref_tokens)
    return 2.0 * precision * recall / (precision + recall)


class StubJudge:
    """Deterministic stand-in with the same shape as a remote judge.

    Every dimension receives the identical overlap-F1 score scaled to
    0..10, so reports carry complete judge blocks without any model in
    the loop.
    """

    def score(
        self, response: str, reference: str, dimensions: Sequence[str] = SEMANTIC_DIMENSIONS
    ) -> JudgeScore:
        value = overlap_f1(response, reference) * 10.0
        return JudgeScore(dimensions={name: value for name in dimensions}, mean=value)


def judge_stub_score(
    response: str, reference: str, dimensions: Sequence[str] = SEMANTIC_DIMENSIONS
) -> JudgeScore:
    return StubJudge().score(response, reference, dimensions)


# -- harness-level aggregation ---------------------------------------


def _match_count(predicted: Sequence[int], reference: Sequence[int]) -> int:
    return sum(1 for p, r in zip(predicted, reference) if p == r)


def response_token_accuracy(log: ResponseLog, timeline: Timeline) -> float | None:
    """Micro-averaged token match between responses and ground-truth pools.

    For every scene carrying a tokenized caption pool, the scene's first
    response is compared against its best-matching pool entry; positions
    past the shorter sequence count as wrong and the denominator is the
    reference length.  A pooled scene with no response counts fully
    wrong.  Returns None when no scene has a pool.
    """
    clips = _scenes(timeline)
    first_response: dict[int, tuple[int, ...]] = {}
    for event in log.events:
        for k, clip in enumerate(clips):
            if clip.t_start <= event.t_s < clip.t_end:
                first_response.setdefault(k, event.tokens)
                break
    matched = 0
    total = 0
    for k, clip in enumerate(clips):
        if clip.token_pool is None:
            continue
        predicted = first_response.get(k)
        if predicted is None:
            total += len(clip.token_pool[0])
            continue
        best_entry = clip.token_pool[0]
        best_frac = _match_count(predicted, best_entry) / len(best_entry)
        for entry in clip.token_pool[1:]:
            frac = _match_count(predicted, entry) / len(entry)
            if frac > best_frac:
                best_entry, best_frac = entry, frac
        matched += _match_count(predicted, best_entry)
        total += len(best_entry)
    if total == 0:
        return None
    return matched / total


def scene_rows(
    log: ResponseLog, timeline: Timeline, *, deviation_reference: str = "anchor"
) -> list[dict]:
    clips = _scenes(timeline)
    assignment = assign_responses(log, timeline)
    deviations = _scene_deviations(log, timeline, deviation_reference)
    extras = [max(0, len(hits) - 1) for hits in assignment.by_scene]
    for k in assignment.orphan_scene:
        extras[k] += 1
    rows = []
    for k, clip in enumerate(clips):
        rows.append(
            {
                "clip_id": clip.clip_id,
                "t_start": clip.t_start,
                "t_end": clip.t_end,
                "anchor_s": clip.anchor_s,
                "responses": len(assignment.by_scene[k]),
                "redundant": extras[k],
                "deviation_s": deviations[k],
                "covered": int(bool(assignment.by_scene[k])),
            }
        )
    return rows


def build_report(
    log: ResponseLog,
    timeline: Timeline,
    *,
    tok_acc: float | None = None,
    judge: dict | None = None,
    deviation_reference: str = "anchor",
) -> dict:
    return {
        "tim_diff": tim_diff(log, timeline, deviation_reference=deviation_reference),
        "tim_redun": tim_redun(log, timeline),
        "tim_cover": tim_cover(log, timeline),
        "tok_acc": tok_acc,
        "per_scene": scene_rows(log, timeline, deviation_reference=deviation_reference),
        "judge": judge,
    }


_SCENE_CSV_FIELDS = (
    "clip_id",
    "t_start",
    "t_end",
    "anchor_s",
    "responses",
    "redundant",
    "deviation_s",
    "covered",
)


def write_report_json(path: str | Path, report: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_scene_csv(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_SCENE_CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
