"""Synthesizers for matched trace/scenario pairs.

A pair is a trace file the engine can replay plus a scenario file whose
scripted scorer reacts to it.  Frame tokens carry their clip marker and
global frame index so the scorer's clip script can recognize where the
stream is; ground-truth clips carry the very caption tokens the script
decodes, so timing and accuracy metrics have exact targets.

With a globally constant in-clip probability the verification ratio
inside a clip is exactly 1, so (at zero jitter) a session redecodes
precisely at the clip boundaries whose probability ratio exceeds alpha,
independent of earlier decisions.  boundary_fires/expected_response_count
spell that out for tests and sweeps.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from pathlib import Path

from .model import FrameBlock, SemanticClip, Timeline, frame_tokens, serialize_trace, validate_timeline
from .scoring import (
    MAX_FRAME_INDEX,
    ClipScript,
    Scenario,
    ScoreResult,
    ScorerConfig,
    perplexity,
    save_scenario,
)

EOS_TOKEN = 0
FILLER_TOKEN = 1
FRAME_MARKER_BASE = 8


@dataclass(frozen=True)
class SynthSpec:
    """Full description of one synthetic stream and its scripted scorer."""

    frames_per_clip: tuple[int, ...]
    p_out: tuple[float, ...]
    p_in: float = 0.9
    fps: float = 3.0
    tokens_per_frame: int = 16
    caption_len: int = 8
    pool_size: int = 1
    jitter_amp: float = 0.0

    def __post_init__(self) -> None:
        if not self.frames_per_clip:
            raise ValueError("need at least one clip")
        if any(n < 1 for n in self.frames_per_clip):
            raise ValueError("every clip needs at least one frame")
        if len(self.p_out) != len(self.frames_per_clip):
            raise ValueError("p_out must carry one value per clip")
        for p in (self.p_in, *self.p_out):
            if not (0.0 < p <= 1.0):
                raise ValueError(f"token probability {p} outside (0, 1]")
        if self.tokens_per_frame < 2:
            raise ValueError("frames need room for a clip marker and a frame index")
        if self.caption_len < 1 or self.pool_size < 1:
            raise ValueError("caption_len and pool_size must be positive")
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        if self.total_frames > MAX_FRAME_INDEX:
            raise ValueError(f"{self.total_frames} frames exceed the indexable range")

    @property
    def num_clips(self) -> int:
        return len(self.frames_per_clip)

    @property
    def total_frames(self) -> int:
        return sum(self.frames_per_clip)

    @property
    def frame_index_base(self) -> int:
        return FRAME_MARKER_BASE + self.num_clips

    @property
    def caption_base(self) -> int:
        return self.frame_index_base + MAX_FRAME_INDEX

    @property
    def vocab_size(self) -> int:
        return self.caption_base + self.num_clips * self.caption_len


def clip_of_frame(spec: SynthSpec, frame_index: int) -> int:
    remaining = frame_index
    for clip, count in enumerate(spec.frames_per_clip):
        if remaining < count:
            return clip
        remaining -= count
    raise ValueError(f"frame {frame_index} beyond the stream of {spec.total_frames}")


def build_frames(spec: SynthSpec) -> list[FrameBlock]:
    frames = []
    fi = 0
    for clip, count in enumerate(spec.frames_per_clip):
        for _ in range(count):
            ids = [FRAME_MARKER_BASE + clip, spec.frame_index_base + fi]
            ids.extend([FILLER_TOKEN] * (spec.tokens_per_frame - 2))
            frames.append(FrameBlock(fi / spec.fps, fi, frame_tokens(ids)))
            fi += 1
    return frames


def caption_tokens(spec: SynthSpec, clip: int) -> list[int]:
    start = spec.caption_base + clip * spec.caption_len
    return list(range(start, start + spec.caption_len))


def build_timeline(spec: SynthSpec) -> Timeline:
    clips = []
    first = 0
    for clip, count in enumerate(spec.frames_per_clip):
        t_start = first / spec.fps
        t_end = (first + count) / spec.fps
        tokens = tuple(caption_tokens(spec, clip))
        clips.append(
            SemanticClip(
                clip_id=clip,
                t_start=t_start,
                t_end=t_end,
                anchor_s=t_start,
                caption_pool=tuple(
                    f"clip {clip} caption {j}" for j in range(spec.pool_size)
                ),
                token_pool=tuple(tokens for _ in range(spec.pool_size)),
            )
        )
        first += count
    return validate_timeline(clips)


def build_scenario(spec: SynthSpec) -> Scenario:
    script = ClipScript(
        frame_marker_base=FRAME_MARKER_BASE,
        frame_index_base=spec.frame_index_base,
        caption_base=spec.caption_base,
        caption_len=spec.caption_len,
        tokens_per_frame=spec.tokens_per_frame,
        num_clips=spec.num_clips,
        lp_in=tuple([math.log(spec.p_in)] * spec.num_clips),
        lp_out=tuple(math.log(p) for p in spec.p_out),
        jitter_amp=spec.jitter_amp,
    )
    config = ScorerConfig(
        vocab_size=spec.vocab_size,
        eos_token=EOS_TOKEN,
        max_generation_len=max(64, spec.caption_len),
    )
    return Scenario(config=config, clip_script=script)


def write_pair(out_dir: str | Path, spec: SynthSpec, stem: str = "stream") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trace_path = out / f"{stem}.trace.ndjson"
    scenario_path = out / f"{stem}.scenario.json"
    serialize_trace(trace_path, build_frames(spec), build_timeline(spec))
    save_scenario(scenario_path, build_scenario(spec))
    return trace_path, scenario_path


def boundary_fires(spec: SynthSpec, alpha: float) -> list[bool]:
    """Whether each clip boundary (entry into clip c >= 1) triggers a decode.

    Valid at jitter_amp 0: replicates the engine's comparison float for
    float, using a reference decoded at the constant in-clip probability.
    """
    lp_in = math.log(spec.p_in)
    ref = perplexity(ScoreResult((lp_in,) * spec.caption_len))
    fires = [True]  # clip 0 begins with the initial decode
    for clip in range(1, spec.num_clips):
        lp_out = math.log(spec.p_out[clip])
        verify = perplexity(ScoreResult((lp_out,) * spec.caption_len))
        fires.append(verify > alpha * ref)
    return fires


def expected_response_count(spec: SynthSpec, alpha: float) -> int:
    return sum(boundary_fires(spec, alpha))


def gate_spec() -> SynthSpec:
    """Two six-frame clips whose boundary ratio 0.9/0.5 always fires."""
    return SynthSpec(frames_per_clip=(6, 6), p_out=(0.5, 0.5))


def random_spec(
    rng: random.Random,
    *,
    num_clips: int = 12,
    frames_per_clip_range: tuple[int, int] = (3, 9),
    p_out_range: tuple[float, float] = (0.45, 0.9),
) -> SynthSpec:
    """Boundary ratios spread over (1, 2): responsive to an alpha sweep."""
    lo, hi = frames_per_clip_range
    return SynthSpec(
        frames_per_clip=tuple(rng.randint(lo, hi) for _ in range(num_clips)),
        p_out=tuple(rng.uniform(*p_out_range) for _ in range(num_clips)),
    )


def long_spec(rng: random.Random, *, total_frames: int = 1800) -> SynthSpec:
    """A pruning-scale stream with mild per-frame perplexity spread.

    jitter keeps every in-clip ratio under exp(0.02) < 1.03, so the
    default gate stays silent inside clips while pruning sees distinct
    per-frame perplexities.
    """
    counts: list[int] = []
    while sum(counts) < total_frames:
        counts.append(min(rng.randint(8, 14), total_frames - sum(counts)))
    return SynthSpec(
        frames_per_clip=tuple(counts),
        p_out=tuple(rng.uniform(0.45, 0.85) for _ in counts),
        jitter_amp=0.02,
    )
