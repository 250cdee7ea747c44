"""Scorer contract, perplexity, and the deterministic reference scorer.

Perplexity of a continuation is the N-th root of the inverse conditional
probability, computed in natural-log space:

    ppl = exp(-(1/N) * sum(logprobs))

The reference scorer is scenario-file driven and fully deterministic.  A
scenario resolves each (context, token) pair through three layers, first
match wins:

1. an explicit table mapping (context fingerprint, token) -> logprob,
   where the fingerprint is 64-bit FNV-1a over the context token ids;
2. an optional clip script: contexts whose most recent frame block names
   a clip get caption-token logprobs from per-clip in/out tables, with an
   optional deterministic per-frame jitter;
3. a fallback, either a flat logprob (uniform over the vocabulary) or a
   fingerprint-hash spread over a logprob interval.

All logprobs in a scenario file are stored in log domain so that an
out-of-process scorer in another language reproduces them bit-for-bit
without having to match this interpreter's transcendental functions.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

from .hashing import FNV64_OFFSET, fingerprint_step, fingerprint_tokens

log = logging.getLogger("streamgate.scoring")

# Weyl-style integer mix for per-frame jitter; exact in IEEE doubles for
# frame indices below 2**21, which keeps it reproducible across languages.
_JITTER_MULTIPLIER = 2654435761
_JITTER_MODULUS = 1 << 32
MAX_FRAME_INDEX = 1 << 21


class ScorerError(RuntimeError):
    """Scoring request violated the scorer contract or the backend failed."""


@dataclass(frozen=True)
class ScoreResult:
    """Per-token natural-log probabilities of a scored continuation."""

    logprobs: tuple[float, ...]

    def __post_init__(self) -> None:
        for lp in self.logprobs:
            if not math.isfinite(lp) or lp > 0.0:
                raise ScorerError(f"logprob {lp} is not a finite non-positive value")

    def __len__(self) -> int:
        return len(self.logprobs)


def perplexity(score: ScoreResult) -> float:
    """exp(-mean(logprobs)); requires at least one scored token."""
    if len(score.logprobs) == 0:
        raise ScorerError("perplexity of an empty continuation is undefined")
    return math.exp(-sum(score.logprobs) / len(score.logprobs))


@dataclass(frozen=True)
class ScorerConfig:
    vocab_size: int
    eos_token: int
    max_generation_len: int = 64
    context_limit: int | None = None

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be at least 2, got {self.vocab_size}")
        if not (0 <= self.eos_token < self.vocab_size):
            raise ValueError(f"eos_token {self.eos_token} outside vocabulary")
        if self.max_generation_len < 0:
            raise ValueError("max_generation_len must be non-negative")


class Scorer(Protocol):
    """What the decoding engine needs from any scoring backend."""

    def score_continuation(
        self,
        context: Sequence[int],
        continuation: Sequence[int],
        mask: object | None = None,
    ) -> ScoreResult:
        ...

    def generate_caption(
        self,
        context: Sequence[int],
        max_len: int,
        mask: object | None = None,
    ) -> tuple[list[int], ScoreResult]:
        ...


def jitter_unit(frame_index: int) -> float:
    """Deterministic value in [0, 1) keyed on a frame index."""
    if not (0 <= frame_index < MAX_FRAME_INDEX):
        raise ScorerError(f"frame index {frame_index} outside jitterable range")
    return ((frame_index * _JITTER_MULTIPLIER) % _JITTER_MODULUS) / _JITTER_MODULUS


@dataclass(frozen=True)
class ClipScript:
    """Scalable scripted behaviour keyed on clip-tagged frame markers.

    Frame blocks built for a scripted trace start with a marker token
    (frame_marker_base + clip ordinal) followed by an index token
    (frame_index_base + global frame index).  Caption tokens for clip c
    occupy [caption_base + c*caption_len, caption_base + (c+1)*caption_len).
    Scoring a caption token against a context whose latest frame belongs
    to the same clip uses lp_in, otherwise lp_out, both per frame-clip;
    jitter_amp shifts the logprob down by jitter_unit(frame_index) * amp.
    """

    frame_marker_base: int
    frame_index_base: int
    caption_base: int
    caption_len: int
    tokens_per_frame: int
    num_clips: int
    lp_in: tuple[float, ...]
    lp_out: tuple[float, ...]
    jitter_amp: float = 0.0

    def __post_init__(self) -> None:
        if self.num_clips < 1 or self.caption_len < 1 or self.tokens_per_frame < 1:
            raise ValueError("clip script needs at least one clip, caption token, frame token")
        if len(self.lp_in) != self.num_clips or len(self.lp_out) != self.num_clips:
            raise ValueError("lp_in/lp_out must carry one entry per clip")
        for lp in (*self.lp_in, *self.lp_out):
            if not math.isfinite(lp) or lp > 0.0:
                raise ValueError(f"script logprob {lp} is not finite non-positive")
        if self.jitter_amp < 0.0:
            raise ValueError("jitter_amp must be non-negative")
        if self.frame_marker_base + self.num_clips > self.frame_index_base:
            raise ValueError("frame marker range runs into frame index range")
        if self.frame_index_base + MAX_FRAME_INDEX > self.caption_base:
            raise ValueError("frame index range runs into caption range")

    def caption_tokens(self, clip: int) -> list[int]:
        if not (0 <= clip < self.num_clips):
            raise ValueError(f"clip {clip} outside script range")
        start = self.caption_base + clip * self.caption_len
        return list(range(start, start + self.caption_len))

    def caption_clip_of(self, token: int) -> int | None:
        offset = token - self.caption_base
        if 0 <= offset < self.num_clips * self.caption_len:
            return offset // self.caption_len
        return None

    def locate_latest_frame(self, context: Sequence[int]) -> tuple[int, int, int] | None:
        """Return (position, clip, frame_index) of the last frame marker, if any."""
        lo = self.frame_marker_base
        hi = self.frame_marker_base + self.num_clips
        for pos in range(len(context) - 1, -1, -1):
            t = context[pos]
            if lo <= t < hi:
                frame_index = 0
                if pos + 1 < len(context):
                    nxt = context[pos + 1]
                    if self.frame_index_base <= nxt < self.frame_index_base + MAX_FRAME_INDEX:
                        frame_index = nxt - self.frame_index_base
                return pos, t - lo, frame_index
        return None


@dataclass(frozen=True)
class FallbackRule:
    """Last-resort logprob when neither table nor script matches."""

    mode: str  # "uniform" | "hash"
    lp: float | None = None
    lp_min: float | None = None
    lp_max: float | None = None

    def __post_init__(self) -> None:
        if self.mode == "uniform":
            if self.lp is None or self.lp > 0.0:
                raise ValueError("uniform fallback needs a non-positive lp")
        elif self.mode == "hash":
            if self.lp_min is None or self.lp_max is None:
                raise ValueError("hash fallback needs lp_min and lp_max")
            if not (self.lp_min <= self.lp_max <= 0.0):
                raise ValueError("hash fallback needs lp_min <= lp_max <= 0")
        else:
            raise ValueError(f"unknown fallback mode {self.mode!r}")

    @staticmethod
    def uniform_for_vocab(vocab_size: int) -> "FallbackRule":
        return FallbackRule(mode="uniform", lp=math.log(1.0 / vocab_size))


@dataclass
class Scenario:
    config: ScorerConfig
    entries: dict[tuple[int, int], float] = field(default_factory=dict)
    clip_script: ClipScript | None = None
    fallback: FallbackRule | None = None

    def __post_init__(self) -> None:
        if self.fallback is None:
            self.fallback = FallbackRule.uniform_for_vocab(self.config.vocab_size)
        for (fp, token), lp in self.entries.items():
            if not (0 <= token < self.config.vocab_size):
                raise ValueError(f"table token {token} outside vocabulary")
            if not (0 <= fp < 1 << 64):
                raise ValueError(f"table fingerprint {fp} outside 64-bit range")
            if not math.isfinite(lp) or lp > 0.0:
                raise ValueError(f"table logprob {lp} is not finite non-positive")


def save_scenario(path: str | Path, scenario: Scenario) -> None:
    cfg = scenario.config
    script = scenario.clip_script
    fb = scenario.fallback
    assert fb is not None
    payload: dict = {
        "format": "streamgate-scenario",
        "version": 1,
        "vocab_size": cfg.vocab_size,
        "eos_token": cfg.eos_token,
        "max_generation_len": cfg.max_generation_len,
        "entries": [
            [str(fp), token, lp]
            for (fp, token), lp in sorted(scenario.entries.items())
        ],
        "clip_script": None
        if script is None
        else {
            "frame_marker_base": script.frame_marker_base,
            "frame_index_base": script.frame_index_base,
            "caption_base": script.caption_base,
            "caption_len": script.caption_len,
            "tokens_per_frame": script.tokens_per_frame,
            "num_clips": script.num_clips,
            "lp_in": list(script.lp_in),
            "lp_out": list(script.lp_out),
            "jitter_amp": script.jitter_amp,
        },
        "fallback": {"mode": "uniform", "lp": fb.lp}
        if fb.mode == "uniform"
        else {"mode": "hash", "lp_min": fb.lp_min, "lp_max": fb.lp_max},
    }
    if cfg.context_limit is not None:
        payload["context_limit"] = cfg.context_limit
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_scenario(path: str | Path) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != "streamgate-scenario":
        raise ValueError(f"{path}: not a scenario file")
    config = ScorerConfig(
        vocab_size=int(payload["vocab_size"]),
        eos_token=int(payload["eos_token"]),
        max_generation_len=int(payload.get("max_generation_len", 64)),
        context_limit=payload.get("context_limit"),
    )
    entries: dict[tuple[int, int], float] = {}
    for fp_str, token, lp in payload.get("entries", []):
        entries[(int(fp_str), int(token))] = float(lp)
    script_spec = payload.get("clip_script")
    clip_script = None
    if script_spec is not None:
        clip_script = ClipScript(
            frame_marker_base=int(script_spec["frame_marker_base"]),
            frame_index_base=int(script_spec["frame_index_base"]),
            caption_base=int(script_spec["caption_base"]),
            caption_len=int(script_spec["caption_len"]),
            tokens_per_frame=int(script_spec["tokens_per_frame"]),
            num_clips=int(script_spec["num_clips"]),
            lp_in=tuple(float(v) for v in script_spec["lp_in"]),
            lp_out=tuple(float(v) for v in script_spec["lp_out"]),
            jitter_amp=float(script_spec.get("jitter_amp", 0.0)),
        )
    fb_spec = payload.get("fallback")
    if fb_spec is None:
        fallback = FallbackRule.uniform_for_vocab(config.vocab_size)
    elif fb_spec["mode"] == "uniform":
        lp = fb_spec.get("lp")
        fallback = (
            FallbackRule(mode="uniform", lp=float(lp))
            if lp is not None
            else FallbackRule.uniform_for_vocab(config.vocab_size)
        )
    else:
        fallback = FallbackRule(
            mode="hash",
            lp_min=float(fb_spec["lp_min"]),
            lp_max=float(fb_spec["lp_max"]),
        )
    return Scenario(
        config=config, entries=entries, clip_script=clip_script, fallback=fallback
    )


class _PrefixFingerprints:
    """Rolling cache of context fingerprints.

    Scoring calls within a session mostly extend the previous context at
    the tail, so stepping from a cached prefix avoids rehashing long
    histories on every call.
    """

    def __init__(self, capacity: int = 8):
        self._capacity = capacity
        self._known: list[tuple[tuple[int, ...], int]] = []

    def fingerprint(self, context: Sequence[int]) -> int:
        seq = tuple(context)
        best_len = -1
        best_fp = FNV64_OFFSET
        for prefix, fp in self._known:
            n = len(prefix)
            if n <= len(seq) and n > best_len and seq[:n] == prefix:
                best_len, best_fp = n, fp
        if best_len < 0:
            best_len, best_fp = 0, FNV64_OFFSET
        fp = best_fp
        for t in seq[best_len:]:
            fp = fingerprint_step(fp, t)
        self._known.append((seq, fp))
        if len(self._known) > self._capacity:
            self._known.pop(0)
        return fp


class TableScorer:
    """In-process reference scorer for a Scenario.

    Deterministic and stateless apart from a fingerprint memo; safe to
    share across sessions of a single thread.
    """

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.config = scenario.config
        self.vocab_size = scenario.config.vocab_size
        self._fingerprints = _PrefixFingerprints()
        self._by_fp: dict[int, list[tuple[int, float]]] = {}
        for (fp, token), lp in scenario.entries.items():
            self._by_fp.setdefault(fp, []).append((token, lp))
        for candidates in self._by_fp.values():
            candidates.sort()

    # -- helpers -------------------------------------------------------

    def _check_ids(self, tokens: Sequence[int], what: str) -> None:
        if not tokens:
            return
        lo, hi = min(tokens), max(tokens)
        if lo < 0 or hi >= self.vocab_size:
            bad = lo if lo < 0 else hi
            raise ScorerError(f"{what} token id {bad} outside vocabulary of {self.vocab_size}")

    def _fallback_lp(self, fp: int | None, token: int) -> float:
        fb = self.scenario.fallback
        assert fb is not None
        if fb.mode == "uniform":
            assert fb.lp is not None
            return fb.lp
        if fp is None:
            raise AssertionError("hash fallback requires a fingerprint")
        u = (fingerprint_step(fp, token) % _JITTER_MODULUS) / _JITTER_MODULUS
        assert fb.lp_min is not None and fb.lp_max is not None
        return fb.lp_min + (fb.lp_max - fb.lp_min) * u

    # -- Scorer protocol ----------------------------------------------

    def score_continuation(
        self,
        context: Sequence[int],
        continuation: Sequence[int],
        mask: object | None = None,
    ) -> ScoreResult:
        del mask  # table lookups are mask-oblivious; masks ride through opaquely
        if len(continuation) == 0:
            raise ScorerError("cannot score an empty continuation")
        limit = self.config.context_limit
        if limit is not None and len(context) + len(continuation) > limit:
            raise ScorerError(
                f"context of {len(context)}+{len(continuation)} tokens exceeds limit {limit}"
            )
        self._check_ids(context, "context")
        self._check_ids(continuation, "continuation")

        script = self.scenario.clip_script
        frame_info = script.locate_latest_frame(context) if script is not None else None
        need_fp = bool(self.scenario.entries) or (
            self.scenario.fallback is not None and self.scenario.fallback.mode == "hash"
        )
        fp = self._fingerprints.fingerprint(context) if need_fp else None

        logprobs: list[float] = []
        for token in continuation:
            lp: float | None = None
            if fp is not None and (fp, token) in self.scenario.entries:
                lp = self.scenario.entries[(fp, token)]
            elif script is not None and frame_info is not None:
                clip_of_token = script.caption_clip_of(token)
                if clip_of_token is not None:
                    _, frame_clip, frame_index = frame_info
                    base = (
                        script.lp_in[frame_clip]
                        if clip_of_token == frame_clip
                        else script.lp_out[frame_clip]
                    )
                    lp = base - script.jitter_amp * jitter_unit(frame_index)
            if lp is None:
                lp = self._fallback_lp(fp, token)
            logprobs.append(lp)
            if fp is not None:
                fp = fingerprint_step(fp, token)
        return ScoreResult(tuple(logprobs))

    def generate_caption(
        self,
        context: Sequence[int],
        max_len: int,
        mask: object | None = None,
    ) -> tuple[list[int], ScoreResult]:
        """Greedy decode until the end-of-caption sentinel or max_len.

        The decode policy consults the same table/script layers as
        scoring: among table candidates at the current fingerprint the
        highest logprob wins (ties to the smallest token id); with no
        candidate the clip script may continue its caption; otherwise
        the scorer emits its sentinel immediately.
        """
        if max_len < 0:
            raise ScorerError(f"max_len must be non-negative, got {max_len}")
        self._check_ids(context, "context")
        if max_len == 0:
            return [], ScoreResult(())

        script = self.scenario.clip_script
        scripted: list[int] | None = None
        if script is not None:
            frame_info = script.locate_latest_frame(context)
            if frame_info is not None:
                pos, frame_clip, _ = frame_info
                trailing = list(context[pos + script.tokens_per_frame:])
                caption = script.caption_tokens(frame_clip)
                if trailing == caption[: len(trailing)]:
                    scripted = caption[len(trailing):]

        out: list[int] = []
        fp: int | None = None
        if self.scenario.entries:
            fp = self._fingerprints.fingerprint(context)
        while len(out) < max_len:
            chosen: int | None = None
            if fp is not None:
                candidates = self._by_fp.get(fp)
                if candidates:
                    best_token, best_lp = candidates[0]
                    for token, lp in candidates[1:]:
                        if lp > best_lp:
                            best_token, best_lp = token, lp
                    chosen = best_token
            if chosen is None and scripted:
                chosen = scripted[0]
            if chosen is None or chosen == self.config.eos_token:
                break
            if scripted is not None:
                # keep the scripted continuation aligned with what was emitted
                if scripted and scripted[0] == chosen:
                    scripted.pop(0)
                else:
                    scripted = None
            out.append(chosen)
            if fp is not None:
                fp = fingerprint_step(fp, chosen)
        if not out:
            return [], ScoreResult(())
        return out, self.score_continuation(context, out)
