"""Per-frame response-silence gate over a verification perplexity budget.

Each incoming frame is appended to the context.  While a previous
caption exists it is re-scored as if it followed the new frame; only
when that verification perplexity exceeds alpha times the perplexity it
had when decoded does the engine decode a fresh caption (the old one
stays in place, before the frame).  Otherwise the caption is moved
behind the new frame (a tail swap) and the frame passes silently.  The
first frame with no caption yet triggers an initial decode.

ingest_frame raises ContextBudgetExceeded before touching any state
when the context lacks headroom for the frame plus a worst-case
caption, so a replay harness can prune and retry the same frame.  An
empty generation is treated as a silent step with a warning.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass
from enum import Enum

from .cache import StreamingCache
from .hashing import derive_substream_seed
from .memory import MemoryRecord, P_MAX_DEFAULT
from .memory import prune as memory_prune
from .model import (
    TIME_EPS,
    CaptionBlock,
    ContextBuffer,
    FrameBlock,
    ResponseEvent,
    ResponseLog,
    text_tokens,
    token_ids,
)
from .scoring import Scorer, perplexity

log = logging.getLogger("streamgate.engine")


class ConfigError(ValueError):
    pass


class EngineInvariantError(RuntimeError):
    pass


class ContextBudgetExceeded(RuntimeError):
    """Recoverable: nothing was mutated, so the caller may prune and retry."""

    def __init__(self, needed: int, budget: int):
        super().__init__(f"context needs {needed} tokens, budget is {budget}")
        self.needed = needed
        self.budget = budget


class GateKind(Enum):
    INITIAL_DECODE = "initial"
    REDECODE = "redecode"
    SILENT = "silent"


@dataclass(frozen=True)
class GateDecision:
    """Outcome of one ingested frame.

    emitted is present exactly when the gate produced a caption, and
    verify_ppl/threshold are present (as a pair) exactly when a previous
    caption was re-scored.  ref_ppl is the reference in force after the
    step.  empty_generation marks steps where a decode was attempted but
    the scorer returned no tokens.
    """

    kind: GateKind
    t_s: float
    emitted: tuple[int, ...] | None
    verify_ppl: float | None
    threshold: float | None
    ref_ppl: float | None
    empty_generation: bool = False

    def __post_init__(self) -> None:
        if (self.kind is GateKind.SILENT) == (self.emitted is not None):
            raise EngineInvariantError("emitted tokens must be present iff the gate fired")
        if (self.verify_ppl is None) != (self.threshold is None):
            raise EngineInvariantError("verify_ppl and threshold come as a pair")


@dataclass
class SessionConfig:
    alpha: float = 1.03
    tokens_per_frame: int = 16
    window_frames: int = 40
    fps: float = 3.0
    context_budget: int = 8192
    pool_size: int = 1
    p_max: float = P_MAX_DEFAULT
    max_caption_len: int = 64
    seed: int = 0
    cache_enabled: bool = True

    def validate(self) -> None:
        if self.alpha < 1.0:
            raise ConfigError(f"alpha must be at least 1.0, got {self.alpha}")
        if self.tokens_per_frame < 1:
            raise ConfigError("tokens_per_frame must be positive")
        if self.window_frames < 1:
            raise ConfigError("window_frames must be positive")
        if self.fps <= 0:
            raise ConfigError("fps must be positive")
        if self.max_caption_len < 1:
            raise ConfigError("max_caption_len must be positive")
        if self.context_budget < self.tokens_per_frame + self.max_caption_len:
            raise ConfigError(
                "context_budget must cover at least one frame plus one caption "
                f"({self.tokens_per_frame} + {self.max_caption_len})"
            )
        if self.pool_size < 1:
            raise ConfigError("pool_size must be positive")
        if not (0.0 <= self.p_max <= 1.0):
            raise ConfigError("p_max must lie in [0, 1]")


def init_session(config: SessionConfig, scorer: Scorer) -> "SvedSession":
    return SvedSession(config, scorer)


class SvedSession:
    """Single-threaded gate session; one frame ingested at a time.

    Clip bookkeeping: every decode opens a new clip, and the silent
    frames that follow belong to it.  When a clip completes (the next
    decode lands) its minimum-perplexity frame is protected from
    pruning.  Captions carry no retention records, so pruning can never
    remove them.
    """

    def __init__(self, config: SessionConfig, scorer: Scorer):
        config.validate()
        self.config = config
        self.scorer = scorer
        self.ctx = ContextBuffer(config.context_budget)
        self.dec: CaptionBlock | None = None
        self.dec_block_id: int | None = None
        self.ref_ppl: float | None = None
        self.cache: StreamingCache | None = StreamingCache() if config.cache_enabled else None
        self.events: list[dict] = []
        self.memory_records: list[MemoryRecord] = []
        self._responses: list[ResponseEvent] = []
        self._clip_counter = 0
        self._last_frame_t: float | None = None
        self._prune_rng = random.Random(derive_substream_seed(config.seed, "pruning"))
        self._finalized = False

    # -- internals -----------------------------------------------------

    def _require_open(self) -> None:
        if self._finalized:
            raise EngineInvariantError("session already finalized")

    def _close_clip(self, clip_id: int) -> None:
        """Protect the completed clip's minimum-perplexity frame as keyframe."""
        best: MemoryRecord | None = None
        for record in self.memory_records:
            if record.clip_id != clip_id or record.frame_ppl is None:
                continue
            if best is None or record.frame_ppl < best.frame_ppl:
                best = record
        if best is not None:
            best.protected = True

    def _ledger_arrangement(self) -> list[tuple[int, list[int], int]]:
        out = []
        position = 0
        for block_id, block in zip(self.ctx.block_ids, self.ctx.blocks):
            ids = token_ids(block.tokens)
            out.append((block_id, ids, position))
            position += len(ids)
        return out

    def _account(self, arrangement, extra_tokens: int) -> None:
        if self.cache is not None:
            self.cache.account_call(arrangement, extra_tokens)

    def _commit_frame(self, frame: FrameBlock) -> int:
        block_id = self.ctx.append(frame)
        if self.cache is not None:
            self.cache.append(block_id, token_ids(frame.tokens))
        self._last_frame_t = frame.timestamp_s
        return block_id

    def _commit_caption(self, tokens: list[int], t_s: float) -> None:
        self._close_clip(self._clip_counter)
        self._clip_counter += 1
        caption = CaptionBlock(
            tokens=text_tokens(tokens),
            emitted_at_s=t_s,
            clip_hint=self._clip_counter,
        )
        block_id = self.ctx.append(caption)
        if self.cache is not None:
            self.cache.append(block_id, tokens)
        self.dec = caption
        self.dec_block_id = block_id
        self._responses.append(
            ResponseEvent(t_s=t_s, tokens=tuple(tokens), clip_hint=self._clip_counter)
        )

    def _checked_generation(self, tokens: list[int]) -> list[int]:
        if len(tokens) > self.config.max_caption_len:
            raise EngineInvariantError(
                f"scorer generated {len(tokens)} tokens, cap is {self.config.max_caption_len}"
            )
        return tokens

    def _record_frame(self, block_id: int, frame: FrameBlock, ppl: float | None) -> None:
        self.memory_records.append(
            MemoryRecord(
                block_id=block_id,
                frame_index=frame.frame_index,
                timestamp_s=frame.timestamp_s,
                clip_id=self._clip_counter,
                frame_ppl=ppl,
            )
        )

    def _log_event(self, decision: GateDecision) -> None:
        self.events.append(
            {
                "t": decision.t_s,
                "decision": decision.kind.value,
                "verify_ppl": decision.verify_ppl,
                "threshold": decision.threshold,
                "ref_ppl": decision.ref_ppl,
            }
        )

    # -- public --------------------------------------------------------

    def ingest_frame(self, frame: FrameBlock) -> GateDecision:
        self._require_open()
        cfg = self.config
        if len(frame.tokens) != cfg.tokens_per_frame:
            raise EngineInvariantError(
                f"frame {frame.frame_index} carries {len(frame.tokens)} tokens, "
                f"session expects {cfg.tokens_per_frame}"
            )
        if self._last_frame_t is not None and frame.timestamp_s <= self._last_frame_t + TIME_EPS:
            raise EngineInvariantError(
                f"frame timestamp {frame.timestamp_s} not after {self._last_frame_t}"
            )
        # Reserve room for this frame plus a worst-case caption so no
        # overflow can surface after state has been touched.
        needed = self.ctx.token_count + cfg.tokens_per_frame + cfg.max_caption_len
        if needed > cfg.context_budget:
            raise ContextBudgetExceeded(needed, cfg.context_budget)

        if self.dec is None:
            decision = self._ingest_initial(frame)
        else:
            decision = self._ingest_gated(frame)
        if self.cache is not None:
            self.cache.reset_intra()
        self._log_event(decision)
        return decision

    def _ingest_initial(self, frame: FrameBlock) -> GateDecision:
        t = frame.timestamp_s
        block_id = self._commit_frame(frame)
        gen_ctx = list(self.ctx.flat_token_ids)
        tokens, score = self.scorer.generate_caption(gen_ctx, self.config.max_caption_len)
        tokens = self._checked_generation(tokens)
        self._account(self._ledger_arrangement(), len(tokens))
        if not tokens:
            log.warning("empty generation at t=%s; staying silent", t)
            self._record_frame(block_id, frame, None)
            return GateDecision(GateKind.SILENT, t, None, None, None, None, True)
        self._commit_caption(tokens, t)
        self.ref_ppl = perplexity(score)
        self._record_frame(block_id, frame, self.ref_ppl)
        return GateDecision(GateKind.INITIAL_DECODE, t, tuple(tokens), None, None, self.ref_ppl)

    def _ingest_gated(self, frame: FrameBlock) -> GateDecision:
        cfg = self.config
        t = frame.timestamp_s
        dec = self.dec
        assert dec is not None and self.ref_ppl is not None
        if self.ctx.blocks[-1] is not dec:
            raise EngineInvariantError("caption must sit at the context tail between frames")
        dec_ids = token_ids(dec.tokens)
        frame_ids = token_ids(frame.tokens)
        prefix_len = self.ctx.token_count - len(dec_ids)
        # Score dec as if it followed the new frame; a silent step's tail
        # swap commits exactly this placement.
        verify_ctx = self.ctx.flat_token_ids[:prefix_len] + frame_ids
        block_id = self._commit_frame(frame)

        verify_arrangement = self._ledger_arrangement()[:-2]
        verify_arrangement.append((block_id, frame_ids, prefix_len))
        if self.cache is not None:
            # the hypothetical caption placement lives one turn in scratch
            self.cache.add_scratch(self.dec_block_id, dec_ids, prefix_len + len(frame_ids))
        verify_score = self.scorer.score_continuation(verify_ctx, dec_ids)
        self._account(verify_arrangement, len(dec_ids))
        verify_ppl = perplexity(verify_score)
        threshold = cfg.alpha * self.ref_ppl

        gate_fired = verify_ppl > threshold
        if gate_fired:
            # full context including the superseded caption in place
            gen_ctx = list(self.ctx.flat_token_ids)
            tokens, score = self.scorer.generate_caption(gen_ctx, cfg.max_caption_len)
            tokens = self._checked_generation(tokens)
            self._account(self._ledger_arrangement(), len(tokens))
            if tokens:
                self._commit_caption(tokens, t)
                self.ref_ppl = perplexity(score)
                self._record_frame(block_id, frame, self.ref_ppl)
                return GateDecision(
                    GateKind.REDECODE, t, tuple(tokens), verify_ppl, threshold, self.ref_ppl
                )
            log.warning("empty generation at t=%s after gate fired; staying silent", t)

        self.ctx.swap_last_two()
        if self.cache is not None:
            self.cache.swap_tail()
        self._record_frame(block_id, frame, verify_ppl)
        return GateDecision(
            GateKind.SILENT, t, None, verify_ppl, threshold, self.ref_ppl, gate_fired
        )

    def prune_memory(self, now_s: float) -> dict:
        """Run one peak-end pruning pass; returns (and logs) the prune record."""
        self._require_open()
        cfg = self.config
        deleted = memory_prune(
            self.ctx,
            self.memory_records,
            now_s=now_s,
            window_frames=cfg.window_frames,
            fps=cfg.fps,
            rng=self._prune_rng,
            p_max=cfg.p_max,
        )
        if deleted and self.cache is not None:
            self.cache.prune([r.block_id for r in deleted])
        gone = {r.block_id for r in deleted}
        self.memory_records = [r for r in self.memory_records if r.block_id not in gone]
        event = {
            "t": now_s,
            "pruned_frames": sorted(r.frame_index for r in deleted),
            "survivor_tokens": self.ctx.token_count,
        }
        self.events.append(event)
        return event

    def finalize(self) -> ResponseLog:
        self._require_open()
        self._finalized = True
        return ResponseLog(events=tuple(self._responses))

    def cache_stats(self) -> dict | None:
        return None if self.cache is None else self.cache.stats()

    def consistency_violations(self) -> list[str]:
        """Ledger-vs-context differences; stale entries are legal mid-stream."""
        if self.cache is None:
            return []
        expected = [
            (bid, token_ids(block.tokens))
            for bid, block in zip(self.ctx.block_ids, self.ctx.blocks)
        ]
        return self.cache.consistency_check(expected)
