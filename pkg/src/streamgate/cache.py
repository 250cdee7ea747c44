"""Dual-level bookkeeping model of a streaming attention-state cache.

This is a desk-scale realization: payloads are synthetic checksums over
(start position, token ids), not real attention states, so correctness
is observable without a neural backend.  Two levels exist.  The ordered
ledger of inter-dialogue entries mirrors the context buffer one entry
per block and survives turn boundaries; intra-dialogue scratch entries
model per-turn state (the verification pass's hypothetical caption
placement) and are dropped on reset_intra().

The swap and prune operations deliberately invalidate every entry whose
position changed rather than relocating payloads; stale entries are
recomputed the next time a scorer call covers them at their position.
Serving statistics never influence scoring, so cached and cache-free
runs make identical decisions by construction; the oracle test asserts
it anyway.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from .hashing import block_checksum


class CacheError(RuntimeError):
    pass


class CacheLevel(Enum):
    INTRA_DIALOGUE = "intra"
    INTER_DIALOGUE = "inter"


@dataclass
class CacheEntry:
    block_id: int
    start: int
    length: int
    payload: int | None
    fresh: bool
    level: CacheLevel

    @property
    def end(self) -> int:
        return self.start + self.length


class StreamingCache:
    def __init__(self) -> None:
        self.entries: list[CacheEntry] = []
        self.scratch: list[CacheEntry] = []
        self.tokens_scored_total = 0
        self.tokens_served_from_cache = 0

    # -- structure ----------------------------------------------------

    def _end(self) -> int:
        return self.entries[-1].end if self.entries else 0

    def entry_for(self, block_id: int) -> CacheEntry:
        for entry in self.entries:
            if entry.block_id == block_id:
                return entry
        raise CacheError(f"no cache entry for block {block_id}")

    def append(
        self,
        block_id: int,
        token_ids: Sequence[int],
        *,
        start: int | None = None,
    ) -> CacheEntry:
        """Add an entry at the ledger tail; appending counts as computing it.

        An explicit start that collides with occupied positions is fatal.
        """
        if any(e.block_id == block_id for e in self.entries):
            raise CacheError(f"duplicate cache entry for block {block_id}")
        expected = self._end()
        if start is not None and start != expected:
            raise CacheError(
                f"position collision: block {block_id} at {start}, ledger ends at {expected}"
            )
        entry = CacheEntry(
            block_id=block_id,
            start=expected,
            length=len(token_ids),
            payload=block_checksum(token_ids, expected),
            fresh=True,
            level=CacheLevel.INTER_DIALOGUE,
        )
        self.entries.append(entry)
        self.tokens_scored_total += len(token_ids)
        return entry

    def swap_tail(self) -> None:
        """Exchange the last two entries; both become stale at new positions."""
        if len(self.entries) < 2:
            raise CacheError("need at least two entries to swap")
        a, b = self.entries[-2], self.entries[-1]
        self.entries[-2], self.entries[-1] = b, a
        base = a.start
        b.start = base
        a.start = base + b.length
        for moved in (a, b):
            moved.fresh = False
            moved.payload = None

    def prune(self, deleted_ids: Sequence[int]) -> None:
        """Drop entries, close the gaps, invalidate everything that shifted."""
        doomed = set(deleted_ids)
        if not doomed:
            return
        known = {e.block_id for e in self.entries}
        unknown = doomed - known
        if unknown:
            raise CacheError(f"cannot prune unknown blocks {sorted(unknown)}")
        if self.entries and self.entries[-1].block_id in doomed:
            raise CacheError("refusing to prune the ledger tail")
        kept: list[CacheEntry] = []
        position = 0
        for entry in self.entries:
            if entry.block_id in doomed:
                continue
            if entry.start != position:
                entry.start = position
                entry.fresh = False
                entry.payload = None
            kept.append(entry)
            position += entry.length
        self.entries = kept

    # -- scratch level -------------------------------------------------

    def add_scratch(self, block_id: int, token_ids: Sequence[int], start: int) -> CacheEntry:
        entry = CacheEntry(
            block_id=block_id,
            start=start,
            length=len(token_ids),
            payload=block_checksum(token_ids, start),
            fresh=True,
            level=CacheLevel.INTRA_DIALOGUE,
        )
        self.scratch.append(entry)
        return entry

    def reset_intra(self) -> None:
        self.scratch.clear()

    # -- serving accounting -------------------------------------------

    def account_call(
        self,
        arrangement: Sequence[tuple[int, Sequence[int], int]],
        extra_tokens: int,
    ) -> tuple[int, int]:
        """Record one scorer call over (block_id, tokens, position) triples.

        A block is served when a fresh ledger entry covers it at exactly
        the call position; otherwise its tokens count as recomputed, and
        an entry sitting at that position is refreshed.  extra_tokens
        (continuation or newly generated) are always recomputed.
        """
        by_id = {e.block_id: e for e in self.entries}
        served = 0
        recomputed = extra_tokens
        for block_id, token_ids, position in arrangement:
            entry = by_id.get(block_id)
            if entry is not None and entry.fresh and entry.start == position:
                served += len(token_ids)
                continue
            recomputed += len(token_ids)
            if entry is not None and entry.start == position:
                entry.payload = block_checksum(token_ids, position)
                entry.fresh = True
        self.tokens_scored_total += served + recomputed
        self.tokens_served_from_cache += served
        return served, recomputed

    @property
    def recompute_ratio(self) -> float:
        if self.tokens_scored_total == 0:
            return 0.0
        return 1.0 - self.tokens_served_from_cache / self.tokens_scored_total

    def stats(self) -> dict:
        return {
            "tokens_scored_total": self.tokens_scored_total,
            "tokens_served_from_cache": self.tokens_served_from_cache,
            "recompute_ratio": self.recompute_ratio,
        }

    # -- consistency ---------------------------------------------------

    def consistency_check(
        self, expected_blocks: Sequence[tuple[int, Sequence[int]]]
    ) -> list[str]:
        """Compare the ledger against a from-scratch walk of the context.

        Returns human-readable violations; an empty list means every live
        entry is positioned, sized, and checksummed exactly as a rebuild
        would produce.  Stale entries are reported (they are expected
        right after a swap or prune, and gone after the next recompute).
        """
        violations: list[str] = []
        expected_ids = [bid for bid, _ in expected_blocks]
        actual_ids = [e.block_id for e in self.entries]
        for bid in expected_ids:
            if bid not in actual_ids:
                violations.append(f"missing-entry:{bid}")
        for bid in actual_ids:
            if bid not in expected_ids:
                violations.append(f"orphan-entry:{bid}")
        if violations:
            return violations
        if actual_ids != expected_ids:
            violations.append(f"order:{actual_ids}!={expected_ids}")
            return violations
        position = 0
        for entry, (bid, token_ids) in zip(self.entries, expected_blocks):
            if entry.start != position:
                violations.append(f"position:{bid} expected {position} got {entry.start}")
            if entry.length != len(token_ids):
                violations.append(f"length:{bid} expected {len(token_ids)} got {entry.length}")
            if not entry.fresh:
                violations.append(f"stale:{bid}")
            elif entry.payload != block_checksum(token_ids, position):
                violations.append(f"checksum:{bid}")
            position += entry.length
        return violations
