"""Peak-end retention: deletion probabilities and the pruning pass."""

import math
import random

import pytest

from streamgate.memory import (
    P_MAX_DEFAULT,
    MemoryRecord,
    clip_ppl_extremes,
    deletion_probability,
    prune,
)
from streamgate.model import CaptionBlock, ContextBuffer, FrameBlock, frame_tokens, text_tokens


def _record(block_id, t, ppl, clip_id=0, protected=False):
    return MemoryRecord(
        block_id=block_id,
        frame_index=block_id,
        timestamp_s=t,
        clip_id=clip_id,
        frame_ppl=ppl,
        protected=protected,
    )


def _ctx_with_frames(n_frames, tail_caption=True):
    ctx = ContextBuffer(1000)
    ids = [
        ctx.append(FrameBlock(float(i), i, frame_tokens([10 + i, 10 + i])))
        for i in range(n_frames)
    ]
    if tail_caption:
        ctx.append(CaptionBlock(text_tokens([99]), emitted_at_s=float(n_frames)))
    return ctx, ids


def test_protected_record_is_never_deletable():
    p = deletion_probability(
        _record(0, 0.0, 99.0, protected=True),
        now_s=1000.0,
        window_frames=4,
        fps=1.0,
        clip_ppl_min=1.0,
        clip_ppl_max=99.0,
    )
    assert p == 0.0


def test_age_exactly_at_window_is_not_deletable():
    p = deletion_probability(
        _record(0, 0.0, 2.0),
        now_s=40.0,
        window_frames=40,
        fps=1.0,
        clip_ppl_min=1.0,
        clip_ppl_max=2.0,
    )
    assert p == 0.0


def test_age_factor_ramps_linearly_then_saturates():
    record = _record(0, 0.0, 2.0)
    kwargs = dict(window_frames=40, fps=1.0, clip_ppl_min=1.0, clip_ppl_max=2.0)
    p_half = deletion_probability(record, now_s=60.0, **kwargs)
    p_full = deletion_probability(record, now_s=80.0, **kwargs)
    p_older = deletion_probability(record, now_s=5000.0, **kwargs)
    assert p_half == pytest.approx(p_full / 2)
    assert p_full == p_older
    assert p_full == pytest.approx(0.9, abs=1e-8)
    assert p_full < P_MAX_DEFAULT  # the epsilon keeps rel strictly below 1


def test_fps_converts_age_to_frames():
    record = _record(0, 0.0, 2.0)
    kwargs = dict(window_frames=40, fps=3.0, clip_ppl_min=1.0, clip_ppl_max=2.0)
    assert deletion_probability(record, now_s=13.0, **kwargs) == 0.0  # 39 frames
    assert deletion_probability(record, now_s=20.0, **kwargs) > 0.0  # 60 frames


def test_clip_minimum_frame_is_safe_at_any_age():
    p = deletion_probability(
        _record(0, 0.0, 1.5),
        now_s=1e6,
        window_frames=4,
        fps=1.0,
        clip_ppl_min=1.5,
        clip_ppl_max=3.0,
    )
    assert p == 0.0


def test_unknown_perplexity_counts_as_maximally_deletable():
    p = deletion_probability(
        _record(0, 0.0, None),
        now_s=1e6,
        window_frames=4,
        fps=1.0,
        clip_ppl_min=1.0,
        clip_ppl_max=2.0,
    )
    assert p == P_MAX_DEFAULT


def test_probability_matches_literal_formula():
    rng = random.Random(7)
    for _ in range(200):
        ppl_min = rng.uniform(1.0, 2.0)
        ppl_max = ppl_min + rng.uniform(0.0, 3.0)
        ppl = rng.uniform(ppl_min, ppl_max)
        now = rng.uniform(0.0, 400.0)
        w = rng.randint(1, 60)
        fps = rng.choice([1.0, 2.0, 3.0])
        p_max = rng.uniform(0.1, 1.0)
        got = deletion_probability(
            _record(0, 0.0, ppl),
            now_s=now,
            window_frames=w,
            fps=fps,
            clip_ppl_min=ppl_min,
            clip_ppl_max=ppl_max,
            p_max=p_max,
        )
        age = now * fps
        if age <= w:
            assert got == 0.0
        else:
            rel = (ppl - ppl_min) / (ppl_max - ppl_min + 1e-9)
            agefac = min(1.0, (age - w) / w)
            assert got == p_max * rel * agefac


def test_clip_ppl_extremes_groups_by_clip_and_skips_unknown():
    records = [
        _record(0, 0.0, 1.5, clip_id=0),
        _record(1, 1.0, 3.0, clip_id=0),
        _record(2, 2.0, None, clip_id=0),
        _record(3, 3.0, 2.0, clip_id=1),
    ]
    assert clip_ppl_extremes(records) == {0: (1.5, 3.0), 1: (2.0, 2.0)}
    assert clip_ppl_extremes([]) == {}


def test_prune_deletes_certain_candidates_and_preserves_order():
    ctx, ids = _ctx_with_frames(4)
    records = [_record(ids[i], float(i), None) for i in range(4)]
    records[0].protected = True
    deleted = prune(
        ctx,
        records,
        now_s=1000.0,
        window_frames=1,
        fps=1.0,
        rng=random.Random(1),
        p_max=1.0,
    )
    assert [r.block_id for r in deleted] == [ids[1], ids[2], ids[3]]
    assert ctx.block_ids[0] == ids[0]
    assert len(ctx.block_ids) == 2
    assert isinstance(ctx.blocks[-1], CaptionBlock)


def test_prune_never_touches_the_buffer_tail():
    ctx, ids = _ctx_with_frames(2, tail_caption=False)
    records = [_record(ids[i], float(i), None) for i in range(2)]
    deleted = prune(
        ctx,
        records,
        now_s=1e6,
        window_frames=1,
        fps=1.0,
        rng=random.Random(0),
        p_max=1.0,
    )
    assert [r.block_id for r in deleted] == [ids[0]]
    assert ctx.block_ids == [ids[1]]


def test_prune_replays_exactly_one_draw_per_candidate_in_time_order():
    ctx, ids = _ctx_with_frames(5)
    ppls = [1.0, 5.0, 3.0, 2.0, 4.0]
    records = [_record(ids[i], float(i), ppls[i]) for i in range(5)]
    seed = 123
    clone = random.Random(seed)
    expected = []
    for r in sorted(records, key=lambda r: r.timestamp_s):
        p = deletion_probability(
            r,
            now_s=1000.0,
            window_frames=1,
            fps=1.0,
            clip_ppl_min=1.0,
            clip_ppl_max=5.0,
            p_max=0.7,
        )
        if clone.random() < p:
            expected.append(r.block_id)
    shuffled = list(records)
    random.Random(9).shuffle(shuffled)
    deleted = prune(
        ctx,
        shuffled,
        now_s=1000.0,
        window_frames=1,
        fps=1.0,
        rng=random.Random(seed),
        p_max=0.7,
    )
    assert [r.block_id for r in deleted] == expected
    assert 0 < len(expected) < 5


def test_prune_consumes_a_draw_even_at_zero_probability():
    # if the protected candidate's draw were skipped, the second candidate
    # would be judged with the first draw and die
    seed = next(
        s
        for s in range(1000)
        if (lambda r: r.random() < 0.9 < r.random())(random.Random(s))
    )
    ctx, ids = _ctx_with_frames(2)
    records = [
        _record(ids[0], 0.0, None, protected=True),
        _record(ids[1], 1.0, None),
    ]
    deleted = prune(
        ctx,
        records,
        now_s=1e6,
        window_frames=1,
        fps=1.0,
        rng=random.Random(seed),
    )
    assert deleted == []
    assert len(ctx.block_ids) == 3


def test_prune_deletion_frequency_tracks_probability():
    # lone candidate at agefac 0.5: p = 0.9 * 1.0 * 0.5 = 0.45
    rng = random.Random(42)
    trials = 4000
    deletions = 0
    for _ in range(trials):
        ctx, ids = _ctx_with_frames(1)
        record = _record(ids[0], 0.0, None)
        deleted = prune(
            ctx,
            [record],
            now_s=60.0,
            window_frames=40,
            fps=1.0,
            rng=rng,
        )
        deletions += len(deleted)
    p = 0.45
    sigma = math.sqrt(p * (1 - p) / trials)
    assert abs(deletions / trials - p) < 3 * sigma


def test_prune_empty_records_is_a_no_op():
    ctx, _ = _ctx_with_frames(2)
    rng = random.Random(3)
    before = rng.getstate()
    assert prune(ctx, [], now_s=1e6, window_frames=1, fps=1.0, rng=rng) == []
    assert rng.getstate() == before
    assert len(ctx.block_ids) == 3
