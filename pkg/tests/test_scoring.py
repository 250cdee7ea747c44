from __future__ import annotations

import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamgate.hashing import FNV64_OFFSET, fingerprint_step, fingerprint_tokens
from streamgate.scoring import (
    ClipScript,
    FallbackRule,
    Scenario,
    ScoreResult,
    ScorerConfig,
    ScorerError,
    TableScorer,
    jitter_unit,
    load_scenario,
    perplexity,
    save_scenario,
)

LN_HALF = math.log(0.5)
LN_NINE_TENTHS = math.log(0.9)


# -- perplexity ------------------------------------------------------------


def test_perplexity_of_certain_token_is_one():
    assert perplexity(ScoreResult((0.0,))) == 1.0


def test_perplexity_of_two_half_prob_tokens_is_exactly_two():
    assert perplexity(ScoreResult((LN_HALF, LN_HALF))) == 2.0


def test_perplexity_of_two_point_nine_tokens():
    assert perplexity(ScoreResult((LN_NINE_TENTHS, LN_NINE_TENTHS))) == pytest.approx(
        1.1111111111111112, rel=1e-15
    )


def test_perplexity_rejects_empty_continuation():
    with pytest.raises(ScorerError, match="empty continuation"):
        perplexity(ScoreResult(()))


def test_score_result_rejects_positive_or_nonfinite_logprobs():
    with pytest.raises(ScorerError):
        ScoreResult((0.1,))
    with pytest.raises(ScorerError):
        ScoreResult((float("nan"),))
    with pytest.raises(ScorerError):
        ScoreResult((float("-inf"),))


@given(
    st.lists(st.floats(min_value=-5.0, max_value=0.0), min_size=1, max_size=12),
    st.lists(st.floats(min_value=-5.0, max_value=0.0), min_size=1, max_size=12),
)
@settings(max_examples=200, deadline=None)
def test_perplexity_concat_identity(a, b):
    na, nb = len(a), len(b)
    pa = perplexity(ScoreResult(tuple(a)))
    pb = perplexity(ScoreResult(tuple(b)))
    pab = perplexity(ScoreResult(tuple(a + b)))
    lhs = pab ** (na + nb)
    rhs = (pa**na) * (pb**nb)
    assert lhs == pytest.approx(rhs, rel=1e-9)


# -- fingerprints ----------------------------------------------------------


def test_fingerprint_matches_bytewise_fnv():
    # token 1 as 8 little-endian bytes, folded one byte at a time
    h = FNV64_OFFSET
    for b in (1, 0, 0, 0, 0, 0, 0, 0):
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    assert fingerprint_tokens([1]) == h
    assert fingerprint_step(FNV64_OFFSET, 1) == h


def test_fingerprint_is_order_sensitive():
    assert fingerprint_tokens([1, 2]) != fingerprint_tokens([2, 1])


# -- table scorer ----------------------------------------------------------


def _table_scenario() -> Scenario:
    cfg = ScorerConfig(vocab_size=100, eos_token=0, max_generation_len=8)
    ctx_fp = fingerprint_tokens([5, 6])
    entries = {
        (ctx_fp, 7): LN_NINE_TENTHS,
        (fingerprint_step(ctx_fp, 7), 9): LN_HALF,
        (fingerprint_tokens([5, 6, 7, 9]), 0): LN_HALF,  # sentinel to finish
    }
    return Scenario(config=cfg, entries=entries)


def test_table_scorer_scores_scripted_continuation_autoregressively():
    scorer = TableScorer(_table_scenario())
    result = scorer.score_continuation([5, 6], [7, 9])
    assert result.logprobs == (LN_NINE_TENTHS, LN_HALF)


def test_table_scorer_uses_uniform_fallback_for_unknown_contexts():
    scorer = TableScorer(_table_scenario())
    result = scorer.score_continuation([1, 2, 3], [4])
    assert result.logprobs == (math.log(1.0 / 100),)


def test_table_scorer_rejects_out_of_vocab_tokens():
    scorer = TableScorer(_table_scenario())
    with pytest.raises(ScorerError, match="outside vocabulary"):
        scorer.score_continuation([5], [100])
    with pytest.raises(ScorerError, match="outside vocabulary"):
        scorer.score_continuation([100], [5])


def test_table_scorer_enforces_context_limit():
    cfg = ScorerConfig(vocab_size=10, eos_token=0, context_limit=4)
    scorer = TableScorer(Scenario(config=cfg))
    with pytest.raises(ScorerError, match="exceeds limit"):
        scorer.score_continuation([1, 2, 3], [4, 5])


def test_generation_follows_table_until_sentinel():
    scorer = TableScorer(_table_scenario())
    tokens, result = scorer.generate_caption([5, 6], max_len=8)
    assert tokens == [7, 9]
    assert result.logprobs == (LN_NINE_TENTHS, LN_HALF)


def test_generation_is_self_consistent_with_scoring():
    scorer = TableScorer(_table_scenario())
    tokens, result = scorer.generate_caption([5, 6], max_len=8)
    assert result.logprobs == scorer.score_continuation([5, 6], tokens).logprobs


def test_generation_with_zero_max_len_is_empty():
    scorer = TableScorer(_table_scenario())
    assert scorer.generate_caption([5, 6], max_len=0) == ([], ScoreResult(()))


def test_generation_stops_immediately_without_entries():
    scorer = TableScorer(_table_scenario())
    tokens, result = scorer.generate_caption([1, 2], max_len=8)
    assert tokens == []
    assert len(result) == 0


def test_generation_tie_breaks_to_smallest_token_id():
    cfg = ScorerConfig(vocab_size=50, eos_token=0)
    fp = fingerprint_tokens([3])
    entries = {
        (fp, 20): LN_HALF,
        (fp, 11): LN_HALF,  # tied logprob, lower id must win
        (fingerprint_step(fp, 11), 0): LN_HALF,
    }
    scorer = TableScorer(Scenario(config=cfg, entries=entries))
    tokens, _ = scorer.generate_caption([3], max_len=4)
    assert tokens == [11]


def test_generation_respects_max_len():
    cfg = ScorerConfig(vocab_size=50, eos_token=0)
    fp = fingerprint_tokens([3])
    entries = {(fp, 4): LN_HALF}
    fp = fingerprint_step(fp, 4)
    for _ in range(5):
        entries[(fp, 4)] = LN_HALF
        fp = fingerprint_step(fp, 4)
    scorer = TableScorer(Scenario(config=cfg, entries=entries))
    tokens, _ = scorer.generate_caption([3], max_len=3)
    assert tokens == [4, 4, 4]


# -- clip script -----------------------------------------------------------


def _script_scenario(jitter_amp: float = 0.0) -> Scenario:
    cfg = ScorerConfig(vocab_size=3_000_000, eos_token=1, max_generation_len=8)
    script = ClipScript(
        frame_marker_base=10,
        frame_index_base=10_000,
        caption_base=2_200_000,
        caption_len=2,
        tokens_per_frame=2,
        num_clips=2,
        lp_in=(LN_NINE_TENTHS, LN_NINE_TENTHS),
        lp_out=(LN_HALF, LN_HALF),
        jitter_amp=jitter_amp,
    )
    return Scenario(config=cfg, clip_script=script)


def _frame(script_clip: int, frame_index: int) -> list[int]:
    return [10 + script_clip, 10_000 + frame_index]


def test_clip_script_scores_in_clip_vs_boundary():
    scorer = TableScorer(_script_scenario())
    cap0 = scorer.scenario.clip_script.caption_tokens(0)
    in_clip = scorer.score_continuation(_frame(0, 0), cap0)
    assert in_clip.logprobs == (LN_NINE_TENTHS, LN_NINE_TENTHS)
    boundary = scorer.score_continuation(_frame(0, 0) + _frame(1, 1), cap0)
    assert boundary.logprobs == (LN_HALF, LN_HALF)


def test_clip_script_generation_emits_clip_caption_then_stops():
    scorer = TableScorer(_script_scenario())
    script = scorer.scenario.clip_script
    tokens, result = scorer.generate_caption(_frame(1, 3), max_len=8)
    assert tokens == script.caption_tokens(1)
    assert result.logprobs == (LN_NINE_TENTHS, LN_NINE_TENTHS)


def test_clip_script_generation_continues_partial_caption():
    scorer = TableScorer(_script_scenario())
    script = scorer.scenario.clip_script
    cap = script.caption_tokens(0)
    tokens, _ = scorer.generate_caption(_frame(0, 0) + cap[:1], max_len=8)
    assert tokens == cap[1:]
    tokens, _ = scorer.generate_caption(_frame(0, 0) + cap, max_len=8)
    assert tokens == []


def test_clip_script_jitter_shifts_logprob_deterministically():
    amp = 0.05
    scorer = TableScorer(_script_scenario(jitter_amp=amp))
    cap0 = scorer.scenario.clip_script.caption_tokens(0)
    got = scorer.score_continuation(_frame(0, 7), cap0)
    expected = LN_NINE_TENTHS - amp * jitter_unit(7)
    assert got.logprobs == (expected, expected)
    again = scorer.score_continuation(_frame(0, 7), cap0)
    assert again.logprobs == got.logprobs


def test_jitter_unit_is_exact_integer_arithmetic():
    assert jitter_unit(0) == 0.0
    assert jitter_unit(1) == (2654435761 % 2**32) / 2**32
    assert 0.0 <= jitter_unit(1_000_000) < 1.0


def test_table_entries_override_clip_script():
    scenario = _script_scenario()
    cap0 = scenario.clip_script.caption_tokens(0)
    ctx = _frame(0, 0)
    scenario.entries[(fingerprint_tokens(ctx), cap0[0])] = math.log(0.25)
    scorer = TableScorer(scenario)
    got = scorer.score_continuation(ctx, cap0)
    assert got.logprobs == (math.log(0.25), LN_NINE_TENTHS)


# -- hash fallback ---------------------------------------------------------


def test_hash_fallback_is_deterministic_and_in_range():
    cfg = ScorerConfig(vocab_size=1000, eos_token=0)
    fb = FallbackRule(mode="hash", lp_min=-3.0, lp_max=-1.0)
    scorer = TableScorer(Scenario(config=cfg, fallback=fb))
    a = scorer.score_continuation([1, 2], [3, 4])
    b = scorer.score_continuation([1, 2], [3, 4])
    assert a.logprobs == b.logprobs
    assert all(-3.0 <= lp <= -1.0 for lp in a.logprobs)
    c = scorer.score_continuation([2, 1], [3, 4])
    assert c.logprobs != a.logprobs  # context-sensitive


# -- scenario round trip ---------------------------------------------------


def test_scenario_save_load_round_trip(tmp_path):
    scenario = _script_scenario(jitter_amp=0.03)
    scenario.entries[(fingerprint_tokens([5]), 7)] = LN_HALF
    path = tmp_path / "scenario.json"
    save_scenario(path, scenario)
    loaded = load_scenario(path)
    assert loaded.config == scenario.config
    assert loaded.entries == scenario.entries
    assert loaded.clip_script == scenario.clip_script
    assert loaded.fallback == scenario.fallback


def test_scenario_rejects_bad_table_values():
    cfg = ScorerConfig(vocab_size=10, eos_token=0)
    with pytest.raises(ValueError, match="outside vocabulary"):
        Scenario(config=cfg, entries={(1, 10): -1.0})
    with pytest.raises(ValueError, match="not finite non-positive"):
        Scenario(config=cfg, entries={(1, 3): 0.5})


def test_prefix_fingerprint_cache_agrees_with_full_hash():
    scorer = TableScorer(_table_scenario())
    rng = random.Random(11)
    ctx: list[int] = []
    for _ in range(50):
        ctx.append(rng.randrange(100))
        assert scorer._fingerprints.fingerprint(ctx) == fingerprint_tokens(ctx)
