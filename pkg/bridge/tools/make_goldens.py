"""Regenerate the bridge conformance fixtures.

Runs the in-process reference scorer over a fixed set of score and
generate calls and freezes every result into test/fixtures/, together
with fingerprint and jitter values.  The TypeScript port must reproduce
each number bit for bit, so keep this script deterministic and rerun it
only when the scenario format itself changes.

Usage:  python3 bridge/tools/make_goldens.py
"""

from __future__ import annotations

import json
import math
import sys
from pathlib import Path

from streamgate.hashing import FNV64_OFFSET, fingerprint_step, fingerprint_tokens
from streamgate.scoring import (
    FallbackRule,
    Scenario,
    ScorerConfig,
    TableScorer,
    jitter_unit,
    save_scenario,
)
from streamgate.synth import SynthSpec, build_frames, caption_tokens, gate_spec
from streamgate.model import token_ids

FIXTURES = Path(__file__).resolve().parent.parent / "test" / "fixtures"


def frame_ids(spec: SynthSpec, index: int) -> list[int]:
    return token_ids(build_frames(spec)[index].tokens)


def score_case(name: str, scorer: TableScorer, context: list[int], continuation: list[int]) -> dict:
    result = scorer.score_continuation(context, continuation)
    return {
        "scenario": name,
        "op": "score",
        "context": context,
        "continuation": continuation,
        "logprobs": list(result.logprobs),
    }


def generate_case(name: str, scorer: TableScorer, context: list[int], max_len: int) -> dict:
    tokens, result = scorer.generate_caption(context, max_len)
    return {
        "scenario": name,
        "op": "generate",
        "context": context,
        "max_len": max_len,
        "tokens": list(tokens),
        "logprobs": list(result.logprobs),
    }


def build_table_scenario() -> Scenario:
    fp_a = fingerprint_tokens([3, 4])
    fp_b = fingerprint_step(fp_a, 5)
    fp_c = fingerprint_step(fp_b, 2)
    entries = {
        (fp_a, 5): math.log(0.9),
        (fp_a, 6): math.log(0.9),  # lp tie with token 5; argmax must pick 5
        (fp_b, 2): math.log(0.95),
        (fp_b, 7): math.log(0.8),
        (fp_c, 0): math.log(0.99),  # eos stops generation here
    }
    return Scenario(
        config=ScorerConfig(vocab_size=50, eos_token=0, max_generation_len=8, context_limit=12),
        entries=entries,
        fallback=FallbackRule(mode="hash", lp_min=-5.0, lp_max=-1.0),
    )


def main() -> int:
    FIXTURES.mkdir(parents=True, exist_ok=True)

    gate = gate_spec()
    jitter = SynthSpec(
        frames_per_clip=(3, 3, 4),
        p_out=(0.5, 0.6, 0.7),
        jitter_amp=0.05,
        caption_len=5,
        tokens_per_frame=4,
    )
    from streamgate.synth import build_scenario

    scenarios = {
        "gate": build_scenario(gate),
        "jitter": build_scenario(jitter),
        "table": build_table_scenario(),
    }
    for name, scenario in scenarios.items():
        save_scenario(FIXTURES / f"{name}.scenario.json", scenario)
    scorers = {name: TableScorer(sc) for name, sc in scenarios.items()}

    g0 = frame_ids(gate, 0)
    g6 = frame_ids(gate, 6)  # first frame of clip 1
    gcap0 = caption_tokens(gate, 0)
    gcap1 = caption_tokens(gate, 1)
    j4 = frame_ids(jitter, 4)  # clip 1
    j7 = frame_ids(jitter, 7)  # clip 2
    jcap1 = caption_tokens(jitter, 1)
    jcap2 = caption_tokens(jitter, 2)

    cases = [
        score_case("gate", scorers["gate"], g0, gcap0),
        score_case("gate", scorers["gate"], g0 + gcap0 + g6, gcap0),
        score_case("gate", scorers["gate"], g0, [1, 1, 1]),
        generate_case("gate", scorers["gate"], g0, 8),
        generate_case("gate", scorers["gate"], g0 + gcap0 + g6, 8),
        generate_case("gate", scorers["gate"], g0 + gcap0[:3], 8),
        generate_case("gate", scorers["gate"], g0, 0),
        generate_case("gate", scorers["gate"], g0, 3),
        score_case("jitter", scorers["jitter"], j7, jcap2),
        score_case("jitter", scorers["jitter"], j7, jcap1),
        generate_case("jitter", scorers["jitter"], j4, 5),
        generate_case("table", scorers["table"], [3, 4], 8),
        score_case("table", scorers["table"], [3, 4], [5, 6, 9]),
        score_case("table", scorers["table"], [], [10]),
        generate_case("table", scorers["table"], [9, 9], 4),
        generate_case("table", scorers["table"], [3, 4, 5], 8),
        generate_case("table", scorers["table"], [3, 4], 1),
    ]

    fnv_inputs = [
        [],
        [0],
        [1],
        [1, 2, 3],
        g0,
        [2654435761, 123456789],
    ]
    fp_a = fingerprint_tokens([3, 4])
    hash_fallback = []
    for fp, token in [(FNV64_OFFSET, 10), (fp_a, 6), (fp_a, 9), (0, 0)]:
        u = (fingerprint_step(fp, token) % (1 << 32)) / float(1 << 32)
        hash_fallback.append(
            {"fp": str(fp), "token": token, "lp_min": -5.0, "lp_max": -1.0, "lp": -5.0 + 4.0 * u}
        )

    goldens = {
        "fnv": [
            {"tokens": ids, "fingerprint": str(fingerprint_tokens(ids))} for ids in fnv_inputs
        ],
        "jitter": [
            {"frame_index": fi, "value": jitter_unit(fi)}
            for fi in (0, 1, 2, 7, 12345, 1048575, (1 << 21) - 1)
        ],
        "hash_fallback": hash_fallback,
        "cases": cases,
    }
    out = FIXTURES / "goldens.json"
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(goldens, fh, indent=1)
        fh.write("\n")
    print(f"wrote {len(cases)} cases to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
