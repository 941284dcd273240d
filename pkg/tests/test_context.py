from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shopper_rl.context import (
    LARGE_BUDGET,
    BudgetTooSmall,
    TokenBudget,
    build_context,
    count_tokens,
    render_prompt,
    static_overhead,
)
from shopper_rl.schema import Action, Persona, Rationale, Step

from conftest import page, random_session, session, truncation_problems

GOLDEN = Path(__file__).parent / "data" / "prompt_v1.txt"
PERSONA = Persona(
    "u7",
    {"age_group": "25-34", "interest": "earbuds"},
    {"decision_style": "deliberate"},
    {"price_sensitivity": 0.9, "patience": 0.2},
)


@pytest.mark.parametrize(
    "text, n",
    [("", 0), ("click the buy button", 4), ("x" * 20, 3), ("  a\tb\n", 2), ("x" * 8, 1), ("x" * 9, 2)],
)
def test_count_tokens(text, n):
    assert count_tokens(text) == n


def test_budget_floor():
    with pytest.raises(ValueError):
        TokenBudget(255)
    TokenBudget(256)


def _steps(n, words=300, rationale_words=1):
    filler = " ".join(["word"] * words)
    acts = [Action.click(f"item_{k}") for k in range(n - 1)] + [Action.terminate()]
    return [
        Step(page([f"item_{k}"], [], filler), a, Rationale(" ".join([f"reason{k}"] * rationale_words)))
        for k, a in enumerate(acts)
    ]


def test_small_history_keeps_all_html():
    steps = _steps(4)
    ctx = build_context(steps, None, 4, TokenBudget(LARGE_BUDGET))
    assert ctx.retained_html == (True, True, True)
    assert [e.step for e in ctx.history] == [1, 2, 3]


def test_two_elisions_from_token_counts():
    steps = _steps(4)
    full = build_context(steps, None, 4, TokenBudget(LARGE_BUDGET)).token_count
    gain = [count_tokens("HTML:\n" + s.observation.html) for s in steps[:3]]
    ctx = build_context(steps, None, 4, TokenBudget(full - gain[0] - gain[1]))
    assert ctx.retained_html == (False, False, True)
    assert ctx.token_count == full - gain[0] - gain[1]
    ctx = build_context(steps, None, 4, TokenBudget(full - gain[0] - gain[1] - 1))
    assert ctx.retained_html == (False, False, False)


def test_whole_entries_dropped_after_all_html():
    steps = _steps(8, words=20, rationale_words=80)
    ctx = build_context(steps, None, 8, TokenBudget(300))
    assert not any(ctx.retained_html)
    assert ctx.dropped_entries > 0
    assert [e.step for e in ctx.history] == list(range(ctx.dropped_entries + 1, 8))
    assert truncation_problems(steps, None, 8, 300) == []


def test_budget_too_small():
    steps = _steps(2, words=400)
    with pytest.raises(BudgetTooSmall):
        build_context(steps, PERSONA, 2, TokenBudget(256))


def test_t_out_of_range():
    with pytest.raises(ValueError):
        build_context(_steps(2), None, 3, TokenBudget(1000))


def _two_entry_ctx():
    s = session(
        [Action.input("search_box", "earbuds"), Action.click("review_link"), Action.click("buy_now")],
        rationales=[Rationale("looking for earbuds"), None, None],
    )
    return build_context(s.steps, PERSONA, 3, TokenBudget(LARGE_BUDGET))


def test_prompt_golden_file():
    assert render_prompt(_two_entry_ctx()) == GOLDEN.read_text(encoding="utf-8")


def test_prompt_sections():
    ctx = _two_entry_ctx()
    text = render_prompt(ctx)
    assert text == render_prompt(ctx)
    assert text.index("## Step 1") < text.index("## Step 2")
    assert "DO NOT RELY ON IT" in text
    bare = build_context(session([Action.click("buy_now")]).steps, None, 1, TokenBudget(1000))
    assert "# Persona" not in render_prompt(bare)
    assert "# Rationale" not in render_prompt(ctx, include_rationale_instruction=False)


def test_static_overhead_is_constant():
    for ctx in (_two_entry_ctx(), build_context(_steps(3), None, 2, TokenBudget(600))):
        for flag in (True, False):
            assert count_tokens(render_prompt(ctx, flag)) - ctx.token_count == static_overhead(flag)


def test_rationale_excluded_on_request():
    ctx = build_context(_steps(3), None, 3, TokenBudget(LARGE_BUDGET), include_rationale=False)
    assert all(e.rationale is None for e in ctx.history)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(256, 3000))
def test_truncation_contract(seed, budget):
    rng = np.random.default_rng(seed)
    s = random_session(rng)
    t = int(rng.integers(1, len(s) + 1))
    try:
        problems = truncation_problems(s.steps, PERSONA, t, budget)
    except BudgetTooSmall:
        return
    assert problems == []


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(256, 2000), st.integers(1, 2000))
def test_larger_budget_never_elides_more(seed, budget, extra):
    rng = np.random.default_rng(seed)
    s = random_session(rng)
    t = len(s)
    try:
        small = build_context(s.steps, None, t, TokenBudget(budget))
    except BudgetTooSmall:
        return
    big = build_context(s.steps, None, t, TokenBudget(budget + extra))
    kept_small = {e.step for e in small.history if e.html is not None}
    kept_big = {e.step for e in big.history if e.html is not None}
    assert kept_small <= kept_big
    assert {e.step for e in small.history} <= {e.step for e in big.history}
