"""Token accounting, history truncation and prompt assembly."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

from .schema import Action, Persona, Step

PROMPT_VERSION = "prompt_v1"
SMALL_BUDGET = 4096
LARGE_BUDGET = 16384


class BudgetTooSmall(ValueError):
    pass


@lru_cache(maxsize=200_000)
def count_tokens(text: str) -> int:
    """Surrogate tokenizer: whitespace-delimited runs, each worth ceil(len/8) tokens."""
    return sum(-(-len(run) // 8) for run in text.split())


@dataclass(frozen=True)
class TokenBudget:
    max_tokens: int

    def __post_init__(self) -> None:
        if int(self.max_tokens) != self.max_tokens or self.max_tokens < 256:
            raise ValueError("max_tokens must be an integer >= 256")


@dataclass(frozen=True)
class HistoryEntry:
    step: int
    action: Action
    rationale: str | None = None
    html: str | None = None


@dataclass(frozen=True)
class PromptContext:
    persona_block: str | None
    history: tuple[HistoryEntry, ...]
    current_html: str
    token_count: int
    step_index: int = 1
    persona: Persona | None = None
    dropped_entries: int = 0

    @property
    def retained_html(self) -> tuple[bool, ...]:
        return tuple(e.html is not None for e in self.history)


def _render_entry(entry: HistoryEntry) -> str:
    lines = [f"## Step {entry.step}", "Action: " + json.dumps(entry.action.to_json(), ensure_ascii=False)]
    if entry.rationale is not None:
        lines.append("Rationale: " + entry.rationale)
    if entry.html is not None:
        lines.append("HTML:")
        lines.append(entry.html)
    return "\n".join(lines)


def _history_text(history: Sequence[HistoryEntry]) -> str:
    if not history:
        return "(none)"
    return "\n\n".join(_render_entry(e) for e in history)


def _persona_section(persona_block: str | None) -> str | None:
    if persona_block is None:
        return None
    return (
        "# Persona\n"
        "This profile summarizes the shopper's demographics, personality and shopping "
        "preferences. Use the parts that fit the current page and history. DO NOT RELY ON IT.\n"
        + persona_block
    )


def build_context(
    steps: Sequence[Step],
    persona: Persona | None,
    t: int,
    budget: TokenBudget,
    include_rationale: bool = True,
) -> PromptContext:
    """Context for predicting step ``t`` (1-based) from the first ``t - 1`` steps.

    Old HTML is elided earliest-first until the dynamic part fits; if that is not
    enough, whole entries are dropped earliest-first. The current page and the
    persona are never removed.
    """
    if not 1 <= t <= len(steps):
        raise ValueError(f"t={t} outside 1..{len(steps)}")
    entries = [
        HistoryEntry(
            step=k,
            action=step.action,
            rationale=step.rationale.text if (include_rationale and step.rationale is not None) else None,
            html=step.observation.html,
        )
        for k, step in enumerate(steps[: t - 1], start=1)
    ]
    current_html = steps[t - 1].observation.html
    persona_block = persona.describe() if persona is not None else None
    persona_section = _persona_section(persona_block)

    fixed = count_tokens(current_html) + (count_tokens(persona_section) if persona_section else 0)
    if fixed + count_tokens("(none)") > budget.max_tokens:
        raise BudgetTooSmall(f"persona and current page need {fixed} tokens, budget is {budget.max_tokens}")

    full = [count_tokens(_render_entry(e)) for e in entries]
    bare = [count_tokens(_render_entry(HistoryEntry(e.step, e.action, e.rationale))) for e in entries]
    sizes = list(full)
    total = fixed + sum(sizes)
    elided = 0
    while total > budget.max_tokens and elided < len(entries):
        total += bare[elided] - sizes[elided]
        sizes[elided] = bare[elided]
        elided += 1
    dropped = 0
    while total > budget.max_tokens and dropped < len(entries):
        total -= sizes[dropped]
        dropped += 1
    kept = [
        HistoryEntry(e.step, e.action, e.rationale, e.html if k >= elided else None)
        for k, e in enumerate(entries)
    ][dropped:]
    if not kept:
        total = fixed + count_tokens("(none)")
    return PromptContext(
        persona_block=persona_block,
        history=tuple(kept),
        current_html=current_html,
        token_count=total,
        step_index=t,
        persona=persona,
        dropped_entries=dropped,
    )


_TASK = """<IMPORTANT>
Predict the very next action of an online shopper on amazon.com.
Act as that shopper. You are given the earlier actions, their rationales, the pages seen so far and a persona.
Keep the prediction consistent with how people normally move through a store (for example, a query is typed before the search button is pressed).
</IMPORTANT>"""

_ACTION_SPACE = """# Action Space
Actions are JSON objects of three types.

1. `input`: type text into the input field identified by `name`.
{
    "type": "input",
    "name": "input_name",
    "text": "input_text"
}

2. `click`: click the button or clickable element identified by `name`.
{
    "type": "click",
    "name": "clickable_name"
}

3. `terminate`: close the browser window without buying anything.
{
    "type": "terminate"
}"""

_RATIONALE = """# Rationale
A rationale states why the shopper takes an action. Some past rationales are included."""

_CONTEXT = """# Context
Each page is HTML. Interactable elements carry a unique "name" attribute; use it to refer to the element."""

_OUTPUT_WITH_RATIONALE = """# Output Format
Give the rationale first, then the action, as strict JSON:
{
    "rationale": "<why the shopper acts>",
    "action": {"type": "<type>", ...}
}
<IMPORTANT>
OUTPUT A SINGLE JSON OBJECT, NOTHING ELSE.
</IMPORTANT>"""

_OUTPUT_ACTION_ONLY = """# Output Format
Give the action as strict JSON:
{
    "action": {"type": "<type>", ...}
}
<IMPORTANT>
OUTPUT A SINGLE JSON OBJECT, NOTHING ELSE.
</IMPORTANT>"""


def render_prompt(ctx: PromptContext, include_rationale_instruction: bool = True) -> str:
    blocks = [_TASK, _ACTION_SPACE]
    if include_rationale_instruction:
        blocks.append(_RATIONALE)
    blocks.append(_CONTEXT)
    blocks.append("# History\n" + _history_text(ctx.history))
    blocks.append("# Current Page\n" + ctx.current_html)
    persona_section = _persona_section(ctx.persona_block)
    if persona_section is not None:
        blocks.append(persona_section)
    blocks.append(_OUTPUT_WITH_RATIONALE if include_rationale_instruction else _OUTPUT_ACTION_ONLY)
    return "\n\n".join(blocks) + "\n"


def static_overhead(include_rationale_instruction: bool = True) -> int:
    """Tokens that ``render_prompt`` adds on top of ``ctx.token_count``."""
    static = [_TASK, _ACTION_SPACE, _CONTEXT, "# History", "# Current Page"]
    static.append(_OUTPUT_WITH_RATIONALE if include_rationale_instruction else _OUTPUT_ACTION_ONLY)
    if include_rationale_instruction:
        static.append(_RATIONALE)
    return sum(count_tokens(s) for s in static)
