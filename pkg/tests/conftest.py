from __future__ import annotations

import pytest

from shopper_rl.datagen import GeneratorSpec, generate_dataset
from shopper_rl.schema import Action, ActionKind, Interactable, Observation, Rationale, Role, Session, Step

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def page(clickables=(), inputs=(), filler: str = "") -> Observation:
    parts = [filler] if filler else []
    parts += [f'<button name="{n}">b</button>' for n in clickables]
    parts += [f'<input name="{n}"/>' for n in inputs]
    items = [Interactable(n, Role.CLICKABLE) for n in clickables] + [Interactable(n, Role.INPUT_FIELD) for n in inputs]
    return Observation("<html>" + " ".join(parts) + "</html>", tuple(items))


def session(actions, sid: str = "s1", user: str = "u1", rationales=None) -> Session:
    """A session whose every page exposes exactly the elements its actions need, plus a search box."""
    steps = []
    for k, a in enumerate(actions):
        clicks = [a.element_name] if a.kind is ActionKind.CLICK else []
        if "next_page" not in clicks:
            clicks.append("next_page")
        inputs = [a.element_name] if a.kind is ActionKind.INPUT else ["search_box"]
        rationale = rationales[k] if rationales else None
        steps.append(Step(page(clicks, inputs), a, rationale))
    return Session(sid, user, tuple(steps))


@pytest.fixture(scope="session")
def tiny_corpus():
    spec = GeneratorSpec(n_users=6, n_sessions=24, seed=3, page_words=(20, 40))
    sessions, personas = generate_dataset(spec)
    return spec, sessions, personas


@pytest.fixture
def buy_session():
    return session([Action.input("search_box", "earbuds"), Action.click("review_link"), Action.click("buy_now")])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


WORDS = ("price", "delivery", "manufacturer", "specifications", "ok", "a", "compatible", "xxxxxxxxxxxxxxxxxxxxxxx")


def random_session(rng, max_len: int = 12, max_words: int = 300) -> Session:
    """Random valid-shaped session with pages of varying size and optional rationales."""
    n = int(rng.integers(1, max_len + 1))
    steps = []
    for k in range(n):
        filler = " ".join(rng.choice(WORDS, size=int(rng.integers(0, max_words))))
        name = f"el_{k}_{int(rng.integers(1000))}"
        if k == n - 1:
            action = Action.terminate()
        elif rng.random() < 0.2:
            action = Action.input("search_box", " ".join(rng.choice(WORDS, size=int(rng.integers(1, 4)))))
        else:
            action = Action.click(name)
        rationale = None
        if rng.random() < 0.5:
            rationale = Rationale(" ".join(rng.choice(WORDS, size=int(rng.integers(1, 30)))))
        steps.append(Step(page([name], ["search_box"], filler), action, rationale))
    return Session(f"r{int(rng.integers(10**6))}", "u1", tuple(steps))


def truncation_problems(steps, persona, t: int, max_tokens: int) -> list[str]:
    """Contract violations of one build_context call; empty when it behaves."""
    from dataclasses import replace

    from shopper_rl.context import HistoryEntry, TokenBudget, build_context, count_tokens, render_prompt, static_overhead

    def measured(ctx):
        return count_tokens(render_prompt(ctx)) - static_overhead()

    ctx = build_context(steps, persona, t, TokenBudget(max_tokens))
    out = []
    if ctx.token_count > max_tokens:
        out.append(f"over budget: {ctx.token_count} > {max_tokens}")
    if measured(ctx) != ctx.token_count:
        out.append("token_count disagrees with the rendered prompt")
    if ctx.current_html != steps[t - 1].observation.html:
        out.append("current page altered")
    flags = ctx.retained_html
    if any(a and not b for a, b in zip(flags, flags[1:])):
        out.append("retained html is not a suffix")
    kept = [e.step for e in ctx.history]
    if kept != list(range(t - len(kept), t)):
        out.append(f"kept entries {kept} are not the most recent ones")
    for e in ctx.history:
        src = steps[e.step - 1]
        if e.action != src.action:
            out.append(f"action of step {e.step} changed")
        if e.rationale != (src.rationale.text if src.rationale else None):
            out.append(f"rationale of step {e.step} changed")
        if e.html is not None and e.html != src.observation.html:
            out.append(f"html of step {e.step} changed")
    # greedy minimality: undoing the last truncation must break the budget
    if ctx.dropped_entries:
        k = ctx.dropped_entries
        src = steps[k - 1]
        back = HistoryEntry(k, src.action, src.rationale.text if src.rationale else None)
        if measured(replace(ctx, history=(back,) + ctx.history)) <= max_tokens:
            out.append("dropped an entry that fit")
    elif ctx.history and not all(flags):
        j = max(i for i, f in enumerate(flags) if not f)
        e = ctx.history[j]
        restored = replace(e, html=steps[e.step - 1].observation.html)
        history = ctx.history[:j] + (restored,) + ctx.history[j + 1 :]
        if measured(replace(ctx, history=history)) <= max_tokens:
            out.append("elided html that fit")
    return out
