"""Hashed feature vectors for the type, element and text heads of the policy."""

from __future__ import annotations

import hashlib
import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .context import PromptContext
from .schema import ActionKind
from .subtypes import ClickSubtype, classify_click_subtype

_WORD = re.compile(r"[a-z]+")


class FeatureHasher:
    """Signed feature hashing into ``dim`` buckets with a fixed seed."""

    def __init__(self, dim: int, seed: int = 0):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.seed = seed
        self._key = seed.to_bytes(8, "little", signed=True)
        self._cache: dict[str, tuple[int, float]] = {}

    def slot(self, name: str) -> tuple[int, float]:
        hit = self._cache.get(name)
        if hit is None:
            digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8, key=self._key).digest()
            h = int.from_bytes(digest, "little")
            hit = (h % self.dim, 1.0 if (h >> 40) & 1 else -1.0)
            self._cache[name] = hit
        return hit

    def vector(self, feats: Mapping[str, float]) -> np.ndarray:
        out = np.zeros(self.dim)
        for name, value in feats.items():
            idx, sign = self.slot(name)
            out[idx] += sign * value
        return out

    def matrix(self, rows: Sequence[Mapping[str, float]]) -> np.ndarray:
        if not rows:
            return np.zeros((0, self.dim))
        return np.stack([self.vector(r) for r in rows])


def step_bucket(t: int) -> str:
    if t <= 2:
        return str(t)
    if t <= 5:
        return "3-5"
    if t <= 10:
        return "6-10"
    return "11+"


def name_tokens(name: str) -> list[str]:
    return _WORD.findall(name.lower())


@dataclass(frozen=True)
class ContextSummary:
    """Everything the heads read from a prompt context."""

    traits: tuple[tuple[str, float], ...]
    persona_strings: tuple[str, ...]
    last: str
    bucket: str
    history_counts: tuple[tuple[str, int], ...]
    n_inputs: int
    history_terms: tuple[str, ...]
    rationale_words: tuple[str, ...]


def summarize(ctx: PromptContext, use_persona: bool = True, use_rationale: bool = True) -> ContextSummary:
    traits: tuple[tuple[str, float], ...] = ()
    strings: tuple[str, ...] = ()
    persona = ctx.persona if use_persona else None
    if persona is not None:
        traits = tuple((k, 2.0 * float(persona.shopping_prefs[k]) - 1.0) for k in sorted(persona.shopping_prefs))
        strings = tuple(f"demo:{k}={persona.demographics[k]}" for k in sorted(persona.demographics)) + tuple(
            f"pers:{k}={persona.personality[k]}" for k in sorted(persona.personality)
        )
    counts: Counter[str] = Counter()
    n_inputs = 0
    terms: set[str] = set()
    for entry in ctx.history:
        a = entry.action
        if a.kind is ActionKind.CLICK:
            counts[a.fine_type] += 1
        elif a.kind is ActionKind.INPUT:
            n_inputs += 1
            terms.update(a.text.casefold().split())
    last = "none"
    if ctx.history:
        a = ctx.history[-1].action
        last = "input" if a.kind is ActionKind.INPUT else f"click:{a.fine_type}" if a.kind is ActionKind.CLICK else "terminate"
    words: set[str] = set()
    if use_rationale:
        for entry in ctx.history[-3:]:
            if entry.rationale:
                words.update(_WORD.findall(entry.rationale.lower()))
    return ContextSummary(
        traits=traits,
        persona_strings=strings,
        last=last,
        bucket=step_bucket(ctx.step_index),
        history_counts=tuple(sorted(counts.items())),
        n_inputs=n_inputs,
        history_terms=tuple(sorted(terms)),
        rationale_words=tuple(sorted(words)),
    )


def type_features(s: ContextSummary, page_subtypes: Sequence[str], has_input_field: bool) -> dict[str, float]:
    f: dict[str, float] = {"bias": 1.0, f"step:{s.bucket}": 1.0, f"last:{s.last}": 1.0}
    f["hin"] = min(s.n_inputs, 3) / 3.0
    decision = ClickSubtype.PURCHASE.value in page_subtypes
    for sub in page_subtypes:
        f[f"page:{sub}"] = 1.0
    if has_input_field:
        f["page:input_field"] = 1.0
    for sub, c in s.history_counts:
        f[f"hc:{sub}"] = math.log1p(c)
    for k, v in s.traits:
        f[f"tr:{k}"] = v
        if decision:
            f[f"dec*tr:{k}"] = v
    for p in s.persona_strings:
        f[f"p:{p}"] = 1.0
    for w in s.rationale_words:
        f[f"rat:{w}"] = 1.0
        if decision:
            f[f"dec*rat:{w}"] = 1.0
    return f


def element_features(s: ContextSummary, name: str, is_input: bool, decision: bool) -> dict[str, float]:
    sub = "field" if is_input else classify_click_subtype(name).value
    f: dict[str, float] = {f"c:{sub}": 1.0, f"c:{sub}*last:{s.last}": 1.0}
    for tok in name_tokens(name):
        f[f"ct:{tok}"] = 1.0
    for k, v in s.traits:
        f[f"c:{sub}*tr:{k}"] = v
    if decision:
        f[f"c:{sub}*dec"] = 1.0
    return f


def text_features(s: ContextSummary, prefix_words: Sequence[str]) -> dict[str, float]:
    pos = len(prefix_words)
    prev = prefix_words[-1] if prefix_words else "<s>"
    searched = s.n_inputs > 0
    f: dict[str, float] = {
        "x:bias": 1.0,
        f"x:pos:{min(pos, 3)}": 1.0,
        f"x:prev:{prev}": 1.0,
        f"x:searched:{searched}*pos:{min(pos, 2)}": 1.0,
    }
    for p in s.persona_strings:
        f[f"x:{p}"] = 1.0
    if searched and pos == 0:
        for k, v in s.traits:
            f[f"x:tr:{k}*refine"] = v
    for w in s.history_terms:
        f[f"x:hist:{w}"] = 1.0
    return f
