"""Verifiable reward: exact-match action reward, format reward, difficulty weights."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

import yaml

from .schema import Action, ActionKind, FormatViolation, RawModelOutput, parse_action_output
from .subtypes import SUBTYPES, ClickSubtype


class RewardMode(str, Enum):
    SFT_RL = "sft_rl"
    RL_ONLY = "rl_only"


def _default_weights() -> dict[str, float]:
    weights = {s.value: 1000.0 for s in SUBTYPES}
    weights[ClickSubtype.PRODUCT_OPTION.value] = 10.0
    weights[ClickSubtype.REVIEW.value] = 1.0
    weights[ClickSubtype.SEARCH.value] = 1.0
    weights["input"] = 2000.0
    weights["terminate"] = 1.0
    return weights


WEIGHT_KEYS = tuple(s.value for s in SUBTYPES) + ("input", "terminate")


@dataclass(frozen=True)
class RewardSpec:
    mode: RewardMode = RewardMode.SFT_RL
    weight_table: Mapping[str, float] = field(default_factory=_default_weights)
    incorrect_click_penalty: float = -1.0
    format_reward_value: float = 1.0
    require_rationale: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", RewardMode(self.mode))
        missing = set(WEIGHT_KEYS) - set(self.weight_table)
        unknown = set(self.weight_table) - set(WEIGHT_KEYS)
        if missing or unknown:
            raise ValueError(f"weight table mismatch: missing={sorted(missing)} unknown={sorted(unknown)}")

    def weight(self, action: Action) -> float:
        return float(self.weight_table[action.fine_type])

    def to_json(self) -> dict[str, Any]:
        return {
            "mode": self.mode.value,
            "weight_table": {k: float(self.weight_table[k]) for k in WEIGHT_KEYS},
            "incorrect_click_penalty": self.incorrect_click_penalty,
            "format_reward_value": self.format_reward_value,
            "require_rationale": self.require_rationale,
        }


PRESETS: dict[str, RewardSpec] = {
    "sft_rl_v1": RewardSpec(RewardMode.SFT_RL, incorrect_click_penalty=-1.0),
    "rl_only_v1": RewardSpec(RewardMode.RL_ONLY, incorrect_click_penalty=0.0),
}


def preset(name: str) -> RewardSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown reward preset {name!r}; known: {sorted(PRESETS)}") from None


def reward_spec_from_mapping(cfg: Mapping[str, Any]) -> RewardSpec:
    """Build a spec from a preset name plus optional overrides.

    Recognised keys: ``preset``, ``weights`` (partial table), ``incorrect_click_penalty``,
    ``format_reward_value``, ``require_rationale``.
    """
    allowed = {"preset", "weights", "incorrect_click_penalty", "format_reward_value", "require_rationale"}
    unknown = set(cfg) - allowed
    if unknown:
        raise ValueError(f"unknown reward config keys {sorted(unknown)}")
    spec = preset(cfg.get("preset", "sft_rl_v1"))
    if "weights" in cfg:
        table = dict(spec.weight_table)
        table.update({str(k): float(v) for k, v in cfg["weights"].items()})
        spec = replace(spec, weight_table=table)
    for key in ("incorrect_click_penalty", "format_reward_value"):
        if key in cfg:
            spec = replace(spec, **{key: float(cfg[key])})
    if "require_rationale" in cfg:
        spec = replace(spec, require_rationale=bool(cfg["require_rationale"]))
    return spec


def load_reward_spec(path: str | Path) -> RewardSpec:
    text = Path(path).read_text(encoding="utf-8")
    data = yaml.safe_load(text) if str(path).endswith((".yaml", ".yml")) else json.loads(text)
    return reward_spec_from_mapping(data)


@dataclass(frozen=True)
class RewardBreakdown:
    r_action: int
    weight: float
    r_format: int
    total: float


def _norm_text(text: str) -> str:
    return text.strip().casefold()


def action_reward(pred: Action, gold: Action) -> int:
    if pred.kind is not gold.kind:
        return 0
    if pred.kind is ActionKind.TERMINATE:
        return 1
    if pred.element_name != gold.element_name:
        return 0
    if pred.kind is ActionKind.INPUT and _norm_text(pred.text) != _norm_text(gold.text):
        return 0
    return 1


def format_reward(raw: RawModelOutput | str, require_rationale: bool = True) -> int:
    try:
        parse_action_output(raw, require_rationale=require_rationale)
    except FormatViolation:
        return 0
    return 1


def total_reward(raw: RawModelOutput | str, gold: Action, spec: RewardSpec) -> RewardBreakdown:
    try:
        parsed = parse_action_output(raw, require_rationale=spec.require_rationale)
    except FormatViolation:
        return RewardBreakdown(r_action=0, weight=0.0, r_format=0, total=0.0)
    pred = parsed.action
    weight = spec.weight(pred)
    correct = action_reward(pred, gold)
    if correct:
        total = weight + spec.format_reward_value
    elif pred.kind is ActionKind.CLICK:
        total = spec.incorrect_click_penalty + spec.format_reward_value
    else:
        total = spec.format_reward_value
    return RewardBreakdown(r_action=correct, weight=weight, r_format=1, total=float(total))
