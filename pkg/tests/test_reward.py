from __future__ import annotations

import csv
import json
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from shopper_rl.reward import (
    PRESETS,
    RewardMode,
    RewardSpec,
    action_reward,
    format_reward,
    load_reward_spec,
    preset,
    reward_spec_from_mapping,
    total_reward,
)
from shopper_rl.schema import Action

import oracles

GOLDEN = Path(__file__).parent / "data" / "reward_golden.csv"
SPEC = {"sft_rl": "sft_rl_v1", "rl_only": "rl_only_v1"}


def golden_rows():
    with GOLDEN.open(newline="") as fh:
        return list(csv.DictReader(fh))


def test_golden_file_matches_oracle():
    expected = [(m, r, g, str(t)) for m, r, g, t in oracles.reward_cases()]
    assert [(row["mode"], row["pred_raw"], row["gold"], row["total"]) for row in golden_rows()] == expected


def test_total_reward_reproduces_golden():
    mismatches = []
    for row in golden_rows():
        got = total_reward(row["pred_raw"], Action.from_json(json.loads(row["gold"])), preset(SPEC[row["mode"]])).total
        if got != float(row["total"]):
            mismatches.append((row, got))
    assert not mismatches


def test_schedule_examples():
    spec = preset("sft_rl_v1")
    ok_input = '{"rationale":"r","action":{"type":"input","name":"search_box","text":"earbuds"}}'
    assert total_reward(ok_input, Action.input("search_box", "earbuds"), spec).total == 2001
    review = '{"rationale":"r","action":{"type":"click","name":"review_link"}}'
    assert total_reward(review, Action.click("review_link"), spec).total == 2
    assert total_reward(review, Action.click("buy_now"), spec).total == 0
    assert total_reward(review, Action.click("buy_now"), preset("rl_only_v1")).total == 1


def test_action_reward_examples():
    assert action_reward(Action.click("filter_price"), Action.click("filter_price")) == 1
    assert action_reward(Action.terminate(), Action.terminate()) == 1
    assert action_reward(Action.input("search_box", "earbuds"), Action.input("search_box", "ear buds")) == 0
    assert action_reward(Action.input("search_box", " EarBuds"), Action.input("search_box", "earbuds")) == 1


def test_format_reward_examples():
    assert format_reward('{"rationale":"r","action":{"type":"terminate"}}') == 1
    assert format_reward('{"rationale":"r","action":{"type":"terminate"}}{"rationale":"r","action":{"type":"terminate"}}') == 0
    assert format_reward('{"action":{"type":"terminate"}}') == 0


def test_default_tables():
    sft, rl = PRESETS["sft_rl_v1"], PRESETS["rl_only_v1"]
    assert sft.incorrect_click_penalty == -1 and rl.incorrect_click_penalty == 0
    assert sft.weight_table == rl.weight_table
    assert sft.mode is RewardMode.SFT_RL and rl.mode is RewardMode.RL_ONLY
    assert sorted({v for v in sft.weight_table.values()}) == [1, 10, 1000, 2000]


def test_attainable_values_enumerated():
    for name, values in (("sft_rl_v1", {0, 1, 2, 11, 1001, 2001}), ("rl_only_v1", {0, 1, 2, 11, 1001, 2001})):
        seen = {float(r["total"]) for r in golden_rows() if SPEC[r["mode"]] == name}
        assert seen == values


def test_modes_differ_only_on_incorrect_click():
    rows = golden_rows()
    half = len(rows) // 2
    for a, b in zip(rows[:half], rows[half:]):
        assert (a["pred_raw"], a["gold"]) == (b["pred_raw"], b["gold"])
        pred = json.loads(a["pred_raw"]) if a["pred_raw"].startswith('{"rationale": ') else None
        wrong_click = pred is not None and pred["action"]["type"] == "click" and pred["action"] != json.loads(a["gold"])
        assert (a["total"] != b["total"]) == wrong_click


@given(st.text(max_size=80), st.sampled_from(oracles.VALID_ACTIONS), st.sampled_from(list(PRESETS)))
def test_breakdown_invariants(raw, gold, name):
    out = total_reward(raw, Action.from_json(gold), preset(name))
    assert out.r_action in (0, 1) and out.r_format in (0, 1)
    assert out.r_action <= out.r_format


def test_spec_from_mapping_and_file(tmp_path):
    spec = reward_spec_from_mapping({"preset": "rl_only_v1", "weights": {"review": 5}, "require_rationale": False})
    assert spec.weight_table["review"] == 5 and spec.incorrect_click_penalty == 0 and not spec.require_rationale
    with pytest.raises(ValueError):
        reward_spec_from_mapping({"bogus": 1})
    with pytest.raises(ValueError):
        preset("nope")
    with pytest.raises(ValueError):
        RewardSpec(weight_table={"input": 1})
    path = tmp_path / "reward.yaml"
    path.write_text("preset: sft_rl_v1\nweights:\n  input: 3\n")
    assert load_reward_spec(path).weight_table["input"] == 3
