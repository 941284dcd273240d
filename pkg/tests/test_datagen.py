from __future__ import annotations

import itertools
import json
from collections import Counter

import numpy as np
import pytest
from scipy.stats import chi2_contingency

from shopper_rl.context import TokenBudget, build_context, render_prompt
from shopper_rl.datagen import (
    DatasetError,
    DerangementImpossible,
    GeneratorError,
    GeneratorSpec,
    OracleUser,
    OracleWorld,
    ablate,
    augment_rationales,
    derangement,
    export_dataset,
    generate_dataset,
    generate_heldout,
    ingest_jsonl,
)
from shopper_rl.schema import Action, Persona, Provenance, Rationale, Session, Step, personas_by_user, validate_session

from conftest import page

HIGH = Persona("hi", {"interest": "earbuds"}, {}, {"price_sensitivity": 1.0, "patience": 1.0, "brand_loyalty": 1.0})
LOW = Persona("lo", {"interest": "tent"}, {}, {"price_sensitivity": 0.0, "patience": 0.0, "brand_loyalty": 0.0})


def _subtype_table(sessions, users):
    counts = {u: Counter(st.action.fine_type for s in sessions if s.user_id == u for st in s.steps if st.action.kind.value == "click") for u in users}
    labels = sorted(set().union(*counts.values()))
    return np.array([[counts[u][k] for k in labels] for u in users])


def test_default_corpus_size():
    sessions, personas = generate_dataset()
    n_steps = sum(len(s) for s in sessions)
    assert len(sessions) == 527 and len(personas) == 49
    assert abs(n_steps - 5856) / 5856 < 0.02
    assert all(validate_session(s) == [] for s in sessions)


def test_sessions_end_in_purchase_or_terminate(tiny_corpus):
    _, sessions, _ = tiny_corpus
    for s in sessions:
        last = s.steps[-1].action
        assert last.kind.value == "terminate" or last.fine_type == "purchase"
        for st in s.steps:
            if st.action.kind.value != "terminate":
                assert st.action.element_name in {i.name for i in st.observation.interactables}


@pytest.mark.slow
def test_type_marginals_at_scale():
    spec = GeneratorSpec(n_sessions=9000, page_words=(0, 2))
    sessions, _ = generate_dataset(spec)
    kinds = Counter(st.action.kind.value for s in sessions for st in s.steps)
    n = sum(kinds.values())
    assert n >= 95_000
    for kind, target in zip(("click", "input", "terminate"), spec.action_type_marginals):
        assert abs(kinds[kind] / n - target) < 0.01


def test_zero_strength_ignores_persona():
    spec = GeneratorSpec(persona_effect_strength=0.0, page_words=(0, 2))
    a = generate_heldout(spec, [HIGH], 50)
    b = generate_heldout(spec, [LOW], 50)
    assert [[st.action for st in s.steps] for s in a] == [[st.action for st in s.steps] for s in b]


def _two_user_steps(strength, n_sessions=900):
    spec = GeneratorSpec(persona_effect_strength=strength, page_words=(0, 2))
    return generate_heldout(spec, [HIGH, LOW], n_sessions)


def test_zero_strength_chi_square_not_significant():
    sessions = _two_user_steps(0.0)
    assert sum(len(s) for s in sessions) >= 10_000
    assert chi2_contingency(_subtype_table(sessions, ["hi", "lo"]))[1] > 0.01


def test_full_strength_chi_square_detects_persona():
    sessions = _two_user_steps(1.0)
    assert sum(len(s) for s in sessions) >= 10_000
    assert chi2_contingency(_subtype_table(sessions, ["hi", "lo"]))[1] < 1e-6


def test_persona_directions():
    frugal = Persona("f", {}, {}, {"price_sensitivity": 1.0, "patience": 0.5, "brand_loyalty": 0.5})
    relaxed = Persona("r", {}, {}, {"price_sensitivity": 0.0, "patience": 0.5, "brand_loyalty": 0.5})
    spec = GeneratorSpec(persona_effect_strength=1.0, page_words=(0, 2))
    world = OracleWorld(spec)
    assert OracleUser(HIGH, world).mean_extra_length() > OracleUser(LOW, world).mean_extra_length()
    assert OracleUser(frugal, world).p_terminate() > OracleUser(relaxed, world).p_terminate()
    sessions = generate_heldout(spec, [frugal, relaxed], 400)
    filters = {u: np.mean([st.action.fine_type == "filter" for s in sessions if s.user_id == u for st in s.steps]) for u in "fr"}
    assert filters["f"] > filters["r"]
    both = _two_user_steps(1.0, 400)
    lengths = {u: np.mean([len(s) for s in both if s.user_id == u]) for u in ("hi", "lo")}
    assert lengths["hi"] > lengths["lo"]


def test_generation_deterministic(tmp_path):
    spec = GeneratorSpec(n_users=5, n_sessions=20, seed=11, page_words=(5, 10))
    for d in ("a", "b"):
        export_dataset(tmp_path / d, *generate_dataset(spec), spec)
    for name in ("sessions.jsonl", "personas.jsonl", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_heldout_stream_differs(tiny_corpus):
    spec, sessions, personas = tiny_corpus
    held = generate_heldout(spec, personas, len(sessions))
    assert {s.session_id for s in held}.isdisjoint(s.session_id for s in sessions)
    assert [s.steps[0].action for s in held] != [s.steps[0].action for s in sessions]
    with pytest.raises(GeneratorError):
        generate_heldout(spec, personas, 5, stream=0)


@pytest.mark.parametrize(
    "bad",
    [
        {"n_sessions": 0},
        {"mean_session_len": 3.0},
        {"action_type_marginals": (0.5, 0.4, 0.2)},
        {"persona_effect_strength": 1.5},
        {"page_words": (10, 5)},
        {"human_rationale_rate": -0.1},
    ],
)
def test_spec_validation(bad):
    with pytest.raises(GeneratorError):
        GeneratorSpec(**bad)


def test_spec_from_mapping_normalizes_prior():
    spec = GeneratorSpec()
    doubled = {k: 2 * v for k, v in spec.subtype_prior.items()}
    prior = GeneratorSpec.from_mapping({"subtype_prior": doubled}).subtype_prior
    assert prior == pytest.approx(spec.subtype_prior, abs=1e-15)
    with pytest.raises(GeneratorError):
        GeneratorSpec.from_mapping({"colour": "red"})


def test_export_ingest_round_trip(tmp_path, tiny_corpus):
    spec, sessions, personas = tiny_corpus
    export_dataset(tmp_path, sessions, personas, spec)
    result = ingest_jsonl(tmp_path)
    assert result.sessions == sessions and result.personas == personas and result.violations == []


def test_malformed_line_named(tmp_path, tiny_corpus):
    _, sessions, personas = tiny_corpus
    export_dataset(tmp_path, sessions[:10], personas)
    path = tmp_path / "sessions.jsonl"
    lines = path.read_text().splitlines()
    lines[6] = lines[6][:-5]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError) as err:
        ingest_jsonl(tmp_path)
    assert err.value.line == 7 and "7" in str(err.value)


def test_terminal_rule_violation_listed_and_excluded(tmp_path, tiny_corpus):
    _, sessions, personas = tiny_corpus
    good = sessions[0]
    bad = Session("broken", good.user_id, good.steps[:-1] + (Step(page(["x_link"]), Action.click("x_link")),))
    export_dataset(tmp_path, [good, bad], personas)
    result = ingest_jsonl(tmp_path)
    assert [s.session_id for s in result.sessions] == [good.session_id]
    assert [(v.line, v.session_id) for v in result.violations] == [(2, "broken")]


def test_augment_rationales(tiny_corpus):
    _, sessions, personas = tiny_corpus
    out = augment_rationales(sessions, personas)
    for before, after in zip(sessions, out):
        for a, b in zip(before.steps, after.steps):
            assert b.rationale is not None
            if a.rationale is not None:
                assert b.rationale == a.rationale
            else:
                assert b.rationale.provenance is Provenance.AUGMENTED
    assert augment_rationales(out, personas) == out


def test_augment_filter_price_template():
    frugal = Persona("u1", {}, {}, {"price_sensitivity": 0.95, "patience": 0.1, "brand_loyalty": 0.1})
    s = Session("s", "u1", (Step(page(["filter_price"]), Action.click("filter_price")), Step(page(), Action.terminate())))
    text = augment_rationales([s], [frugal])[0].steps[0].rationale.text
    assert text.startswith("I want to narrow down by price")
    human = Rationale("my own words", Provenance.HUMAN)
    s2 = Session("s", "u1", (Step(page(["filter_price"]), Action.click("filter_price"), human), s.steps[1]))
    assert augment_rationales([s2], [frugal])[0].steps[0].rationale == human


def test_shuffle_two_users_swaps():
    a, b = Persona("a", {"k": "1"}, {}, {}), Persona("b", {"k": "2"}, {}, {})
    _, shuffled = ablate([], [a, b], "shuffle_persona", seed=4)
    table = personas_by_user(shuffled)
    assert table["a"].demographics == b.demographics and table["b"].demographics == a.demographics


@pytest.mark.parametrize("n", range(2, 7))
def test_derangement_exhaustive(n):
    seen = set()
    for seed in range(400):
        perm = derangement(n, np.random.default_rng(seed))
        assert sorted(perm) == list(range(n))
        assert not any(perm[i] == i for i in range(n))
        seen.add(tuple(int(x) for x in perm))
    fixed_point_free = {p for p in itertools.permutations(range(n)) if all(p[i] != i for i in range(n))}
    assert seen <= fixed_point_free
    if n <= 4:
        assert seen == fixed_point_free


def test_derangement_impossible():
    for n in (0, 1):
        with pytest.raises(DerangementImpossible):
            derangement(n, np.random.default_rng(0))
    with pytest.raises(DerangementImpossible):
        ablate([], [HIGH], "shuffle_persona")


def test_shuffle_seeded_and_fixed_point_free(tiny_corpus):
    _, sessions, personas = tiny_corpus
    _, one = ablate(sessions, personas, "shuffle_persona", seed=9)
    _, two = ablate(sessions, personas, "shuffle_persona", seed=9)
    assert one == two
    original = personas_by_user(personas)
    for p in one:
        assert p.to_json() != original[p.user_id].to_json()


def test_no_persona_and_no_rationale(tiny_corpus):
    _, sessions, personas = tiny_corpus
    kept, table = ablate(sessions, personas, "no_persona")
    assert table == [] and kept == list(sessions)
    s = kept[0]
    text = render_prompt(build_context(s.steps, personas_by_user(table).get(s.user_id), 1, TokenBudget(4096)))
    assert "# Persona" not in text
    stripped, same = ablate(augment_rationales(sessions, personas), personas, "no_rationale")
    assert same == personas
    assert all(st.rationale is None for s in stripped for st in s.steps)


def test_manifest(tmp_path, tiny_corpus):
    spec, sessions, personas = tiny_corpus
    manifest = export_dataset(tmp_path, sessions, personas, spec)
    assert manifest["n_steps"] == sum(len(s) for s in sessions)
    assert json.loads((tmp_path / "manifest.json").read_text())["spec_hash"] == spec.digest()
