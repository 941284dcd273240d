"""Synthetic persona-driven shopping sessions, JSONL ingestion and ablation transforms.

The generator is the ground-truth user model: every click, query and final
purchase/leave decision is drawn from a distribution that depends on the
user's persona through an exponential tilt, so personalization effects can be
measured against a known cause.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from scipy.optimize import brentq

from .catalog import (
    ELEMENT_LABELS,
    ELEMENT_POOLS,
    FILLER_WORDS,
    MODIFIERS,
    QUERY_NOUNS,
    SEARCH_FIELD,
    TRAIT_MODIFIER,
    TRAITS,
)
from .rationales import human_rationale_for, rationale_for
from .schema import (
    Action,
    Interactable,
    Observation,
    Persona,
    Provenance,
    Rationale,
    Role,
    Session,
    Step,
    Violation,
    personas_by_user,
    validate_session,
)
from .subtypes import SUBTYPE_COUNTS, SUBTYPES, ClickSubtype

S = ClickSubtype
BROWSE_SUBTYPES = tuple(s for s in SUBTYPES if s is not S.PURCHASE)
DECISION_EXTRAS = (S.CART_PAGE_SELECT, S.QUANTITY, S.CART_SIDE_BAR, S.NAV_BAR, S.OTHER, S.PRODUCT_OPTION)
MIN_SESSION_LEN = 3

# Log-odds shift per unit of centred trait (trait * 2 - 1), before scaling by strength.
CLICK_TILT: dict[str, dict[ClickSubtype, float]] = {
    "price_sensitivity": {
        S.FILTER: 1.5, S.REVIEW: 0.8, S.PAGE_RELATED: 0.8, S.CART_SIDE_BAR: 0.3,
        S.PRODUCT_OPTION: -0.5, S.PRODUCT_LINK: -0.6, S.NAV_BAR: -0.4,
    },
    "brand_loyalty": {
        S.PRODUCT_LINK: 1.2, S.NAV_BAR: 0.8, S.SEARCH: 0.3,
        S.REVIEW: -0.8, S.FILTER: -0.6, S.SUGGESTED_TERM: -0.5,
    },
    "patience": {
        S.REVIEW: 1.2, S.PAGE_RELATED: 0.6, S.PRODUCT_OPTION: 0.6,
        S.QUANTITY: -0.6, S.CART_PAGE_SELECT: -0.5, S.OTHER: -0.5,
    },
}
TILT_SCALE = 2.0

# Additive log-odds for the next click given the previous action.
TRANSITIONS: dict[str, dict[ClickSubtype, float]] = {
    "input": {S.SEARCH: 3.0, S.SUGGESTED_TERM: 2.0},
    "click:search": {S.PRODUCT_LINK: 1.5, S.FILTER: 0.5, S.PAGE_RELATED: 0.5},
    "click:suggested_term": {S.PRODUCT_LINK: 1.5},
    "click:product_link": {S.PRODUCT_OPTION: 1.0, S.REVIEW: 1.0},
    "click:product_option": {S.QUANTITY: 1.0, S.PRODUCT_OPTION: 0.5},
    "click:review": {S.REVIEW: 0.8, S.PRODUCT_LINK: 0.3},
    "click:filter": {S.PRODUCT_LINK: 1.0},
    "click:page_related": {S.PRODUCT_LINK: 1.0},
    "click:cart_page_select": {S.QUANTITY: 1.0},
}

# Terminal decision: log-odds of leaving per unit of centred trait.
TERMINATE_TILT = {"price_sensitivity": 5.0, "brand_loyalty": -3.0}
LENGTH_TILT = 1.0  # patience -> longer sessions

AGE_GROUPS = ("18-24", "25-34", "35-44", "45-54", "55+")
GENDERS = ("female", "male", "nonbinary")
INCOMES = ("low", "middle", "high")


class GeneratorError(ValueError):
    pass


class DatasetError(ValueError):
    def __init__(self, path: str | Path, line: int | None, message: str):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.path = str(path)
        self.line = line


class DerangementImpossible(ValueError):
    pass


def _default_prior() -> dict[str, float]:
    total = sum(SUBTYPE_COUNTS.values())
    return {s.value: c / total for s, c in SUBTYPE_COUNTS.items()}


@dataclass(frozen=True)
class GeneratorSpec:
    n_users: int = 49
    n_sessions: int = 527
    mean_session_len: float = 11.11
    action_type_marginals: tuple[float, float, float] = (5051 / 5856, 597 / 5856, 208 / 5856)
    subtype_prior: Mapping[str, float] = field(default_factory=_default_prior)
    persona_effect_strength: float = 0.7
    seed: int = 0
    human_rationale_rate: float = 207 / 5856
    first_step_input_prob: float = 0.85
    page_words: tuple[int, int] = (200, 450)

    def __post_init__(self) -> None:
        object.__setattr__(self, "action_type_marginals", tuple(float(x) for x in self.action_type_marginals))
        object.__setattr__(self, "page_words", tuple(int(x) for x in self.page_words))
        object.__setattr__(self, "subtype_prior", {str(k): float(v) for k, v in self.subtype_prior.items()})
        self.validate()

    def validate(self) -> None:
        if self.n_users < 1 or self.n_sessions < 1:
            raise GeneratorError("n_users and n_sessions must be positive")
        if self.mean_session_len <= MIN_SESSION_LEN:
            raise GeneratorError(f"mean_session_len must exceed {MIN_SESSION_LEN}")
        m = self.action_type_marginals
        if len(m) != 3 or min(m) < 0 or abs(sum(m) - 1.0) > 1e-9:
            raise GeneratorError("action_type_marginals must be 3 non-negative numbers summing to 1")
        if m[2] * self.mean_session_len > 1.0:
            raise GeneratorError("terminate share too high: at most one terminate per session")
        if m[1] * self.mean_session_len >= self.mean_session_len - 2:
            raise GeneratorError("input share too high for the session length")
        prior = self.subtype_prior
        if set(prior) != {s.value for s in SUBTYPES}:
            raise GeneratorError("subtype_prior must cover exactly the 13 click subtypes")
        if min(prior.values()) < 0 or abs(sum(prior.values()) - 1.0) > 1e-9:
            raise GeneratorError("subtype_prior must be non-negative and sum to 1")
        if any(prior[s.value] <= 0 for s in BROWSE_SUBTYPES):
            raise GeneratorError("every browsing subtype needs positive prior mass")
        if not 0.0 <= self.persona_effect_strength <= 1.0:
            raise GeneratorError("persona_effect_strength must lie in [0, 1]")
        if not 0.0 <= self.human_rationale_rate <= 1.0 or not 0.0 <= self.first_step_input_prob <= 1.0:
            raise GeneratorError("probabilities must lie in [0, 1]")
        lo, hi = self.page_words
        if not 0 <= lo <= hi:
            raise GeneratorError("page_words must be an ordered pair of non-negative ints")

    def to_json(self) -> dict[str, Any]:
        out = asdict(self)
        out["action_type_marginals"] = list(self.action_type_marginals)
        out["page_words"] = list(self.page_words)
        out["subtype_prior"] = {s.value: self.subtype_prior[s.value] for s in SUBTYPES}
        return out

    @classmethod
    def from_mapping(cls, cfg: Mapping[str, Any]) -> "GeneratorSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(cfg) - known
        if unknown:
            raise GeneratorError(f"unknown generator keys {sorted(unknown)}")
        kwargs = dict(cfg)
        if "subtype_prior" in kwargs:
            prior = {str(k): float(v) for k, v in kwargs["subtype_prior"].items()}
            total = sum(prior.values())
            if total <= 0:
                raise GeneratorError("subtype_prior must have positive mass")
            kwargs["subtype_prior"] = {k: v / total for k, v in prior.items()}
        return cls(**kwargs)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


class OracleWorld:
    """Quantities derived once from a spec: calibrated intercepts and rates."""

    def __init__(self, spec: GeneratorSpec):
        self.spec = spec
        s = spec.persona_effect_strength
        _, p_input, p_term = spec.action_type_marginals
        L = spec.mean_session_len
        self.p_terminate_base = p_term * L
        inputs_per_session = p_input * L
        self.p_first_input = min(spec.first_step_input_prob, inputs_per_session)
        frac = (inputs_per_session - self.p_first_input) / (L - 2 - self.p_first_input)
        self.p_mid_input = frac / (1.0 - frac) if frac > 0 else 0.0
        self.terminate_intercept = self._calibrate_intercept(s)
        k = s * LENGTH_TILT
        self.length_norm = math.sinh(k) / k if k > 0 else 1.0
        prior = np.array([spec.subtype_prior[b.value] for b in BROWSE_SUBTYPES])
        self.browse_log_prior = dict(zip(BROWSE_SUBTYPES, np.log(prior / prior.sum())))

    def normalize_length(self, personas: Sequence[Persona]) -> None:
        """Rescale the patience tilt so the realized user population hits the mean length."""
        k = self.spec.persona_effect_strength * LENGTH_TILT
        if personas and k > 0:
            c = np.array([2.0 * float(p.shopping_prefs.get("patience", 0.5)) - 1.0 for p in personas])
            self.length_norm = float(np.mean(np.exp(k * c)))

    def _calibrate_intercept(self, strength: float) -> float:
        target = self.p_terminate_base
        if target <= 0.0:
            return -math.inf
        if target >= 1.0:
            return math.inf
        grid = (np.arange(41) + 0.5) / 41 * 2 - 1
        a, b = np.meshgrid(grid, grid)
        shift = strength * (TERMINATE_TILT["price_sensitivity"] * a + TERMINATE_TILT["brand_loyalty"] * b)

        def gap(c: float) -> float:
            return float(np.mean(1 / (1 + np.exp(-(c + shift))))) - target

        return brentq(gap, -30.0, 30.0, xtol=1e-12)


@dataclass
class OracleUser:
    persona: Persona
    world: OracleWorld

    def _centred(self, trait: str) -> float:
        return 2.0 * float(self.persona.shopping_prefs.get(trait, 0.5)) - 1.0

    def click_probs(self, available: Sequence[ClickSubtype], prev: str) -> np.ndarray:
        s = self.world.spec.persona_effect_strength
        trans = TRANSITIONS.get(prev, {})
        logits = []
        for sub in available:
            z = self.world.browse_log_prior[sub] + trans.get(sub, 0.0)
            for trait, table in CLICK_TILT.items():
                z += s * TILT_SCALE * table.get(sub, 0.0) * self._centred(trait)
            logits.append(z)
        z = np.array(logits)
        p = np.exp(z - z.max())
        return p / p.sum()

    def p_terminate(self) -> float:
        s = self.world.spec.persona_effect_strength
        c = self.world.terminate_intercept
        if math.isinf(c):
            return 0.0 if c < 0 else 1.0
        for trait, w in TERMINATE_TILT.items():
            c += s * w * self._centred(trait)
        return _sigmoid(c)

    def mean_extra_length(self) -> float:
        s = self.world.spec.persona_effect_strength
        base = self.world.spec.mean_session_len - MIN_SESSION_LEN
        return base * math.exp(s * LENGTH_TILT * self._centred("patience")) / self.world.length_norm

    def session_noun(self, rng: np.random.Generator) -> str:
        interest = self.persona.demographics.get("interest")
        if interest in QUERY_NOUNS and rng.random() < self.world.spec.persona_effect_strength:
            return interest
        return str(rng.choice(QUERY_NOUNS))

    def refinement(self, rng: np.random.Generator) -> str:
        trait = self.persona.salient_trait()
        if trait in TRAIT_MODIFIER and rng.random() < self.world.spec.persona_effect_strength:
            return TRAIT_MODIFIER[trait]
        return str(rng.choice(MODIFIERS))


def make_persona(user_id: str, rng: np.random.Generator) -> Persona:
    prefs = {t: round(float(rng.random()), 4) for t in TRAITS}
    demographics = {
        "age_group": str(rng.choice(AGE_GROUPS)),
        "gender": str(rng.choice(GENDERS)),
        "income": str(rng.choice(INCOMES)),
        "interest": str(rng.choice(QUERY_NOUNS)),
    }
    personality = {
        "decision_style": "deliberate" if prefs["patience"] >= 0.5 else "impulsive",
        "brand_attitude": "loyal" if prefs["brand_loyalty"] >= 0.5 else "explorer",
        "budget_mindset": "frugal" if prefs["price_sensitivity"] >= 0.5 else "relaxed",
    }
    return Persona(user_id, demographics, personality, prefs)


def _page(
    rng: np.random.Generator,
    subtypes: Sequence[ClickSubtype],
    with_search: bool,
    n_words: int,
) -> tuple[Observation, dict[ClickSubtype, str]]:
    names = {sub: str(rng.choice(ELEMENT_POOLS[sub])) for sub in subtypes}
    widgets = [(f'<button name="{names[sub]}">{ELEMENT_LABELS[sub]}</button>', Interactable(names[sub], Role.CLICKABLE)) for sub in subtypes]
    if with_search:
        widgets.append((f'<input name="{SEARCH_FIELD}" type="text"/>', Interactable(SEARCH_FIELD, Role.INPUT_FIELD)))
    order = rng.permutation(len(widgets))
    widgets = [widgets[i] for i in order]
    words = rng.choice(FILLER_WORDS, size=n_words)
    chunks = np.array_split(words, len(widgets) + 1) if widgets else [words]
    body = []
    for k, chunk in enumerate(chunks):
        if len(chunk):
            body.append("<p>" + " ".join(chunk) + "</p>")
        if k < len(widgets):
            body.append(widgets[k][0])
    html = "<html><body><div id=\"page\">\n" + "\n".join(body) + "\n</div></body></html>"
    return Observation(html, tuple(w[1] for w in widgets)), names


def _generate_session(
    session_id: str,
    user: OracleUser,
    rng: np.random.Generator,
) -> Session:
    world = user.world
    spec = world.spec
    length = MIN_SESSION_LEN + int(rng.poisson(user.mean_extra_length()))
    noun = user.session_noun(rng)
    lo, hi = spec.page_words
    steps: list[Step] = []
    prev = "none"
    searched = False
    for t in range(1, length + 1):
        n_words = int(rng.integers(lo, hi + 1))
        if t == length:
            k = int(rng.integers(3, 6))
            extras = [DECISION_EXTRAS[i] for i in sorted(rng.choice(len(DECISION_EXTRAS), size=k, replace=False))]
            obs, names = _page(rng, [S.PURCHASE, *extras], False, n_words)
            action = Action.terminate() if rng.random() < user.p_terminate() else Action.click(names[S.PURCHASE])
        else:
            forced = [S.SEARCH, S.SUGGESTED_TERM] if prev == "input" else []
            pool = [b for b in BROWSE_SUBTYPES if b not in forced]
            k = int(rng.integers(5, 9)) - len(forced)
            picked = [pool[i] for i in sorted(rng.choice(len(pool), size=k, replace=False))]
            available = forced + picked
            obs, names = _page(rng, available, True, n_words)
            p_input = world.p_first_input if t == 1 else (0.0 if prev == "input" else world.p_mid_input)
            if rng.random() < p_input:
                text = noun if not searched else f"{user.refinement(rng)} {noun}"
                action = Action.input(SEARCH_FIELD, text)
                searched = True
            else:
                probs = user.click_probs(available, prev)
                sub = available[int(rng.choice(len(available), p=probs))]
                action = Action.click(names[sub])
        rationale = None
        if rng.random() < spec.human_rationale_rate:
            rationale = Rationale(human_rationale_for(action), Provenance.HUMAN)
        steps.append(Step(obs, action, rationale))
        prev = "input" if action.kind.value == "input" else f"click:{action.fine_type}"
    return Session(session_id, user.persona.user_id, tuple(steps))


def generate_dataset(spec: GeneratorSpec | None = None) -> tuple[list[Session], list[Persona]]:
    spec = spec or GeneratorSpec()
    root = np.random.SeedSequence(spec.seed)
    persona_seq, assign_seq, session_seq = root.spawn(3)
    prng = np.random.default_rng(persona_seq)
    personas = [make_persona(f"u{u:03d}", prng) for u in range(spec.n_users)]
    sessions = _sessions_for(spec, personas, spec.n_sessions, assign_seq, session_seq, "s")
    return sessions, personas


def generate_heldout(spec: GeneratorSpec, personas: Sequence[Persona], n_sessions: int, stream: int = 1) -> list[Session]:
    """Fresh sessions from the same oracle users, on a random stream disjoint from the corpus."""
    if stream < 1:
        raise GeneratorError("stream 0 is the corpus itself")
    assign_seq, session_seq = np.random.SeedSequence([spec.seed, stream]).spawn(2)
    return _sessions_for(spec, personas, n_sessions, assign_seq, session_seq, f"h{stream}-")


def _sessions_for(
    spec: GeneratorSpec,
    personas: Sequence[Persona],
    n_sessions: int,
    assign_seq: np.random.SeedSequence,
    session_seq: np.random.SeedSequence,
    prefix: str,
) -> list[Session]:
    world = OracleWorld(spec)
    world.normalize_length(personas)
    users = [OracleUser(p, world) for p in personas]
    # balanced assignment keeps per-user session counts within one of each other
    owners = np.random.default_rng(assign_seq).permutation(np.arange(n_sessions) % len(users))
    return [
        _generate_session(f"{prefix}{j:05d}", users[int(owners[j])], np.random.default_rng(seq))
        for j, seq in enumerate(session_seq.spawn(n_sessions))
    ]


def _write_jsonl(path: Path, rows: Sequence[Mapping[str, Any]]) -> None:
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=False) + "\n")


def export_dataset(
    out_dir: str | Path,
    sessions: Sequence[Session],
    personas: Sequence[Persona],
    spec: GeneratorSpec | None = None,
) -> dict[str, Any]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out / "sessions.jsonl", [s.to_json() for s in sessions])
    _write_jsonl(out / "personas.jsonl", [p.to_json() for p in personas])
    manifest = {
        "format": "shopper-rl-dataset/1",
        "n_sessions": len(sessions),
        "n_steps": sum(len(s) for s in sessions),
        "n_users": len(personas),
        "spec": spec.to_json() if spec else None,
        "spec_hash": spec.digest() if spec else None,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


@dataclass(frozen=True)
class IngestViolation:
    line: int
    session_id: str
    violations: tuple[Violation, ...]


@dataclass
class IngestResult:
    sessions: list[Session]
    personas: list[Persona]
    violations: list[IngestViolation]


def _read_jsonl(path: Path) -> list[tuple[int, Any]]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetError(path, None, f"cannot read: {exc}") from exc
    rows = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        try:
            rows.append((lineno, json.loads(line)))
        except json.JSONDecodeError as exc:
            raise DatasetError(path, lineno, f"malformed JSON: {exc.msg}") from None
    return rows


def ingest_jsonl(sessions_path: str | Path, personas_path: str | Path | None = None) -> IngestResult:
    """Load sessions (and a persona sidecar) keeping only sessions that validate."""
    sp = Path(sessions_path)
    if sp.is_dir():
        personas_path = personas_path or (sp / "personas.jsonl")
        sp = sp / "sessions.jsonl"
    personas: list[Persona] = []
    if personas_path is not None and Path(personas_path).exists():
        seen: set[str] = set()
        for lineno, obj in _read_jsonl(Path(personas_path)):
            try:
                persona = Persona.from_json(obj)
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(personas_path, lineno, f"bad persona: {exc}") from None
            if persona.user_id in seen:
                raise DatasetError(personas_path, lineno, f"duplicate user_id {persona.user_id!r}")
            seen.add(persona.user_id)
            personas.append(persona)
    sessions: list[Session] = []
    violations: list[IngestViolation] = []
    for lineno, obj in _read_jsonl(sp):
        try:
            session = Session.from_json(obj)
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(sp, lineno, f"bad session: {exc}") from None
        found = validate_session(session)
        if found:
            violations.append(IngestViolation(lineno, session.session_id, tuple(found)))
        else:
            sessions.append(session)
    return IngestResult(sessions, personas, violations)


def augment_rationales(
    sessions: Sequence[Session],
    personas: Sequence[Persona] | Mapping[str, Persona] = (),
    template_set: Callable[[Action, Persona | None], str] = rationale_for,
) -> list[Session]:
    table = personas if isinstance(personas, Mapping) else personas_by_user(personas)
    out = []
    for session in sessions:
        persona = table.get(session.user_id)
        steps = tuple(
            step if step.rationale is not None
            else Step(step.observation, step.action, Rationale(template_set(step.action, persona), Provenance.AUGMENTED))
            for step in session.steps
        )
        out.append(replace(session, steps=steps))
    return out


class AblationMode(str, Enum):
    NO_PERSONA = "no_persona"
    SHUFFLE_PERSONA = "shuffle_persona"
    NO_RATIONALE = "no_rationale"


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation without fixed points (rejection sampling)."""
    if n < 2:
        raise DerangementImpossible(f"no derangement of {n} element(s)")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def ablate(
    sessions: Sequence[Session],
    personas: Sequence[Persona],
    mode: AblationMode | str,
    seed: int = 0,
) -> tuple[list[Session], list[Persona]]:
    mode = AblationMode(mode)
    if mode is AblationMode.NO_PERSONA:
        return list(sessions), []
    if mode is AblationMode.NO_RATIONALE:
        stripped = [
            replace(s, steps=tuple(Step(st.observation, st.action, None) for st in s.steps)) for s in sessions
        ]
        return stripped, list(personas)
    ordered = sorted(personas, key=lambda p: p.user_id)
    perm = derangement(len(ordered), np.random.default_rng(seed))
    shuffled = [replace(ordered[int(j)], user_id=ordered[i].user_id) for i, j in enumerate(perm)]
    return list(sessions), shuffled
