"""Actions, observations, personas and sessions, plus the JSON output contract."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence

from .subtypes import ClickSubtype, classify_click_subtype


class ActionKind(str, Enum):
    CLICK = "click"
    INPUT = "input"
    TERMINATE = "terminate"


class Role(str, Enum):
    CLICKABLE = "clickable"
    INPUT_FIELD = "input_field"


class Provenance(str, Enum):
    HUMAN = "human"
    AUGMENTED = "augmented"


class SessionOutcome(str, Enum):
    PURCHASE_END = "purchase"
    TERMINATE_END = "terminate"


class FormatViolation(ValueError):
    """Raised when a raw model output does not follow the output contract."""

    REASONS = ("not-json", "multiple-objects", "missing-field", "unknown-type", "bad-attributes")

    def __init__(self, reason: str, detail: str = ""):
        if reason not in self.REASONS:
            raise ValueError(f"unknown violation reason {reason!r}")
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


class InvalidSession(ValueError):
    pass


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    element_name: str | None = None
    text: str | None = None

    def __post_init__(self) -> None:
        kind = ActionKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is ActionKind.TERMINATE:
            if self.element_name is not None or self.text is not None:
                raise ValueError("terminate carries no attributes")
            return
        if not isinstance(self.element_name, str) or not self.element_name:
            raise ValueError(f"{kind.value} needs a non-empty element_name")
        if kind is ActionKind.CLICK and self.text is not None:
            raise ValueError("click carries no text")
        if kind is ActionKind.INPUT and not isinstance(self.text, str):
            raise ValueError("input needs text")

    @classmethod
    def click(cls, name: str) -> "Action":
        return cls(ActionKind.CLICK, name)

    @classmethod
    def input(cls, name: str, text: str) -> "Action":
        return cls(ActionKind.INPUT, name, text)

    @classmethod
    def terminate(cls) -> "Action":
        return cls(ActionKind.TERMINATE)

    @property
    def subtype(self) -> ClickSubtype | None:
        if self.kind is ActionKind.CLICK:
            return classify_click_subtype(self.element_name)
        return None

    @property
    def fine_type(self) -> str:
        """Subtype name for clicks, otherwise the action kind."""
        sub = self.subtype
        return sub.value if sub is not None else self.kind.value

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"type": self.kind.value}
        if self.element_name is not None:
            out["name"] = self.element_name
        if self.text is not None:
            out["text"] = self.text
        return out

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "Action":
        return _action_from_mapping(obj)

    def __str__(self) -> str:
        if self.kind is ActionKind.TERMINATE:
            return "Terminate"
        if self.kind is ActionKind.CLICK:
            return f"Click({self.element_name})"
        return f"Input({self.element_name}, {self.text!r})"


@dataclass(frozen=True)
class Interactable:
    name: str
    role: Role

    def __post_init__(self) -> None:
        object.__setattr__(self, "role", Role(self.role))
        if not self.name:
            raise ValueError("interactable name must be non-empty")


@dataclass(frozen=True)
class Observation:
    html: str
    interactables: tuple[Interactable, ...] = ()

    def __post_init__(self) -> None:
        items = tuple(
            it if isinstance(it, Interactable) else Interactable(*it) for it in self.interactables
        )
        object.__setattr__(self, "interactables", items)
        seen: set[str] = set()
        for it in items:
            if it.name in seen:
                raise ValueError(f"duplicate interactable name {it.name!r}")
            seen.add(it.name)
            if f'name="{it.name}"' not in self.html:
                raise ValueError(f"interactable {it.name!r} has no name attribute in html")

    def role_of(self, name: str) -> Role | None:
        for it in self.interactables:
            if it.name == name:
                return it.role
        return None


@dataclass(frozen=True)
class Rationale:
    text: str
    provenance: Provenance = Provenance.HUMAN

    def __post_init__(self) -> None:
        object.__setattr__(self, "provenance", Provenance(self.provenance))
        if not self.text or not self.text.strip():
            raise ValueError("rationale text must be non-empty")


@dataclass(frozen=True)
class Persona:
    user_id: str
    demographics: Mapping[str, str] = field(default_factory=dict)
    personality: Mapping[str, str] = field(default_factory=dict)
    shopping_prefs: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for key, value in self.shopping_prefs.items():
            if not 0.0 <= float(value) <= 1.0:
                raise ValueError(f"shopping preference {key}={value} outside [0, 1]")

    def salient_trait(self) -> str | None:
        """Preference with the largest value; ties resolve alphabetically."""
        if not self.shopping_prefs:
            return None
        return max(sorted(self.shopping_prefs), key=lambda k: self.shopping_prefs[k])

    def describe(self) -> str:
        lines = [f"User: {self.user_id}"]
        for title, table in (("Demographics", self.demographics), ("Personality", self.personality)):
            if table:
                lines.append(f"{title}: " + "; ".join(f"{k}={table[k]}" for k in sorted(table)))
        if self.shopping_prefs:
            prefs = "; ".join(f"{k}={self.shopping_prefs[k]:.2f}" for k in sorted(self.shopping_prefs))
            lines.append(f"Shopping preferences: {prefs}")
        return "\n".join(lines)

    def to_json(self) -> dict[str, Any]:
        return {
            "user_id": self.user_id,
            "demographics": dict(self.demographics),
            "personality": dict(self.personality),
            "shopping_prefs": {k: float(v) for k, v in self.shopping_prefs.items()},
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "Persona":
        return cls(
            user_id=str(obj["user_id"]),
            demographics={str(k): str(v) for k, v in obj.get("demographics", {}).items()},
            personality={str(k): str(v) for k, v in obj.get("personality", {}).items()},
            shopping_prefs={str(k): float(v) for k, v in obj.get("shopping_prefs", {}).items()},
        )


@dataclass(frozen=True)
class Step:
    observation: Observation
    action: Action
    rationale: Rationale | None = None


@dataclass(frozen=True)
class Session:
    session_id: str
    user_id: str
    steps: tuple[Step, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))

    def __len__(self) -> int:
        return len(self.steps)

    def to_json(self) -> dict[str, Any]:
        steps = []
        for step in self.steps:
            row: dict[str, Any] = {
                "html": step.observation.html,
                "interactables": [
                    {"name": it.name, "role": it.role.value} for it in step.observation.interactables
                ],
            }
            if step.rationale is not None:
                row["rationale"] = step.rationale.text
                if step.rationale.provenance is not Provenance.HUMAN:
                    row["rationale_provenance"] = step.rationale.provenance.value
            row["action"] = step.action.to_json()
            steps.append(row)
        return {"session_id": self.session_id, "user_id": self.user_id, "steps": steps}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "Session":
        steps = []
        for row in obj["steps"]:
            obs = Observation(
                html=row["html"],
                interactables=tuple(Interactable(i["name"], Role(i["role"])) for i in row["interactables"]),
            )
            rationale = None
            if row.get("rationale") is not None:
                rationale = Rationale(row["rationale"], Provenance(row.get("rationale_provenance", "human")))
            steps.append(Step(obs, _action_from_mapping(row["action"], strict=False), rationale))
        return cls(str(obj["session_id"]), str(obj["user_id"]), tuple(steps))


@dataclass(frozen=True)
class RawModelOutput:
    text: str


@dataclass(frozen=True)
class ParsedOutput:
    rationale: str | None
    action: Action


@dataclass(frozen=True)
class Violation:
    rule: str
    step: int | None = None
    detail: str = ""


_REQUIRED_ATTRS = {
    ActionKind.CLICK: ("name",),
    ActionKind.INPUT: ("name", "text"),
    ActionKind.TERMINATE: (),
}


def _action_from_mapping(obj: Any, strict: bool = True) -> Action:
    if not isinstance(obj, Mapping):
        raise FormatViolation("bad-attributes", "action must be an object")
    if "type" not in obj:
        raise FormatViolation("missing-field", "action.type")
    kind_raw = obj["type"]
    try:
        kind = ActionKind(kind_raw)
    except ValueError:
        raise FormatViolation("unknown-type", repr(kind_raw)) from None
    required = _REQUIRED_ATTRS[kind]
    for attr in required:
        if attr not in obj:
            raise FormatViolation("missing-field", f"action.{attr}")
    extra = set(obj) - {"type", *required}
    if strict and extra:
        raise FormatViolation("bad-attributes", f"unexpected {sorted(extra)}")
    for attr in required:
        if not isinstance(obj[attr], str):
            raise FormatViolation("bad-attributes", f"action.{attr} must be a string")
    try:
        return Action(kind, obj.get("name"), obj.get("text"))
    except ValueError as exc:
        raise FormatViolation("bad-attributes", str(exc)) from None


def parse_action_output(raw: RawModelOutput | str, require_rationale: bool = True) -> ParsedOutput:
    """Parse one model generation; raises :class:`FormatViolation` on any deviation."""
    text = raw.text if isinstance(raw, RawModelOutput) else raw
    body = text.strip()
    decoder = json.JSONDecoder()
    try:
        obj, end = decoder.raw_decode(body)
    except json.JSONDecodeError:
        raise FormatViolation("not-json") from None
    if end != len(body):
        rest = body[end:].lstrip()
        try:
            decoder.raw_decode(rest)
        except json.JSONDecodeError:
            raise FormatViolation("not-json", "trailing text after object") from None
        raise FormatViolation("multiple-objects")
    if not isinstance(obj, dict):
        raise FormatViolation("not-json", "top level is not an object")

    allowed = {"rationale", "action"}
    extra = set(obj) - allowed
    if extra:
        raise FormatViolation("bad-attributes", f"unexpected {sorted(extra)}")
    if "action" not in obj:
        raise FormatViolation("missing-field", "action")
    rationale = obj.get("rationale")
    if require_rationale:
        if "rationale" not in obj:
            raise FormatViolation("missing-field", "rationale")
        if not isinstance(rationale, str):
            raise FormatViolation("bad-attributes", "rationale must be a string")
        if not rationale.strip():
            raise FormatViolation("missing-field", "rationale is empty")
    elif rationale is not None and not isinstance(rationale, str):
        raise FormatViolation("bad-attributes", "rationale must be a string")
    return ParsedOutput(rationale, _action_from_mapping(obj["action"]))


def serialize_output(rationale: str | None, action: Action) -> str:
    payload: dict[str, Any] = {}
    if rationale is not None:
        payload["rationale"] = rationale
    payload["action"] = action.to_json()
    return json.dumps(payload, ensure_ascii=False)


def is_purchase_click(action: Action) -> bool:
    return action.kind is ActionKind.CLICK and action.subtype is ClickSubtype.PURCHASE


def validate_session(session: Session) -> list[Violation]:
    """All invariant violations of a session; step numbers are 1-based."""
    if not session.steps:
        return [Violation("empty")]
    out: list[Violation] = []
    last = len(session.steps)
    for t, step in enumerate(session.steps, start=1):
        action = step.action
        if action.kind is ActionKind.TERMINATE:
            if t != last:
                out.append(Violation("terminate-not-final", t))
            continue
        role = step.observation.role_of(action.element_name)
        expected = Role.CLICKABLE if action.kind is ActionKind.CLICK else Role.INPUT_FIELD
        if role is None:
            out.append(Violation("target-missing", t, action.element_name))
        elif role is not expected:
            out.append(Violation("role-mismatch", t, action.element_name))
    final = session.steps[-1].action
    if not (final.kind is ActionKind.TERMINATE or is_purchase_click(final)):
        out.append(Violation("terminal-action", last, str(final)))
    return out


def session_outcome(session: Session) -> SessionOutcome:
    if not session.steps:
        raise InvalidSession("empty session")
    return outcome_of_action(session.steps[-1].action)


def outcome_of_action(action: Action) -> SessionOutcome:
    if action.kind is ActionKind.TERMINATE:
        return SessionOutcome.TERMINATE_END
    if is_purchase_click(action):
        return SessionOutcome.PURCHASE_END
    raise InvalidSession(f"session ends with {action}")


def iter_steps(sessions: Iterable[Session]) -> Iterable[tuple[Session, int, Step]]:
    for session in sessions:
        for t, step in enumerate(session.steps, start=1):
            yield session, t, step


def personas_by_user(personas: Sequence[Persona]) -> dict[str, Persona]:
    table: dict[str, Persona] = {}
    for p in personas:
        if p.user_id in table:
            raise ValueError(f"duplicate persona for user {p.user_id!r}")
        table[p.user_id] = p
    return table
