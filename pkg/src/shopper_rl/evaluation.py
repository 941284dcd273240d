"""Step-level metrics for next-action prediction and the action distribution report."""

from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from .reward import action_reward
from .schema import (
    Action,
    ActionKind,
    FormatViolation,
    RawModelOutput,
    SessionOutcome,
    is_purchase_click,
    outcome_of_action,
    parse_action_output,
)
from .subtypes import SUBTYPES

GOLD_CLASSES = ("click", "input", "terminate")
INVALID = "other"
NEITHER = "neither"
DISTRIBUTION_ROWS = tuple(f"click:{s.value}" for s in SUBTYPES) + ("input", "terminate", INVALID)


@dataclass(frozen=True)
class EvalRecord:
    gold: Action
    raw_pred: RawModelOutput
    parsed_pred: Action | FormatViolation
    session_id: str
    step_index: int
    is_terminal_step: bool

    @property
    def pred_action(self) -> Action | None:
        return self.parsed_pred if isinstance(self.parsed_pred, Action) else None


def make_record(
    gold: Action,
    raw: RawModelOutput | str,
    session_id: str,
    step_index: int,
    is_terminal_step: bool,
    require_rationale: bool = True,
) -> EvalRecord:
    raw = raw if isinstance(raw, RawModelOutput) else RawModelOutput(raw)
    try:
        parsed: Action | FormatViolation = parse_action_output(raw, require_rationale).action
    except FormatViolation as exc:
        parsed = exc
    return EvalRecord(gold, raw, parsed, session_id, step_index, is_terminal_step)


def _require(records: Sequence[EvalRecord]) -> None:
    if not records:
        raise ValueError("no evaluation records")


def pred_type(rec: EvalRecord) -> str:
    pred = rec.pred_action
    return INVALID if pred is None else pred.kind.value


def is_exact(rec: EvalRecord) -> bool:
    pred = rec.pred_action
    return pred is not None and action_reward(pred, rec.gold) == 1


def next_action_accuracy(records: Sequence[EvalRecord]) -> float:
    _require(records)
    return sum(is_exact(r) for r in records) / len(records)


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def action_type_macro_f1(records: Sequence[EvalRecord]) -> float:
    """Macro-F1 over gold classes; unparseable predictions count as a predicted-only class."""
    _require(records)
    pairs = [(r.gold.kind.value, pred_type(r)) for r in records]
    present = [c for c in GOLD_CLASSES if any(g == c or p == c for g, p in pairs)]
    scores = []
    for c in present:
        tp = sum(g == c and p == c for g, p in pairs)
        fp = sum(g != c and p == c for g, p in pairs)
        fn = sum(g == c and p != c for g, p in pairs)
        scores.append(_f1(tp, fp, fn))
    return sum(scores) / len(scores)


def fine_correct(rec: EvalRecord) -> bool:
    pred = rec.pred_action
    if pred is None or pred.kind is not rec.gold.kind:
        return False
    if rec.gold.kind is ActionKind.CLICK:
        return pred.subtype is rec.gold.subtype
    return True


def fine_grained_accuracy(records: Sequence[EvalRecord]) -> float:
    _require(records)
    return sum(fine_correct(r) for r in records) / len(records)


def predicted_outcome(pred: Action | None) -> str:
    if pred is None:
        return NEITHER
    if pred.kind is ActionKind.TERMINATE:
        return SessionOutcome.TERMINATE_END.value
    if is_purchase_click(pred):
        return SessionOutcome.PURCHASE_END.value
    return NEITHER


def outcome_pairs(records: Iterable[EvalRecord]) -> list[tuple[str, str]]:
    return [
        (outcome_of_action(r.gold).value, predicted_outcome(r.pred_action))
        for r in records
        if r.is_terminal_step
    ]


def session_outcome_weighted_f1(records: Sequence[EvalRecord]) -> float:
    """Support-weighted F1 over gold outcomes, scored at each session's terminal step."""
    pairs = outcome_pairs(records)
    if not pairs:
        raise ValueError("no terminal steps among the records")
    support = Counter(g for g, _ in pairs)
    total = 0.0
    for c, n in support.items():
        tp = sum(g == c and p == c for g, p in pairs)
        fp = sum(g != c and p == c for g, p in pairs)
        fn = n - tp
        total += n * _f1(tp, fp, fn)
    return total / len(pairs)


def distribution_key(action: Action | None) -> str:
    if action is None:
        return INVALID
    if action.kind is ActionKind.CLICK:
        return f"click:{action.subtype.value}"
    return action.kind.value


@dataclass(frozen=True)
class DistributionRow:
    type: str
    gold: int
    pred: int
    correct: int


def distribution_report(records: Sequence[EvalRecord]) -> list[DistributionRow]:
    """Gold, predicted and exact-match counts per fine-grained type."""
    _require(records)
    gold = Counter(distribution_key(r.gold) for r in records)
    pred = Counter(distribution_key(r.pred_action) for r in records)
    correct = Counter(distribution_key(r.gold) for r in records if is_exact(r))
    return [DistributionRow(k, gold[k], pred[k], correct[k]) for k in DISTRIBUTION_ROWS]


@dataclass(frozen=True)
class TypeRow:
    type: str
    gold_count: int
    pred_count: int
    correct_count: int
    accuracy: float


def per_type_table(records: Sequence[EvalRecord]) -> list[TypeRow]:
    gold = Counter(r.gold.kind.value for r in records)
    pred = Counter(pred_type(r) for r in records)
    correct = Counter(r.gold.kind.value for r in records if is_exact(r))
    rows = []
    for c in GOLD_CLASSES + (INVALID,):
        acc = correct[c] / gold[c] if gold[c] else 0.0
        rows.append(TypeRow(c, gold[c], pred[c], correct[c], acc))
    return rows


@dataclass(frozen=True)
class MetricsReport:
    next_action_accuracy: float
    action_type_macro_f1: float
    fine_grained_accuracy: float
    session_outcome_weighted_f1: float
    per_type_table: tuple[TypeRow, ...] = ()
    distribution: tuple[DistributionRow, ...] = ()
    n_records: int = 0
    extra: dict[str, Any] = field(default_factory=dict)

    def headline(self) -> dict[str, float]:
        return {
            "next_action_accuracy": self.next_action_accuracy,
            "action_type_macro_f1": self.action_type_macro_f1,
            "fine_grained_accuracy": self.fine_grained_accuracy,
            "session_outcome_weighted_f1": self.session_outcome_weighted_f1,
        }

    def terminate_recall(self) -> float:
        row = next(r for r in self.per_type_table if r.type == "terminate")
        return row.correct_count / row.gold_count if row.gold_count else 0.0

    def share(self, type_name: str, column: str) -> float:
        rows = {r.type: r for r in self.per_type_table}
        total = sum(getattr(r, column) for r in self.per_type_table)
        return getattr(rows[type_name], column) / total if total else 0.0

    def to_json(self) -> dict[str, Any]:
        return {
            **self.headline(),
            "n_records": self.n_records,
            "per_type_table": [vars(r) for r in self.per_type_table],
            "distribution": [vars(r) for r in self.distribution],
            **({"extra": self.extra} if self.extra else {}),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def metrics_csv(self) -> str:
        return _csv(["metric", "value"], [[k, f"{v:.6f}"] for k, v in self.headline().items()])

    def distribution_csv(self) -> str:
        return _csv(["type", "gold", "pred", "correct"], [[r.type, r.gold, r.pred, r.correct] for r in self.distribution])

    def type_table_csv(self) -> str:
        return _csv(
            ["type", "gold_count", "pred_count", "correct_count", "accuracy"],
            [[r.type, r.gold_count, r.pred_count, r.correct_count, f"{r.accuracy:.6f}"] for r in self.per_type_table],
        )


def _csv(header: list[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def evaluate_records(records: Sequence[EvalRecord]) -> MetricsReport:
    return MetricsReport(
        next_action_accuracy=next_action_accuracy(records),
        action_type_macro_f1=action_type_macro_f1(records),
        fine_grained_accuracy=fine_grained_accuracy(records),
        session_outcome_weighted_f1=session_outcome_weighted_f1(records),
        per_type_table=tuple(per_type_table(records)),
        distribution=tuple(distribution_report(records)),
        n_records=len(records),
    )
