"""Fine-grained click subtypes and the keyword rule table that assigns them."""

from __future__ import annotations

import json
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence


class ClickSubtype(str, Enum):
    REVIEW = "review"
    SEARCH = "search"
    PRODUCT_OPTION = "product_option"
    PRODUCT_LINK = "product_link"
    OTHER = "other"
    PURCHASE = "purchase"
    NAV_BAR = "nav_bar"
    PAGE_RELATED = "page_related"
    QUANTITY = "quantity"
    SUGGESTED_TERM = "suggested_term"
    CART_SIDE_BAR = "cart_side_bar"
    CART_PAGE_SELECT = "cart_page_select"
    FILTER = "filter"


SUBTYPES: tuple[ClickSubtype, ...] = tuple(ClickSubtype)

# Reference corpus counts per subtype, used as the default generator prior.
SUBTYPE_COUNTS: dict[ClickSubtype, int] = {
    ClickSubtype.REVIEW: 1052,
    ClickSubtype.SEARCH: 763,
    ClickSubtype.PRODUCT_OPTION: 700,
    ClickSubtype.PRODUCT_LINK: 537,
    ClickSubtype.OTHER: 449,
    ClickSubtype.PURCHASE: 321,
    ClickSubtype.NAV_BAR: 283,
    ClickSubtype.PAGE_RELATED: 198,
    ClickSubtype.QUANTITY: 191,
    ClickSubtype.SUGGESTED_TERM: 182,
    ClickSubtype.CART_SIDE_BAR: 145,
    ClickSubtype.CART_PAGE_SELECT: 139,
    ClickSubtype.FILTER: 91,
}

Rule = tuple[ClickSubtype, tuple[str, ...]]


class RuleTable:
    """Ordered keyword rules; the first rule with a keyword contained in the
    lower-cased element name wins, and unmatched names fall back to ``other``."""

    def __init__(self, rules: Sequence[tuple[str | ClickSubtype, Sequence[str]]]):
        parsed: list[Rule] = []
        for subtype, keywords in rules:
            kws = tuple(k.lower() for k in keywords)
            if not kws or any(not k for k in kws):
                raise ValueError(f"rule for {subtype!r} needs non-empty keywords")
            parsed.append((ClickSubtype(subtype), kws))
        self.rules: tuple[Rule, ...] = tuple(parsed)

    @classmethod
    def from_json(cls, path: str | Path) -> "RuleTable":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(payload["rules"])

    def classify(self, element_name: str) -> ClickSubtype:
        if not element_name:
            raise ValueError("element_name must be non-empty")
        name = element_name.lower()
        for subtype, keywords in self.rules:
            if any(k in name for k in keywords):
                return subtype
        return ClickSubtype.OTHER


@lru_cache(maxsize=1)
def default_rules() -> RuleTable:
    text = resources.files("shopper_rl").joinpath("data/subtype_rules.json").read_text("utf-8")
    return RuleTable(json.loads(text)["rules"])


@lru_cache(maxsize=65536)
def _classify_default(element_name: str) -> ClickSubtype:
    return default_rules().classify(element_name)


def classify_click_subtype(element_name: str, rules: RuleTable | None = None) -> ClickSubtype:
    if rules is None:
        if not element_name:
            raise ValueError("element_name must be non-empty")
        return _classify_default(element_name)
    return rules.classify(element_name)
