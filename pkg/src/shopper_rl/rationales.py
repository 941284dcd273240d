"""Templated rationales keyed on action kind, click subtype and a salient persona trait."""

from __future__ import annotations

from .schema import Action, ActionKind, Persona

TRAIT_PHRASES = {
    "price_sensitivity": "the price",
    "brand_loyalty": "brands I trust",
    "patience": "taking my time",
}

_SPECIAL: dict[tuple[str, str | None], str] = {
    ("filter", "price_sensitivity"): "I want to narrow down by price, so I click {element}.",
    ("filter", "brand_loyalty"): "I want to see only the brands I know, so I click {element}.",
    ("review", "patience"): "I like reading what other buyers say before deciding, so I open {element}.",
    ("review", "price_sensitivity"): "I want to know if it is worth the money, so I open {element}.",
    ("product_link", "brand_loyalty"): "This listing is from a brand I trust, so I open {element}.",
    ("page_related", "patience"): "I am happy to keep browsing, so I click {element}.",
    ("terminate", "price_sensitivity"): "Nothing here fits what I need at a price I accept, so I close the window.",
}

_BY_TYPE: dict[str, str] = {
    "purchase": "This fits what I need, so I click {element} to buy it.",
    "terminate": "Nothing here fits what I need, so I close the window.",
    "input": 'I type "{text}" into {element} to find what I want.',
    "search": "I want to run my query, so I click {element}.",
    "suggested_term": "That suggestion matches what I am looking for, so I click {element}.",
}

_GENERIC = "Because I care about {trait}, I click {element}."
_NO_PERSONA = "I click {element} to continue shopping."

# Phrasing used for the sparse human-written rationales in generated corpora.
HUMAN_TEMPLATES: dict[str, str] = {
    "input": "wanted to look up {text}",
    "terminate": "did not find anything good, leaving",
    "purchase": "ok this one, buying it",
    "click": "checking {element} first",
}


def rationale_for(action: Action, persona: Persona | None = None) -> str:
    fine = action.fine_type
    trait = persona.salient_trait() if persona is not None else None
    element = action.element_name or ""
    text = action.text or ""
    template = _SPECIAL.get((fine, trait)) or _BY_TYPE.get(fine)
    if template is None:
        if trait is None:
            template = _NO_PERSONA
        else:
            return _GENERIC.format(trait=TRAIT_PHRASES.get(trait, trait.replace("_", " ")), element=element)
    return template.format(element=element, text=text)


def human_rationale_for(action: Action) -> str:
    if action.kind is ActionKind.CLICK:
        key = "purchase" if action.fine_type == "purchase" else "click"
    else:
        key = action.kind.value
    return HUMAN_TEMPLATES[key].format(element=action.element_name or "", text=action.text or "")
