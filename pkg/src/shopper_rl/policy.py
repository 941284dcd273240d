"""Factorized log-linear policy over structured action tokens.

A sequence is ``[type]`` for terminate, ``[type, element]`` for click and
``[type, element, text..., END]`` for input. Each position is a softmax over a
small vocabulary, so log-probabilities, sampling and exact KL are all cheap.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .catalog import QUERY_TERMS
from .context import PromptContext
from .features import ContextSummary, FeatureHasher, element_features, summarize, text_features, type_features
from .rationales import rationale_for
from .schema import Action, ActionKind, Observation, Persona, Role
from .subtypes import classify_click_subtype

CLICK, INPUT, TERMINATE = 0, 1, 2
TYPE_NAMES = ("CLICK", "INPUT", "TERMINATE")
MAX_TEXT_TOKENS = 8
CHECKPOINT_FORMAT = "shopper-rl-checkpoint/1"


class IllegalSequence(ValueError):
    pass


@dataclass(frozen=True)
class CandidateSet:
    clickables: tuple[str, ...] = ()
    input_fields: tuple[str, ...] = ()
    terminate_allowed: bool = True

    def of(self, type_token: int) -> tuple[str, ...]:
        return self.clickables if type_token == CLICK else self.input_fields


def extract_candidates(obs: Observation) -> CandidateSet:
    return CandidateSet(
        clickables=tuple(i.name for i in obs.interactables if i.role is Role.CLICKABLE),
        input_fields=tuple(i.name for i in obs.interactables if i.role is Role.INPUT_FIELD),
    )


@dataclass(frozen=True)
class ActionTokenSeq:
    tokens: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class PolicyConfig:
    feature_dim: int = 512
    hash_seed: int = 0
    vocab: tuple[str, ...] = QUERY_TERMS
    use_persona: bool = True
    use_rationale: bool = True

    @property
    def end_token(self) -> int:
        return len(self.vocab)

    def digest(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass
class PolicyParams:
    weights_type: np.ndarray
    weights_elem: np.ndarray
    weights_text: np.ndarray
    config: PolicyConfig = field(default_factory=PolicyConfig)

    @classmethod
    def zeros(cls, config: PolicyConfig | None = None) -> "PolicyParams":
        config = config or PolicyConfig()
        d = config.feature_dim
        return cls(np.zeros((3, d)), np.zeros(d), np.zeros((len(config.vocab) + 1, d)), config)

    @classmethod
    def random(cls, config: PolicyConfig | None = None, scale: float = 0.01, seed: int = 0) -> "PolicyParams":
        p = cls.zeros(config)
        rng = np.random.default_rng(seed)
        return p.from_flat(scale * rng.standard_normal(p.size))

    @property
    def size(self) -> int:
        return self.weights_type.size + self.weights_elem.size + self.weights_text.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights_type.ravel(), self.weights_elem.ravel(), self.weights_text.ravel()])

    def from_flat(self, vec: np.ndarray) -> "PolicyParams":
        a = self.weights_type.size
        b = a + self.weights_elem.size
        return PolicyParams(
            vec[:a].reshape(self.weights_type.shape).copy(),
            vec[a:b].reshape(self.weights_elem.shape).copy(),
            vec[b:].reshape(self.weights_text.shape).copy(),
            self.config,
        )

    def zeros_like(self) -> "PolicyParams":
        return PolicyParams(
            np.zeros_like(self.weights_type), np.zeros_like(self.weights_elem), np.zeros_like(self.weights_text), self.config
        )

    def copy(self) -> "PolicyParams":
        return self.from_flat(self.flat())

    def add_scaled(self, other: "PolicyParams", alpha: float) -> "PolicyParams":
        return PolicyParams(
            self.weights_type + alpha * other.weights_type,
            self.weights_elem + alpha * other.weights_elem,
            self.weights_text + alpha * other.weights_text,
            self.config,
        )

    def scale_(self, alpha: float) -> None:
        self.weights_type *= alpha
        self.weights_elem *= alpha
        self.weights_text *= alpha

    def digest(self) -> str:
        h = hashlib.sha256(self.config.digest().encode())
        h.update(np.ascontiguousarray(self.flat()).tobytes())
        return h.hexdigest()[:16]

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.flat()).all())

    def to_json(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "config": {**asdict(self.config), "vocab": list(self.config.vocab)},
            "config_hash": self.config.digest(),
            "params_hash": self.digest(),
            "weights_type": self.weights_type.tolist(),
            "weights_elem": self.weights_elem.tolist(),
            "weights_text": self.weights_text.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PolicyParams":
        if obj.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {obj.get('format')!r}")
        cfg = dict(obj["config"])
        cfg["vocab"] = tuple(cfg["vocab"])
        config = PolicyConfig(**cfg)
        if config.digest() != obj["config_hash"]:
            raise ValueError("checkpoint config hash mismatch")
        params = cls(
            np.asarray(obj["weights_type"], dtype=float),
            np.asarray(obj["weights_elem"], dtype=float),
            np.asarray(obj["weights_text"], dtype=float),
            config,
        )
        if params.digest() != obj["params_hash"]:
            raise ValueError("checkpoint parameter hash mismatch")
        return params

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PolicyParams":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


_HASHERS: dict[tuple[int, int], FeatureHasher] = {}


def hasher_for(config: PolicyConfig) -> FeatureHasher:
    key = (config.feature_dim, config.hash_seed)
    if key not in _HASHERS:
        _HASHERS[key] = FeatureHasher(config.feature_dim, config.hash_seed)
    return _HASHERS[key]


class PromptFeatures:
    """Feature vectors of one prompt, shared by every head and cached per text prefix."""

    def __init__(self, ctx: PromptContext, cands: CandidateSet, config: PolicyConfig):
        self.config = config
        self.cands = cands
        self.persona = ctx.persona if config.use_persona else None
        hasher = hasher_for(config)
        self.summary: ContextSummary = summarize(ctx, config.use_persona, config.use_rationale)
        page = sorted({_subtype_name(n) for n in cands.clickables})
        decision = "purchase" in page
        self.type_phi = hasher.vector(type_features(self.summary, page, bool(cands.input_fields)))
        self.type_mask = np.array([bool(cands.clickables), bool(cands.input_fields), True])
        self.elem_phi = {
            CLICK: hasher.matrix([element_features(self.summary, n, False, decision) for n in cands.clickables]),
            INPUT: hasher.matrix([element_features(self.summary, n, True, decision) for n in cands.input_fields]),
        }
        self._text: dict[tuple[int, ...], np.ndarray] = {}
        self._hasher = hasher

    def text_phi(self, prefix: tuple[int, ...]) -> np.ndarray:
        phi = self._text.get(prefix)
        if phi is None:
            words = [self.config.vocab[t] for t in prefix]
            phi = self._hasher.vector(text_features(self.summary, words))
            self._text[prefix] = phi
        return phi


def _subtype_name(name: str) -> str:
    return classify_click_subtype(name).value


def featurize(ctx: PromptContext, cands: CandidateSet, config: PolicyConfig | None = None) -> PromptFeatures:
    return PromptFeatures(ctx, cands, config or PolicyConfig())


Node = tuple  # ("type",) | ("elem", kind) | ("text", prefix)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z)
    shifted = z - m
    return shifted - np.log(np.sum(np.exp(shifted)))


def node_logits(params: PolicyParams, pf: PromptFeatures, node: Node) -> np.ndarray:
    kind = node[0]
    if kind == "type":
        z = params.weights_type @ pf.type_phi
        return np.where(pf.type_mask, z, -np.inf)
    if kind == "elem":
        return pf.elem_phi[node[1]] @ params.weights_elem
    prefix = node[1]
    z = params.weights_text @ pf.text_phi(prefix)
    end = pf.config.end_token
    if len(prefix) == 0:
        z[end] = -np.inf
    elif len(prefix) >= MAX_TEXT_TOKENS - 1:
        keep = z[end]
        z[:] = -np.inf
        z[end] = keep
    return z


def node_backprop(grad: PolicyParams, pf: PromptFeatures, node: Node, dz: np.ndarray) -> None:
    """Accumulate d(objective)/d(params) given d(objective)/d(logits) at ``node``."""
    kind = node[0]
    if kind == "type":
        grad.weights_type += np.outer(dz, pf.type_phi)
    elif kind == "elem":
        grad.weights_elem += dz @ pf.elem_phi[node[1]]
    else:
        grad.weights_text += np.outer(dz, pf.text_phi(node[1]))


class Scorer:
    """Per-node log-probabilities of one prompt under fixed parameters."""

    def __init__(self, params: PolicyParams, pf: PromptFeatures):
        self.params = params
        self.pf = pf
        self._cache: dict[Node, np.ndarray] = {}

    def logp(self, node: Node) -> np.ndarray:
        lp = self._cache.get(node)
        if lp is None:
            lp = _log_softmax(node_logits(self.params, self.pf, node))
            self._cache[node] = lp
        return lp


def seq_nodes(seq: ActionTokenSeq, cands: CandidateSet, end_token: int) -> Iterator[tuple[Node, int]]:
    """Validate ``seq`` against the grammar and yield ``(node, chosen token)`` pairs."""
    toks = seq.tokens
    if not toks:
        raise IllegalSequence("empty sequence")
    t0 = toks[0]
    if t0 not in (CLICK, INPUT, TERMINATE):
        raise IllegalSequence(f"bad type token {t0}")
    if t0 == TERMINATE:
        if len(toks) != 1:
            raise IllegalSequence("terminate takes no further tokens")
        yield ("type",), t0
        return
    options = cands.of(t0)
    if len(toks) < 2 or not 0 <= toks[1] < len(options):
        raise IllegalSequence(f"element token missing or outside {len(options)} candidates")
    yield ("type",), t0
    yield ("elem", t0), toks[1]
    if t0 == CLICK:
        if len(toks) != 2:
            raise IllegalSequence("click takes exactly one element token")
        return
    text = toks[2:]
    if not text or text[-1] != end_token or end_token in text[:-1] or len(text) > MAX_TEXT_TOKENS or len(text) < 2:
        raise IllegalSequence("input text must be 1..7 words followed by END")
    if any(not 0 <= t < end_token for t in text[:-1]):
        raise IllegalSequence("text token outside vocabulary")
    for j, tok in enumerate(text):
        yield ("text", tuple(text[:j])), tok


def log_prob_features(params: PolicyParams, pf: PromptFeatures, seq: ActionTokenSeq, scorer: Scorer | None = None) -> np.ndarray:
    scorer = scorer or Scorer(params, pf)
    out = []
    for node, tok in seq_nodes(seq, pf.cands, pf.config.end_token):
        lp = scorer.logp(node)[tok]
        if not np.isfinite(lp):
            raise IllegalSequence(f"token {tok} is masked at {node}")
        out.append(lp)
    return np.array(out)


def log_prob(params: PolicyParams, ctx: PromptContext, cands: CandidateSet, seq: ActionTokenSeq) -> np.ndarray:
    """Per-token log-probabilities of ``seq``."""
    return log_prob_features(params, featurize(ctx, cands, params.config), seq)


def _draw(lp: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    z = lp / temperature
    finite = np.isfinite(z)
    z = np.where(finite, z - np.max(z[finite]), -np.inf)
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


def sample_features(
    params: PolicyParams,
    pf: PromptFeatures,
    temperature: float,
    rng: np.random.Generator,
    scorer: Scorer | None = None,
) -> tuple[ActionTokenSeq, np.ndarray]:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    scorer = scorer or Scorer(params, pf)
    return _decode(scorer, lambda lp: _draw(lp, temperature, rng))


def greedy_features(params: PolicyParams, pf: PromptFeatures, scorer: Scorer | None = None) -> tuple[ActionTokenSeq, np.ndarray]:
    scorer = scorer or Scorer(params, pf)
    return _decode(scorer, lambda lp: int(np.argmax(lp)))


def _decode(scorer: Scorer, pick) -> tuple[ActionTokenSeq, np.ndarray]:
    end = scorer.pf.config.end_token
    lp = scorer.logp(("type",))
    t0 = pick(lp)
    toks, lps = [t0], [lp[t0]]
    if t0 != TERMINATE:
        lp = scorer.logp(("elem", t0))
        e = pick(lp)
        toks.append(e)
        lps.append(lp[e])
    if t0 == INPUT:
        text: list[int] = []
        while True:
            lp = scorer.logp(("text", tuple(text)))
            tok = pick(lp)
            text.append(tok)
            lps.append(lp[tok])
            if tok == end:
                break
        toks.extend(text)
    return ActionTokenSeq(tuple(toks)), np.array(lps)


def sample(
    params: PolicyParams,
    ctx: PromptContext,
    cands: CandidateSet,
    temperature: float,
    rng_seed: int | np.random.Generator,
) -> tuple[ActionTokenSeq, np.ndarray]:
    """Ancestral sample; returned log-probs are at temperature 1."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return sample_features(params, featurize(ctx, cands, params.config), temperature, rng)


def greedy(params: PolicyParams, ctx: PromptContext, cands: CandidateSet) -> tuple[ActionTokenSeq, np.ndarray]:
    return greedy_features(params, featurize(ctx, cands, params.config))


def encode_action(action: Action, cands: CandidateSet, vocab: Sequence[str] = QUERY_TERMS) -> ActionTokenSeq:
    if action.kind is ActionKind.TERMINATE:
        return ActionTokenSeq((TERMINATE,))
    t0 = CLICK if action.kind is ActionKind.CLICK else INPUT
    options = cands.of(t0)
    if action.element_name not in options:
        raise IllegalSequence(f"{action.element_name!r} is not a candidate")
    toks = [t0, options.index(action.element_name)]
    if t0 == INPUT:
        words = action.text.casefold().split()
        index = {w: i for i, w in enumerate(vocab)}
        if not words or len(words) > MAX_TEXT_TOKENS - 1 or any(w not in index for w in words):
            raise IllegalSequence(f"text {action.text!r} not expressible in the query vocabulary")
        toks.extend(index[w] for w in words)
        toks.append(len(vocab))
    return ActionTokenSeq(tuple(toks))


def decode_to_action(
    seq: ActionTokenSeq,
    cands: CandidateSet,
    persona: Persona | None = None,
    vocab: Sequence[str] = QUERY_TERMS,
) -> tuple[Action, str]:
    list(seq_nodes(seq, cands, len(vocab)))
    t0 = seq.tokens[0]
    if t0 == TERMINATE:
        action = Action.terminate()
    elif t0 == CLICK:
        action = Action.click(cands.clickables[seq.tokens[1]])
    else:
        words = [vocab[t] for t in seq.tokens[2:-1]]
        action = Action.input(cands.input_fields[seq.tokens[1]], " ".join(words))
    return action, rationale_for(action, persona)


def type_distribution(params: PolicyParams, pf: PromptFeatures) -> np.ndarray:
    return np.exp(Scorer(params, pf).logp(("type",)))
