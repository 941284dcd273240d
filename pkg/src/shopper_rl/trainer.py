"""Supervised and group-relative policy-gradient training with exact analytic gradients."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Mapping, Sequence

import numpy as np

from .context import SMALL_BUDGET, TokenBudget, build_context
from .evaluation import EvalRecord, MetricsReport, evaluate_records, make_record
from .policy import (
    ActionTokenSeq,
    CandidateSet,
    IllegalSequence,
    PolicyConfig,
    PolicyParams,
    PromptFeatures,
    Scorer,
    decode_to_action,
    encode_action,
    extract_candidates,
    featurize,
    greedy_features,
    sample_features,
    seq_nodes,
)
from .reward import RewardSpec, total_reward
from .schema import Action, Persona, Rationale, Provenance, Session, Step, personas_by_user, serialize_output

log = logging.getLogger(__name__)


class TrainMode(str, Enum):
    ZERO_SHOT = "zero_shot"
    SFT_ONLY = "sft"
    RL_ONLY = "rl"
    SFT_THEN_RL = "sft_rl"


class StaleRollout(RuntimeError):
    pass


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    kl_coef: float = 0.01
    adv_delta: float = 1e-6
    learning_rate: float = 0.05
    batch_size: int = 64
    epochs: int = 2
    temperature: float = 1.0
    seed: int = 0
    inner_steps: int = 1
    ref_refresh_epochs: int = 0  # 0 keeps the reference frozen for the whole run

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.kl_coef < 0 or self.adv_delta <= 0:
            raise ValueError("kl_coef must be >= 0 and adv_delta > 0")
        if self.learning_rate <= 0 or self.temperature <= 0:
            raise ValueError("learning_rate and temperature must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.inner_steps < 1 or self.ref_refresh_epochs < 0:
            raise ValueError("batch_size, inner_steps must be positive and epochs non-negative")


@dataclass(frozen=True)
class SftConfig:
    learning_rate: float = 0.5
    epochs: int = 6
    batch_size: int = 64

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("invalid SFT configuration")


@dataclass(frozen=True)
class TrainConfig:
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    sft: SftConfig = field(default_factory=SftConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    budget: int = SMALL_BUDGET
    init_scale: float = 0.01
    seed: int = 0


# -- prompts ---------------------------------------------------------------


@dataclass
class Example:
    """One prediction step: the prompt's features, its candidates and the gold action."""

    session_id: str
    step_index: int
    is_terminal: bool
    gold: Action
    pf: PromptFeatures
    gold_seq: ActionTokenSeq | None

    @property
    def cands(self) -> CandidateSet:
        return self.pf.cands


def build_examples(
    sessions: Sequence[Session],
    personas: Sequence[Persona] | Mapping[str, Persona],
    config: PolicyConfig | None = None,
    budget: int | TokenBudget = SMALL_BUDGET,
) -> list[Example]:
    config = config or PolicyConfig()
    budget = budget if isinstance(budget, TokenBudget) else TokenBudget(budget)
    table = personas if isinstance(personas, Mapping) else personas_by_user(personas)
    out = []
    for session in sessions:
        persona = table.get(session.user_id) if config.use_persona else None
        for t, step in enumerate(session.steps, start=1):
            ctx = build_context(session.steps, persona, t, budget, include_rationale=config.use_rationale)
            cands = extract_candidates(step.observation)
            try:
                gold_seq = encode_action(step.action, cands, config.vocab)
            except IllegalSequence:
                gold_seq = None
            out.append(
                Example(session.session_id, t, t == len(session), step.action, featurize(ctx, cands, config), gold_seq)
            )
    return out


def split_sessions(sessions: Sequence[Session], eval_fraction: float, seed: int) -> tuple[list[Session], list[Session]]:
    """Deterministic split by session; the held-out part is at least one session."""
    if not 0.0 < eval_fraction < 1.0:
        raise ValueError("eval_fraction must lie in (0, 1)")
    order = np.random.default_rng(np.random.SeedSequence([seed, 7])).permutation(len(sessions))
    n_eval = max(1, int(round(eval_fraction * len(sessions))))
    held = set(order[:n_eval].tolist())
    train = [s for i, s in enumerate(sessions) if i not in held]
    test = [s for i, s in enumerate(sessions) if i in held]
    return train, test


# -- gradients -------------------------------------------------------------


class GradAccumulator:
    """Collects (d objective / d logits, features) pairs and reduces them with one matmul per head."""

    def __init__(self, params: PolicyParams):
        self.params = params
        self._type: list[tuple[np.ndarray, np.ndarray]] = []
        self._elem: list[tuple[np.ndarray, np.ndarray]] = []
        self._text: list[tuple[np.ndarray, np.ndarray]] = []

    def add(self, pf: PromptFeatures, node: tuple, dz: np.ndarray) -> None:
        kind = node[0]
        if kind == "type":
            self._type.append((dz, pf.type_phi))
        elif kind == "elem":
            self._elem.append((dz, pf.elem_phi[node[1]]))
        else:
            self._text.append((dz, pf.text_phi(node[1])))

    def result(self, scale: float = 1.0) -> PolicyParams:
        grad = self.params.zeros_like()
        if self._type:
            dz = np.stack([a for a, _ in self._type])
            phi = np.stack([b for _, b in self._type])
            grad.weights_type += dz.T @ phi
        if self._elem:
            dz = np.concatenate([a for a, _ in self._elem])
            phi = np.concatenate([b for _, b in self._elem])
            grad.weights_elem += dz @ phi
        if self._text:
            dz = np.stack([a for a, _ in self._text])
            phi = np.stack([b for _, b in self._text])
            grad.weights_text += dz.T @ phi
        if scale != 1.0:
            grad.scale_(scale)
        return grad


def _probs(lp: np.ndarray) -> np.ndarray:
    return np.exp(lp)  # masked entries have lp = -inf and map to exactly 0


def _as_pf(params: PolicyParams, step) -> tuple[PromptFeatures, ActionTokenSeq]:
    if isinstance(step, Example):
        if step.gold_seq is None:
            raise IllegalSequence(f"gold action of {step.session_id}:{step.step_index} is not encodable")
        return step.pf, step.gold_seq
    if len(step) == 2:
        return step
    ctx, cands, seq = step
    return featurize(ctx, cands, params.config), seq


def _sft_accumulate(params: PolicyParams, pf: PromptFeatures, seq: ActionTokenSeq, acc: GradAccumulator) -> float:
    scorer = Scorer(params, pf)
    nodes = list(seq_nodes(seq, pf.cands, pf.config.end_token))
    n = len(nodes)
    loss = 0.0
    for node, tok in nodes:
        lp = scorer.logp(node)
        if not np.isfinite(lp[tok]):
            raise IllegalSequence(f"gold token {tok} is masked at {node}")
        loss -= lp[tok] / n
        dz = _probs(lp)
        dz[tok] -= 1.0
        acc.add(pf, node, dz / n)
    return loss


def sft_loss(params: PolicyParams, step) -> tuple[float, PolicyParams]:
    """Mean token cross-entropy of the gold sequence and its exact gradient.

    ``step`` is an :class:`Example`, a ``(PromptFeatures, seq)`` pair or a
    ``(PromptContext, CandidateSet, seq)`` triple.
    """
    pf, seq = _as_pf(params, step)
    acc = GradAccumulator(params)
    loss = _sft_accumulate(params, pf, seq, acc)
    return loss, acc.result()


def sft_batch_loss(params: PolicyParams, steps: Sequence) -> tuple[float, PolicyParams]:
    acc = GradAccumulator(params)
    total = 0.0
    for step in steps:
        pf, seq = _as_pf(params, step)
        total += _sft_accumulate(params, pf, seq, acc)
    return total / len(steps), acc.result(1.0 / len(steps))


def group_advantages(rewards: Sequence[float], delta: float = 1e-6) -> np.ndarray:
    """Standardize rewards within a group with the population std; a flat group gives zeros."""
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise ValueError("a group needs at least two rewards")
    sigma = r.std()
    if sigma == 0.0:
        return np.zeros_like(r)
    return (r - r.mean()) / (sigma + delta)


@dataclass(frozen=True)
class RolloutSample:
    seq: ActionTokenSeq
    old_logp: np.ndarray
    reward: float
    action: Action
    raw: str


@dataclass(frozen=True)
class RolloutGroup:
    pf: PromptFeatures
    gold: Action
    samples: tuple[RolloutSample, ...]
    advantages: np.ndarray
    params_old_digest: str

    @property
    def cands(self) -> CandidateSet:
        return self.pf.cands


def collect_group(
    params_old: PolicyParams,
    pf: PromptFeatures,
    gold: Action,
    reward_spec: RewardSpec,
    cfg: GrpoConfig,
    rng: np.random.Generator,
    old_digest: str | None = None,
) -> RolloutGroup:
    scorer = Scorer(params_old, pf)
    samples = []
    for _ in range(cfg.group_size):
        seq, lps = sample_features(params_old, pf, cfg.temperature, rng, scorer)
        action, rationale = decode_to_action(seq, pf.cands, pf.persona, pf.config.vocab)
        raw = serialize_output(rationale if reward_spec.require_rationale else None, action)
        reward = total_reward(raw, gold, reward_spec).total
        samples.append(RolloutSample(seq, lps, reward, action, raw))
    adv = group_advantages([s.reward for s in samples], cfg.adv_delta)
    return RolloutGroup(pf, gold, tuple(samples), adv, old_digest or params_old.digest())


@dataclass(frozen=True)
class GrpoTerms:
    loss: float
    surrogate: float
    kl: float
    clip_fraction: float
    n_tokens: int


def _grpo_accumulate(
    params: PolicyParams,
    params_ref: PolicyParams,
    group: RolloutGroup,
    cfg: GrpoConfig,
    acc: GradAccumulator | None,
) -> GrpoTerms:
    pf = group.pf
    cur = Scorer(params, pf)
    ref = Scorer(params_ref, pf)
    G = len(group.samples)
    eps, beta = cfg.clip_eps, cfg.kl_coef
    dz_by_node: dict[tuple, np.ndarray] = {}
    surrogate = kl_total = 0.0
    clipped = n_tok = 0
    for sample, adv in zip(group.samples, group.advantages):
        nodes = list(seq_nodes(sample.seq, pf.cands, pf.config.end_token))
        if len(nodes) != len(sample.old_logp):
            raise ValueError("old log-probs do not match the sampled sequence")
        w = 1.0 / (G * len(nodes))
        for (node, tok), old in zip(nodes, sample.old_logp):
            lp = cur.logp(node)
            p = _probs(lp)
            ratio = float(np.exp(lp[tok] - old))
            is_clipped = (adv > 0 and ratio > 1.0 + eps) or (adv < 0 and ratio < 1.0 - eps)
            n_tok += 1
            dz = np.zeros_like(lp)
            if is_clipped:
                clipped += 1
                surrogate += w * float(np.clip(ratio, 1.0 - eps, 1.0 + eps)) * adv
            else:
                surrogate += w * ratio * adv
                # d(r A)/dz = A r (onehot - p)
                dz -= w * adv * ratio * p
                dz[tok] += w * adv * ratio
            live = p > 0
            lq = ref.logp(node)
            diff = np.where(live, lp - np.where(live, lq, 0.0), 0.0)
            kl = float(np.sum(p * diff))
            if kl < -1e-12:
                raise AssertionError(f"negative KL {kl} at {node}")
            kl_total += w * kl
            if beta:
                dz -= beta * w * p * (diff - kl)
            if acc is not None:
                prev = dz_by_node.get(node)
                dz_by_node[node] = dz if prev is None else prev + dz
    if acc is not None:
        for node, dz in dz_by_node.items():
            acc.add(pf, node, -dz)  # gradient of the loss, i.e. minus the objective
    objective = surrogate - beta * kl_total
    return GrpoTerms(-objective, surrogate, kl_total, clipped / n_tok if n_tok else 0.0, n_tok)


def grpo_terms(
    params: PolicyParams,
    params_old: PolicyParams,
    params_ref: PolicyParams,
    group: RolloutGroup,
    cfg: GrpoConfig,
) -> tuple[GrpoTerms, PolicyParams]:
    if params_old.digest() != group.params_old_digest:
        raise StaleRollout("rollouts were not produced by the given old parameters")
    acc = GradAccumulator(params)
    terms = _grpo_accumulate(params, params_ref, group, cfg, acc)
    return terms, acc.result()


def grpo_loss(
    params: PolicyParams,
    params_old: PolicyParams,
    params_ref: PolicyParams,
    group: RolloutGroup,
    cfg: GrpoConfig,
) -> tuple[float, PolicyParams]:
    """Negative clipped-surrogate objective with an exact KL penalty, and its gradient."""
    terms, grad = grpo_terms(params, params_old, params_ref, group, cfg)
    return terms.loss, grad


# -- evaluation ------------------------------------------------------------


def predict(params: PolicyParams, ex: Example) -> tuple[Action, str]:
    seq, _ = greedy_features(params, ex.pf)
    action, rationale = decode_to_action(seq, ex.cands, ex.pf.persona, params.config.vocab)
    raw = serialize_output(rationale if params.config.use_rationale else None, action)
    return action, raw


def predict_records(params: PolicyParams, examples: Sequence[Example]) -> list[EvalRecord]:
    out = []
    for ex in examples:
        _, raw = predict(params, ex)
        out.append(make_record(ex.gold, raw, ex.session_id, ex.step_index, ex.is_terminal, params.config.use_rationale))
    return out


def evaluate_examples(params: PolicyParams, examples: Sequence[Example]) -> MetricsReport:
    return evaluate_records(predict_records(params, examples))


def free_running_records(
    params: PolicyParams,
    sessions: Sequence[Session],
    personas: Sequence[Persona] | Mapping[str, Persona],
    budget: int = SMALL_BUDGET,
) -> list[EvalRecord]:
    """Roll each session forward on the model's own past actions over the logged pages."""
    config = params.config
    table = personas if isinstance(personas, Mapping) else personas_by_user(personas)
    tb = TokenBudget(budget)
    out = []
    for session in sessions:
        persona = table.get(session.user_id) if config.use_persona else None
        rolled: list[Step] = []
        for t, step in enumerate(session.steps, start=1):
            ctx = build_context(rolled + [step], persona, t, tb, include_rationale=config.use_rationale)
            cands = extract_candidates(step.observation)
            ex = Example(session.session_id, t, t == len(session), step.action, featurize(ctx, cands, config), None)
            action, raw = predict(params, ex)
            out.append(make_record(step.action, raw, session.session_id, t, t == len(session), config.use_rationale))
            _, rationale = decode_to_action(encode_action(action, cands, config.vocab), cands, ex.pf.persona, config.vocab)
            rolled.append(Step(step.observation, action, Rationale(rationale, Provenance.AUGMENTED)))
    return out


# -- training loop ---------------------------------------------------------

LOG_COLUMNS = ("phase", "epoch", "batch", "mean_reward", "loss", "kl", "clip_fraction")
EVAL_COLUMNS = ("phase", "epoch", "next_action_accuracy", "action_type_macro_f1", "fine_grained_accuracy", "session_outcome_weighted_f1")


@dataclass
class TrainResult:
    params: PolicyParams
    log: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    rl_start_digest: str | None = None

    def log_csv(self) -> str:
        return _rows_csv(LOG_COLUMNS, self.log)

    def eval_csv(self) -> str:
        return _rows_csv(EVAL_COLUMNS, self.evals)

    def rl_rewards(self) -> list[float]:
        return [r["mean_reward"] for r in self.log if r["phase"] == "rl"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def _rows_csv(columns: Sequence[str], rows: Sequence[Mapping]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def _record_eval(result: TrainResult, phase: str, epoch: int, params: PolicyParams, eval_examples) -> None:
    if not eval_examples:
        return
    report = evaluate_examples(params, eval_examples)
    result.evals.append({"phase": phase, "epoch": epoch, **report.headline()})
    log.info("%s epoch %d eval accuracy %.4f", phase, epoch, report.next_action_accuracy)


def run_sft(
    params: PolicyParams,
    examples: Sequence[Example],
    cfg: SftConfig,
    rng: np.random.Generator,
    result: TrainResult,
    eval_examples: Sequence[Example] = (),
) -> PolicyParams:
    usable = [ex for ex in examples if ex.gold_seq is not None]
    if len(usable) < len(examples):
        log.warning("skipping %d examples whose gold action is not encodable", len(examples) - len(usable))
    for epoch in range(1, cfg.epochs + 1):
        for b, idx in enumerate(_batches(len(usable), cfg.batch_size, rng), start=1):
            loss, grad = sft_batch_loss(params, [usable[i] for i in idx])
            params = params.add_scaled(grad, -cfg.learning_rate)
            result.log.append({"phase": "sft", "epoch": epoch, "batch": b, "loss": loss})
        _record_eval(result, "sft", epoch, params, eval_examples)
    return params


def run_grpo(
    params: PolicyParams,
    examples: Sequence[Example],
    reward_spec: RewardSpec,
    cfg: GrpoConfig,
    seq: np.random.SeedSequence,
    result: TrainResult,
    eval_examples: Sequence[Example] = (),
) -> PolicyParams:
    order_seq, sample_seq = seq.spawn(2)
    order_rng = np.random.default_rng(order_seq)
    params_ref = params.copy()
    result.rl_start_digest = params.digest()
    for epoch in range(1, cfg.epochs + 1):
        if cfg.ref_refresh_epochs and epoch > 1 and (epoch - 1) % cfg.ref_refresh_epochs == 0:
            params_ref = params.copy()
        batches = _batches(len(examples), cfg.batch_size, order_rng)
        for b, (idx, bseq) in enumerate(zip(batches, sample_seq.spawn(len(batches))), start=1):
            params_old = params.copy()
            old_digest = params_old.digest()
            rng = np.random.default_rng(bseq)
            groups = [
                collect_group(params_old, examples[i].pf, examples[i].gold, reward_spec, cfg, rng, old_digest)
                for i in idx
            ]
            rewards = float(np.mean([s.reward for g in groups for s in g.samples]))
            for _ in range(cfg.inner_steps):
                acc = GradAccumulator(params)
                terms = [_grpo_accumulate(params, params_ref, g, cfg, acc) for g in groups]
                params = params.add_scaled(acc.result(1.0 / len(groups)), -cfg.learning_rate)
            n_tok = sum(t.n_tokens for t in terms)
            result.log.append(
                {
                    "phase": "rl",
                    "epoch": epoch,
                    "batch": b,
                    "mean_reward": rewards,
                    "loss": float(np.mean([t.loss for t in terms])),
                    "kl": float(np.mean([t.kl for t in terms])),
                    "clip_fraction": sum(t.clip_fraction * t.n_tokens for t in terms) / n_tok if n_tok else 0.0,
                }
            )
        _record_eval(result, "rl", epoch, params, eval_examples)
    return params


def initial_params(cfg: TrainConfig) -> PolicyParams:
    init_seq = np.random.SeedSequence([cfg.seed, 1])
    return PolicyParams.random(cfg.policy, cfg.init_scale, int(init_seq.generate_state(1)[0]))


def train_examples(
    examples: Sequence[Example],
    mode: TrainMode | str,
    reward_spec: RewardSpec,
    cfg: TrainConfig,
    eval_examples: Sequence[Example] = (),
    init_params: PolicyParams | None = None,
    progress: Callable[[str], None] | None = None,
) -> TrainResult:
    mode = TrainMode(mode)
    if not examples and mode is not TrainMode.ZERO_SHOT:
        raise ValueError("no training examples")
    params = init_params.copy() if init_params is not None else initial_params(cfg)
    result = TrainResult(params)
    sft_seq, rl_seq = np.random.SeedSequence([cfg.seed, 2]).spawn(2)
    if mode in (TrainMode.SFT_ONLY, TrainMode.SFT_THEN_RL):
        params = run_sft(params, examples, cfg.sft, np.random.default_rng(sft_seq), result, eval_examples)
    if mode in (TrainMode.RL_ONLY, TrainMode.SFT_THEN_RL):
        params = run_grpo(params, examples, reward_spec, cfg.grpo, rl_seq, result, eval_examples)
    if mode is TrainMode.ZERO_SHOT:
        _record_eval(result, "zero_shot", 0, params, eval_examples)
    if not params.is_finite():
        raise FloatingPointError("training produced non-finite parameters")
    result.params = params
    return result


def train(
    sessions: Sequence[Session],
    personas: Sequence[Persona] | Mapping[str, Persona],
    mode: TrainMode | str,
    reward_spec: RewardSpec,
    cfg: TrainConfig | None = None,
    eval_sessions: Sequence[Session] = (),
    init_params: PolicyParams | None = None,
) -> TrainResult:
    cfg = cfg or TrainConfig()
    examples = build_examples(sessions, personas, cfg.policy, cfg.budget)
    held = build_examples(eval_sessions, personas, cfg.policy, cfg.budget) if eval_sessions else []
    return train_examples(examples, mode, reward_spec, cfg, held, init_params)


def config_dict(cfg: TrainConfig) -> dict:
    out = asdict(cfg)
    out["policy"]["vocab"] = list(cfg.policy.vocab)
    return out

