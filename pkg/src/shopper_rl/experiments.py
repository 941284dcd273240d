"""Glue shared by the CLI and the acceptance suite: ablation variants and regime runs."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

from .datagen import AblationMode, ablate, augment_rationales
from .evaluation import MetricsReport
from .policy import PolicyParams
from .reward import RewardSpec, preset
from .schema import Persona, Session
from .trainer import Example, TrainConfig, TrainMode, TrainResult, build_examples, evaluate_examples, train_examples

VARIANTS = ("full", "no_persona", "shuffle_persona", "no_rationale")
REGIMES = tuple(m.value for m in TrainMode)


def default_reward(mode: TrainMode | str) -> RewardSpec:
    return preset("rl_only_v1" if TrainMode(mode) is TrainMode.RL_ONLY else "sft_rl_v1")


def prepare(
    sessions: Sequence[Session],
    personas: Sequence[Persona],
    cfg: TrainConfig,
    augment: bool = True,
) -> list[Example]:
    """Augment missing rationales from the given persona table, then featurize."""
    if augment and cfg.policy.use_rationale:
        sessions = augment_rationales(sessions, personas)
    return build_examples(sessions, personas, cfg.policy, cfg.budget)


@dataclass
class VariantData:
    name: str
    cfg: TrainConfig
    train: list[Example]
    eval: list[Example]
    shares_full_model: bool = False


def variant_data(
    name: str,
    train_sessions: Sequence[Session],
    eval_sessions: Sequence[Session],
    personas: Sequence[Persona],
    cfg: TrainConfig,
    seed: int = 0,
) -> VariantData:
    """Training and evaluation prompts for one ablation variant.

    Persona shuffling is applied to evaluation prompts only, on top of a model
    trained with the true personas; the other variants change both sides.
    """
    if name == "full":
        return VariantData(name, cfg, prepare(train_sessions, personas, cfg), prepare(eval_sessions, personas, cfg))
    if name == "shuffle_persona":
        _, shuffled = ablate(eval_sessions, personas, AblationMode.SHUFFLE_PERSONA, seed)
        return VariantData(name, cfg, [], prepare(eval_sessions, shuffled, cfg), shares_full_model=True)
    if name == "no_persona":
        _, empty = ablate(train_sessions, personas, AblationMode.NO_PERSONA, seed)
        vcfg = replace(cfg, policy=replace(cfg.policy, use_persona=False))
        return VariantData(name, vcfg, prepare(train_sessions, empty, vcfg), prepare(eval_sessions, empty, vcfg))
    if name == "no_rationale":
        tr, _ = ablate(train_sessions, personas, AblationMode.NO_RATIONALE, seed)
        ev, _ = ablate(eval_sessions, personas, AblationMode.NO_RATIONALE, seed)
        vcfg = replace(cfg, policy=replace(cfg.policy, use_rationale=False))
        return VariantData(name, vcfg, prepare(tr, personas, vcfg), prepare(ev, personas, vcfg))
    raise ValueError(f"unknown variant {name!r}; expected one of {VARIANTS}")


def reward_for(mode: TrainMode | str, cfg: TrainConfig, spec: RewardSpec | None = None) -> RewardSpec:
    spec = spec or default_reward(mode)
    if not cfg.policy.use_rationale and spec.require_rationale:
        spec = replace(spec, require_rationale=False)
    return spec


def run_regime(
    mode: TrainMode | str,
    train: Sequence[Example],
    eval_examples: Sequence[Example],
    cfg: TrainConfig,
    reward: RewardSpec | None = None,
    init_params: PolicyParams | None = None,
    per_epoch_eval: bool = True,
) -> tuple[TrainResult, MetricsReport]:
    tracked = eval_examples if per_epoch_eval else ()
    result = train_examples(train, mode, reward_for(mode, cfg, reward), cfg, tracked, init_params)
    return result, evaluate_examples(result.params, eval_examples)
