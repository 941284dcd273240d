"""Persona-conditioned next-action prediction for online shopping, trained with SFT and GRPO."""

from .context import TokenBudget, build_context, count_tokens, render_prompt
from .datagen import GeneratorSpec, ablate, augment_rationales, generate_dataset, generate_heldout, ingest_jsonl
from .evaluation import EvalRecord, MetricsReport, evaluate_records
from .policy import PolicyConfig, PolicyParams, extract_candidates, log_prob, sample
from .reward import RewardSpec, preset, total_reward
from .schema import Action, Observation, Persona, Session, parse_action_output
from .subtypes import ClickSubtype, classify_click_subtype
from .trainer import GrpoConfig, SftConfig, TrainConfig, TrainMode, group_advantages, grpo_loss, sft_loss, train

__version__ = "0.1.0"
