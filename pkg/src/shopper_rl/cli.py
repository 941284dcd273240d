"""Command-line entry point: ``shopper-rl gen-data|train|eval|ablate --config FILE --out DIR``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
The log level is read from ``SHOPPER_RL_LOG_LEVEL`` (default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .context import SMALL_BUDGET
from .datagen import (
    DatasetError,
    GeneratorError,
    GeneratorSpec,
    export_dataset,
    generate_dataset,
    generate_heldout,
    ingest_jsonl,
)
from .evaluation import MetricsReport, evaluate_records
from .experiments import VARIANTS, default_reward, prepare, run_regime, variant_data
from .plotting import plot_ablation, plot_distribution, plot_training
from .policy import PolicyConfig, PolicyParams
from .reward import RewardSpec, reward_spec_from_mapping
from .schema import Persona, Session, personas_by_user
from .trainer import (
    GrpoConfig,
    SftConfig,
    TrainConfig,
    TrainMode,
    config_dict,
    evaluate_examples,
    free_running_records,
    initial_params,
    predict_records,
    split_sessions,
)

log = logging.getLogger("shopper_rl")
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GrpoSection(_Strict):
    group_size: int = 8
    clip_eps: float = 0.2
    kl_coef: float = 0.01
    adv_delta: float = 1e-6
    learning_rate: float = 0.05
    batch_size: int = 64
    epochs: int = 2
    temperature: float = 1.0
    inner_steps: int = 1
    ref_refresh_epochs: int = 0


class SftSection(_Strict):
    learning_rate: float = 0.5
    epochs: int = 6
    batch_size: int = 64


class PolicySection(_Strict):
    feature_dim: int = 512
    hash_seed: int = 0


class DataSection(_Strict):
    corpus: str
    heldout: Optional[str] = None
    eval_fraction: float = 0.2


class GenDataConfig(_Strict):
    generator: dict[str, Any] = Field(default_factory=dict)
    heldout_sessions: int = 0
    seed: int = 0


class TrainingSection(_Strict):
    grpo: GrpoSection = Field(default_factory=GrpoSection)
    sft: SftSection = Field(default_factory=SftSection)
    policy: PolicySection = Field(default_factory=PolicySection)
    budget: int = SMALL_BUDGET
    init_scale: float = 0.01


class TrainRunConfig(_Strict):
    data: DataSection
    mode: Literal["zero_shot", "sft", "rl", "sft_rl"] = "sft_rl"
    reward: Union[str, dict[str, Any], None] = None
    training: TrainingSection = Field(default_factory=TrainingSection)
    init_checkpoint: Optional[str] = None
    seed: int = 0


class EvalRunConfig(_Strict):
    data: DataSection
    checkpoint: Optional[str] = None
    variant: Literal["full", "no_persona", "shuffle_persona", "no_rationale"] = "full"
    outcome_mode: Literal["teacher_forced", "free_running"] = "teacher_forced"
    training: TrainingSection = Field(default_factory=TrainingSection)
    seed: int = 0


class AblateRunConfig(_Strict):
    data: DataSection
    variants: list[Literal["full", "no_persona", "shuffle_persona", "no_rationale"]] = Field(default_factory=lambda: list(VARIANTS))
    regimes: list[Literal["zero_shot", "sft", "rl", "sft_rl"]] = Field(default_factory=lambda: ["sft", "sft_rl"])
    training: TrainingSection = Field(default_factory=TrainingSection)
    seed: int = 0


# -- helpers ---------------------------------------------------------------


def load_config_file(path: str | Path | None) -> dict[str, Any]:
    if path is None:
        return {}
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    try:
        data = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {p}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {p} must be a mapping at the top level")
    return data


def _validate(model: type[BaseModel], raw: dict[str, Any], seed: int | None) -> Any:
    if seed is not None:
        raw = {**raw, "seed": seed}
    try:
        return model.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def train_config(section: TrainingSection, seed: int, use_persona: bool = True, use_rationale: bool = True) -> TrainConfig:
    try:
        return TrainConfig(
            grpo=GrpoConfig(**section.grpo.model_dump(), seed=seed),
            sft=SftConfig(**section.sft.model_dump()),
            policy=PolicyConfig(**section.policy.model_dump(), use_persona=use_persona, use_rationale=use_rationale),
            budget=section.budget,
            init_scale=section.init_scale,
            seed=seed,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _reward(value: Union[str, dict, None], mode: str) -> RewardSpec:
    if value is None:
        return default_reward(mode)
    try:
        return reward_spec_from_mapping({"preset": value} if isinstance(value, str) else value)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad reward config: {exc}") from exc


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def _dump_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def load_data(data: DataSection, seed: int) -> tuple[list[Session], list[Session], list[Persona]]:
    """Corpus sessions, held-out sessions and personas; splits the corpus when no held-out file is given."""
    corpus = ingest_jsonl(data.corpus)
    for v in corpus.violations:
        log.warning("line %d: session %s excluded (%s)", v.line, v.session_id, ", ".join(x.rule for x in v.violations))
    if not corpus.sessions:
        raise DatasetError(data.corpus, None, "no valid sessions")
    if data.heldout:
        held = ingest_jsonl(data.heldout, personas_path=None)
        return corpus.sessions, held.sessions, corpus.personas
    train, test = split_sessions(corpus.sessions, data.eval_fraction, seed)
    return train, test, corpus.personas


def _report_files(out: Path, report: MetricsReport, stem: str = "") -> None:
    prefix = f"{stem}_" if stem else ""
    _write(out / f"{prefix}metrics.json", report.dumps())
    _write(out / f"{prefix}metrics.csv", report.metrics_csv())
    _write(out / f"{prefix}type_table.csv", report.type_table_csv())
    _write(out / f"{prefix}distribution.csv", report.distribution_csv())


def _summary(title: str, report: MetricsReport) -> str:
    parts = " ".join(f"{k}={v:.4f}" for k, v in report.headline().items())
    return f"{title}: {parts}"


# -- commands --------------------------------------------------------------


def cmd_gen_data(raw: dict[str, Any], out: Path, seed: int | None) -> str:
    cfg = _validate(GenDataConfig, raw, seed)
    try:
        spec = GeneratorSpec.from_mapping({**cfg.generator, "seed": cfg.seed})
    except (GeneratorError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    sessions, personas = generate_dataset(spec)
    manifest = export_dataset(out, sessions, personas, spec)
    if cfg.heldout_sessions > 0:
        held = generate_heldout(spec, personas, cfg.heldout_sessions)
        _write(out / "heldout.jsonl", "".join(json.dumps(s.to_json()) + "\n" for s in held))
    return f"wrote {manifest['n_sessions']} sessions / {manifest['n_steps']} steps for {manifest['n_users']} users to {out}"


def cmd_train(raw: dict[str, Any], out: Path, seed: int | None) -> str:
    cfg = _validate(TrainRunConfig, raw, seed)
    tcfg = train_config(cfg.training, cfg.seed)
    reward = _reward(cfg.reward, cfg.mode)
    init = PolicyParams.load(cfg.init_checkpoint) if cfg.init_checkpoint else None
    if init is not None:
        tcfg = TrainConfig(tcfg.grpo, tcfg.sft, init.config, tcfg.budget, tcfg.init_scale, tcfg.seed)
    train_s, eval_s, personas = load_data(cfg.data, cfg.seed)
    train_ex = prepare(train_s, personas, tcfg)
    eval_ex = prepare(eval_s, personas, tcfg)
    result, report = run_regime(cfg.mode, train_ex, eval_ex, tcfg, reward, init)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "train_log.csv", result.log_csv())
    _write(out / "eval_log.csv", result.eval_csv())
    _report_files(out, report)
    run = {
        "mode": cfg.mode,
        "reward": reward.to_json(),
        "train_config": config_dict(tcfg),
        "init_checkpoint": cfg.init_checkpoint,
        "init_params_hash": init.digest() if init is not None else None,
        "rl_start_params_hash": result.rl_start_digest,
        "final_params_hash": result.params.digest(),
        "n_train_steps": len(train_ex),
        "n_eval_steps": len(eval_ex),
    }
    if TrainMode(cfg.mode) is not TrainMode.ZERO_SHOT:
        result.params.save(out / "checkpoint.json")
        run["checkpoint"] = "checkpoint.json"
    _write(out / "run.json", _dump_json(run))
    plot_training(result.log, result.evals, out / "training_curves.png")
    plot_distribution(report.distribution, out / "distribution.png", f"{cfg.mode}: fine-grained action distribution")
    if result.rl_start_digest:
        log.info("RL phase started from params %s", result.rl_start_digest)
    return _summary(cfg.mode, report)


def cmd_eval(raw: dict[str, Any], out: Path, seed: int | None) -> str:
    cfg = _validate(EvalRunConfig, raw, seed)
    tcfg = train_config(cfg.training, cfg.seed)
    params = PolicyParams.load(cfg.checkpoint) if cfg.checkpoint else initial_params(tcfg)
    tcfg = TrainConfig(tcfg.grpo, tcfg.sft, params.config, tcfg.budget, tcfg.init_scale, tcfg.seed)
    train_s, eval_s, personas = load_data(cfg.data, cfg.seed)
    data = variant_data(cfg.variant, [], eval_s, personas, tcfg, cfg.seed)
    if data.cfg.policy != params.config:
        params = PolicyParams(params.weights_type, params.weights_elem, params.weights_text, data.cfg.policy)
    records = predict_records(params, data.eval)
    if cfg.outcome_mode == "free_running":
        table = personas_by_user(personas) if data.cfg.policy.use_persona else {}
        records = [r for r in records if not r.is_terminal_step] + [
            r for r in free_running_records(params, eval_s, table, tcfg.budget) if r.is_terminal_step
        ]
    report = evaluate_records(records)
    _report_files(out, report)
    plot_distribution(report.distribution, out / "distribution.png", f"{cfg.variant}: fine-grained action distribution")
    return _summary(f"eval[{cfg.variant}, {cfg.outcome_mode}]", report)


def cmd_ablate(raw: dict[str, Any], out: Path, seed: int | None) -> str:
    cfg = _validate(AblateRunConfig, raw, seed)
    base = train_config(cfg.training, cfg.seed)
    train_s, eval_s, personas = load_data(cfg.data, cfg.seed)
    variants = list(dict.fromkeys(cfg.variants))
    regimes = list(dict.fromkeys(cfg.regimes))
    full_models: dict[str, PolicyParams] = {}
    matrix: dict[tuple[str, str], MetricsReport] = {}
    # the shuffled variant reuses the full model, so train that one first
    order = sorted(variants, key=lambda v: v != "full")
    if "shuffle_persona" in variants and "full" not in variants:
        order.insert(0, "full")
    rows = []
    for variant in order:
        data = variant_data(variant, train_s, eval_s, personas, base, cfg.seed)
        for regime in regimes:
            if data.shares_full_model:
                report = evaluate_examples(full_models[regime], data.eval)
            else:
                result, report = run_regime(regime, data.train, data.eval, data.cfg, per_epoch_eval=False)
                if variant == "full":
                    full_models[regime] = result.params
            if variant not in variants:
                continue
            matrix[(variant, regime)] = report
            _report_files(out / "reports", report, f"{variant}__{regime}")
            rows.append([variant, regime, *(f"{v:.6f}" for v in report.headline().values())])
            log.info("%s / %s done", variant, regime)
    header = "variant,regime,next_action_accuracy,action_type_macro_f1,fine_grained_accuracy,session_outcome_weighted_f1\n"
    _write(out / "ablation_matrix.csv", header + "".join(",".join(r) + "\n" for r in rows))
    plot_ablation(matrix, out / "ablation_accuracy.png")
    plot_ablation(matrix, out / "ablation_outcome_f1.png", "session_outcome_weighted_f1")
    lines = [f"{v:>16} {r:>9} acc={m.next_action_accuracy:.4f} outcome_f1={m.session_outcome_weighted_f1:.4f}" for (v, r), m in matrix.items()]
    return "\n".join(lines)


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shopper-rl", description="Persona-conditioned next-action prediction with SFT and GRPO.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML or JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("SHOPPER_RL_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    out = Path(args.out)
    try:
        raw = load_config_file(args.config)
        summary = COMMANDS[args.command](raw, out, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
