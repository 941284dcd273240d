from __future__ import annotations

import json

import numpy as np
import pytest
import yaml

from shopper_rl.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, TrainRunConfig, load_data, main, train_config
from shopper_rl.datagen import export_dataset
from shopper_rl.experiments import default_reward, prepare
from shopper_rl.policy import PolicyParams
from shopper_rl.reward import total_reward
from shopper_rl.trainer import predict

TRAINING = {
    "sft": {"epochs": 1, "learning_rate": 0.5},
    "grpo": {"epochs": 1, "group_size": 2, "batch_size": 32},
    "policy": {"feature_dim": 32},
}


def write_config(path, cfg):
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def run(tmp_path, command, cfg, out, *extra):
    return main([command, "--config", write_config(tmp_path / f"{command}_{out}.yaml", cfg), "--out", str(tmp_path / out), *extra])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    cfg = {"generator": {"n_users": 4, "n_sessions": 12, "page_words": [5, 10]}, "heldout_sessions": 6, "seed": 1}
    assert main(["gen-data", "--config", write_config(root / "gen.yaml", cfg), "--out", str(root / "data")]) == EXIT_OK
    return root / "data"


def train_cfg(corpus, mode="sft_rl", **kw):
    return {"data": {"corpus": str(corpus), "heldout": str(corpus / "heldout.jsonl")}, "mode": mode, "training": TRAINING, **kw}


def test_gen_data_files(corpus):
    assert {p.name for p in corpus.iterdir()} == {"sessions.jsonl", "personas.jsonl", "manifest.json", "heldout.jsonl"}
    manifest = json.loads((corpus / "manifest.json").read_text())
    assert manifest["n_sessions"] == 12 and manifest["n_users"] == 4
    assert len((corpus / "heldout.jsonl").read_text().splitlines()) == 6


def test_config_errors_exit_2(tmp_path, corpus, capsys):
    assert run(tmp_path, "train", {"data": {"corpus": str(corpus)}, "mode": "bogus"}, "a") == EXIT_CONFIG
    assert run(tmp_path, "train", {"data": {"corpus": str(corpus)}, "colour": 1}, "b") == EXIT_CONFIG
    assert run(tmp_path, "gen-data", {"generator": {"n_sessions": 0}}, "c") == EXIT_CONFIG
    assert main(["train", "--out", str(tmp_path / "d"), "--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG
    assert main(["nonsense"]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_runtime_error_exit_1(tmp_path):
    empty = tmp_path / "empty"
    export_dataset(empty, [], [])
    assert run(tmp_path, "train", {"data": {"corpus": str(empty)}}, "out") == EXIT_RUNTIME


def test_zero_shot_writes_no_checkpoint(tmp_path, corpus):
    assert run(tmp_path, "train", train_cfg(corpus, "zero_shot"), "zs") == EXIT_OK
    out = tmp_path / "zs"
    assert not (out / "checkpoint.json").exists()
    assert (out / "metrics.json").exists() and (out / "run.json").exists()


def test_sft_rl_train_outputs(tmp_path, corpus, capsys):
    assert run(tmp_path, "train", train_cfg(corpus), "full") == EXIT_OK
    out = tmp_path / "full"
    expected = {"train_log.csv", "eval_log.csv", "metrics.json", "metrics.csv", "type_table.csv", "distribution.csv", "run.json", "checkpoint.json", "training_curves.png", "distribution.png"}
    assert expected <= {p.name for p in out.iterdir()}
    run_info = json.loads((out / "run.json").read_text())
    assert run_info["final_params_hash"] == PolicyParams.load(out / "checkpoint.json").digest()
    assert run_info["rl_start_params_hash"] is not None
    assert "sft_rl:" in capsys.readouterr().out


def test_resume_logs_init_hash(tmp_path, corpus):
    assert run(tmp_path, "train", train_cfg(corpus, "sft"), "sft") == EXIT_OK
    ckpt = tmp_path / "sft" / "checkpoint.json"
    assert run(tmp_path, "train", train_cfg(corpus, "rl", init_checkpoint=str(ckpt)), "resumed") == EXIT_OK
    info = json.loads((tmp_path / "resumed" / "run.json").read_text())
    digest = PolicyParams.load(ckpt).digest()
    assert info["init_params_hash"] == digest == info["rl_start_params_hash"]


def test_sft_rl_raises_mean_reward(tmp_path):
    """Greedy mean reward over the training steps: SFT start point vs the sft_rl checkpoint."""
    gen = {"generator": {"n_users": 4, "n_sessions": 30, "page_words": [5, 10]}, "heldout_sessions": 4, "seed": 1}
    assert run(tmp_path, "gen-data", gen, "data") == EXIT_OK
    training = {"policy": {"feature_dim": 64}}
    cfg = {**train_cfg(tmp_path / "data"), "training": training}
    assert run(tmp_path, "train", {**cfg, "mode": "sft"}, "sft") == EXIT_OK
    assert run(tmp_path, "train", cfg, "sft_rl") == EXIT_OK
    start = PolicyParams.load(tmp_path / "sft" / "checkpoint.json")
    final = PolicyParams.load(tmp_path / "sft_rl" / "checkpoint.json")
    assert json.loads((tmp_path / "sft_rl" / "run.json").read_text())["rl_start_params_hash"] == start.digest()
    run_cfg = TrainRunConfig.model_validate(cfg)
    sessions, _, personas = load_data(run_cfg.data, 0)
    examples = prepare(sessions, personas, train_config(run_cfg.training, 0))
    spec = default_reward("sft_rl")

    def mean_reward(params):
        return np.mean([total_reward(predict(params, ex)[1], ex.gold, spec).total for ex in examples])

    assert mean_reward(final) > mean_reward(start)


def test_eval_reports(tmp_path, corpus):
    assert run(tmp_path, "train", train_cfg(corpus, "sft"), "m") == EXIT_OK
    ckpt = str(tmp_path / "m" / "checkpoint.json")
    data = {"corpus": str(corpus), "heldout": str(corpus / "heldout.jsonl")}
    for variant in ("full", "no_persona", "shuffle_persona", "no_rationale"):
        cfg = {"data": data, "checkpoint": ckpt, "variant": variant, "training": TRAINING}
        assert run(tmp_path, "eval", cfg, variant) == EXIT_OK
        metrics = json.loads((tmp_path / variant / "metrics.json").read_text())
        assert 0.0 <= metrics["next_action_accuracy"] <= 1.0
    cfg = {"data": data, "checkpoint": ckpt, "outcome_mode": "free_running", "training": TRAINING}
    assert run(tmp_path, "eval", cfg, "free") == EXIT_OK


def test_ablate_matrix(tmp_path, corpus):
    cfg = {
        "data": {"corpus": str(corpus), "heldout": str(corpus / "heldout.jsonl")},
        "variants": ["full", "no_persona", "shuffle_persona", "no_rationale"],
        "regimes": ["sft", "sft_rl"],
        "training": TRAINING,
    }
    assert run(tmp_path, "ablate", cfg, "abl") == EXIT_OK
    out = tmp_path / "abl"
    assert len(list((out / "reports").glob("*_metrics.json"))) == 8
    assert len((out / "ablation_matrix.csv").read_text().splitlines()) == 9
    assert (out / "ablation_accuracy.png").exists()


def test_seed_override_changes_split(tmp_path, corpus):
    cfg = {"data": {"corpus": str(corpus), "eval_fraction": 0.25}, "mode": "zero_shot", "training": TRAINING}
    run(tmp_path, "train", cfg, "s0", "--seed", "0")
    run(tmp_path, "train", cfg, "s5", "--seed", "5")
    a = json.loads((tmp_path / "s0" / "run.json").read_text())["train_config"]
    b = json.loads((tmp_path / "s5" / "run.json").read_text())["train_config"]
    assert a != b


def train_eval_outputs(tmp_path, corpus, tag):
    """Run one train+eval cycle and return every output file's bytes."""
    assert run(tmp_path, "train", train_cfg(corpus), f"{tag}_train") == EXIT_OK
    cfg = {"data": train_cfg(corpus)["data"], "checkpoint": str(tmp_path / f"{tag}_train" / "checkpoint.json"), "training": TRAINING}
    assert run(tmp_path, "eval", cfg, f"{tag}_eval") == EXIT_OK
    files = {}
    for kind in ("train", "eval"):
        for p in sorted((tmp_path / f"{tag}_{kind}").iterdir()):
            files[f"{kind}/{p.name}"] = p.read_bytes()
    return files


def test_rerun_byte_identical(tmp_path, corpus):
    a = train_eval_outputs(tmp_path, corpus, "a")
    b = train_eval_outputs(tmp_path, corpus, "b")
    assert a.keys() == b.keys()
    differing = [k for k in a if a[k] != b[k]]
    assert differing == []
