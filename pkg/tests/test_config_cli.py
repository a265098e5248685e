import json
from pathlib import Path

import numpy as np
import pytest

from bedloop.cli import main
from bedloop.config import (
    ConfigError,
    EngineConfig,
    apply_overrides,
    config_from_dict,
    load_config,
    serialize_json,
    serialize_toml,
)

TOML = """
seed = 42

[model]
name = "location"
n_sources = 1
noise_sd = 0.5

[policy]
scale = "desk"
pool_width = 4
encoder_widths = [8]
decoder_widths = [8]

[train]
batch = 8
contrasts = 3
steps = 4
lr = 0.001

[refine]
batch = 4
contrasts = 3
steps = 2
particles = 64

[schedule]
horizon = 3
taus = [2]
budgets = [2]

[eval]
contrasts = 7
n_rollouts = 16
step_histories = 2
methods = ["random"]

[io]
checkpoint_dir = "{ckpt}"
report_dir = "{rep}"
"""


def write_config(tmp_path: Path) -> Path:
    text = TOML.format(ckpt=tmp_path / "ckpt", rep=tmp_path / "rep")
    path = tmp_path / "engine.toml"
    path.write_text(text)
    return path


# --- config parsing ---------------------------------------------------------------


def test_toml_roundtrip_is_fixed_point(tmp_path):
    cfg = load_config(write_config(tmp_path))
    text = serialize_toml(cfg)
    path2 = tmp_path / "again.toml"
    path2.write_text(text)
    cfg2 = load_config(path2)
    assert cfg == cfg2
    assert serialize_toml(cfg2) == text


def test_json_is_alternative_encoding(tmp_path):
    cfg = load_config(write_config(tmp_path))
    jpath = tmp_path / "engine.json"
    jpath.write_text(serialize_json(cfg))
    assert load_config(jpath) == cfg


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown keys"):
        config_from_dict({"train": {"nope": 1}})
    with pytest.raises(ConfigError, match="unknown top-level"):
        config_from_dict({"mystery": {}})
    with pytest.raises(ConfigError, match="unknown keys in \\[model\\]"):
        config_from_dict({"model": {"name": "location", "sources": 2}})


def test_model_constants_validated_per_model():
    cfg = config_from_dict({"model": {"name": "toy", "variant": "peaked", "peak": 2.0}})
    model = cfg.model.build()
    assert model.peak == 2.0
    with pytest.raises(ConfigError):
        config_from_dict({"model": {"name": "toy", "noise_sd": 1.0}})


def test_dotted_overrides():
    cfg = EngineConfig()
    cfg2 = apply_overrides(cfg, ["train.lr=0.01", "seed=9", "eval.methods=[\"random\"]"])
    assert cfg2.train.lr == 0.01
    assert cfg2.seed == 9
    assert cfg2.eval.methods == ["random"]
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["notakey"])


# --- cli ---------------------------------------------------------------------------------


def test_cli_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[train]\nnope = 3\n")
    assert main(["train", "--config", str(bad)]) == 2
    assert main(["evaluate", "--config", str(tmp_path / "missing.toml")]) == 2


def test_cli_train_and_evaluate(tmp_path, capsys):
    cfg_path = write_config(tmp_path)
    assert main(["train", "--config", str(cfg_path)]) == 0
    ckpt = tmp_path / "ckpt" / "policy"
    assert ckpt.with_suffix(".json").exists() and ckpt.with_suffix(".bin").exists()
    rep = tmp_path / "rep"
    assert (rep / "train_trace.csv").exists()
    assert (rep / "train_trace.png").exists()

    code = main([
        "evaluate", "--config", str(cfg_path), "--policy", str(ckpt),
        "--set", 'eval.methods=["random","amortized"]',
    ])
    assert code == 0
    out = capsys.readouterr().out
    assert "random" in out and "amortized" in out
    assert (rep / "eval_report.csv").exists()
    assert (rep / "eval_report.png").exists()


def test_cli_evaluate_flat_toy_reports_zero(tmp_path, capsys):
    cfg = tmp_path / "flat.toml"
    cfg.write_text(
        "\n".join([
            "seed = 1",
            "[model]", 'name = "toy-flat"',
            "[schedule]", "horizon = 2",
            "[eval]", "contrasts = 7", "n_rollouts = 32", 'methods = ["random"]',
            "[io]",
            f'checkpoint_dir = "{tmp_path / "c"}"',
            f'report_dir = "{tmp_path / "r"}"',
        ])
    )
    assert main(["evaluate", "--config", str(cfg)]) == 0
    rows = (tmp_path / "r" / "eval_report.csv").read_text().splitlines()
    fields = rows[1].split(",")
    assert float(fields[2]) == 0.0 and float(fields[3]) == 0.0  # value 0 ± 0
    assert float(fields[4]) == 0.0 and float(fields[5]) == 0.0


def test_cli_oracle_prints_exact_value(capsys):
    assert main(["oracle", "--variant", "binary", "--horizon", "1"]) == 0
    out = capsys.readouterr().out
    assert "0.3681" in out or "0.3680" in out


def test_cli_run_is_reproducible_and_manifest_sufficient(tmp_path):
    cfg_path = write_config(tmp_path)
    assert main(["train", "--config", str(cfg_path)]) == 0
    ckpt = str(tmp_path / "ckpt" / "policy")

    assert main(["run", "--config", str(cfg_path), "--policy", ckpt]) == 0
    rep = tmp_path / "rep"
    history1 = (rep / "history.csv").read_bytes()
    manifest = rep / "run_manifest.json"
    assert manifest.exists()

    # re-run from config: bitwise equal
    assert main(["run", "--config", str(cfg_path), "--policy", ckpt]) == 0
    assert (rep / "history.csv").read_bytes() == history1

    # re-execute from the manifest alone: bitwise equal
    saved = manifest.read_text()
    (rep / "history.csv").unlink()
    assert main(["run", "--from-manifest", str(manifest)]) == 0
    assert (rep / "history.csv").read_bytes() == history1
    assert json.loads(saved)["config"] == json.loads(manifest.read_text())["config"]


def test_cli_run_refuses_horizon_extension_without_flag(tmp_path):
    cfg_path = write_config(tmp_path)
    assert main(["train", "--config", str(cfg_path)]) == 0
    ckpt = str(tmp_path / "ckpt" / "policy")
    code = main([
        "run", "--config", str(cfg_path), "--policy", ckpt,
        "--set", "schedule.horizon=5", "--set", "schedule.taus=[]",
        "--set", "schedule.budgets=[]",
    ])
    assert code == 2
    code = main([
        "run", "--config", str(cfg_path), "--policy", ckpt,
        "--set", "schedule.horizon=5", "--set", "schedule.taus=[]",
        "--set", "schedule.budgets=[]", "--set", "schedule.allow_extension=true",
    ])
    assert code == 0


def test_cli_static_training_and_evaluation(tmp_path):
    cfg_path = write_config(tmp_path)
    assert main(["train", "--config", str(cfg_path), "--method", "static"]) == 0
    designs = tmp_path / "ckpt" / "static_designs.npy"
    assert designs.exists()
    assert np.load(designs).shape == (3, 2)
    code = main([
        "evaluate", "--config", str(cfg_path), "--static", str(designs),
        "--set", 'eval.methods=["static"]',
    ])
    assert code == 0


def test_cli_sweep_command(tmp_path):
    cfg_path = write_config(tmp_path)
    assert main(["train", "--config", str(cfg_path)]) == 0
    ckpt = str(tmp_path / "ckpt" / "policy")
    code = main([
        "sweep", "--config", str(cfg_path), "--policy", ckpt,
        "--set", "eval.shifts=[0.0, 1.0]",
        "--set", "eval.contrasts=7", "--set", "eval.n_rollouts=16",
        "--set", "eval.step_histories=2", "--set", "refine.steps=2",
    ])
    assert code == 0
    rep = tmp_path / "rep"
    assert (rep / "sweep.csv").exists() and (rep / "sweep.png").exists()
    lines = (rep / "sweep.csv").read_text().splitlines()
    # 3 methods (amortized, random, refined) x 2 shifts
    assert len(lines) == 7


def test_cli_refine_command(tmp_path):
    cfg_path = write_config(tmp_path)
    assert main(["train", "--config", str(cfg_path)]) == 0
    ckpt = str(tmp_path / "ckpt" / "policy")
    assert main(["run", "--config", str(cfg_path), "--policy", ckpt]) == 0
    history = str(tmp_path / "rep" / "history.csv")
    # refine on the first 2 observations only
    lines = Path(history).read_text().splitlines()
    short = tmp_path / "short_history.csv"
    short.write_text("\n".join(lines[:3]) + "\n")
    assert main(["refine", "--config", str(cfg_path), "--policy", ckpt,
                 "--history", str(short)]) == 0
    assert (tmp_path / "ckpt" / "policy_refined.json").exists()
