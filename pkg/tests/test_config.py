from pathlib import Path

import pytest

from config import DEFAULTS, ExperimentConfig, load_config
from errors import ConfigError
from landscape import GridSpec
from mini_model import ModelConfig

SHIPPED_YAML = Path(__file__).resolve().parent.parent / "lossscope.yaml"


def _write(tmp_path, text):
    path = tmp_path / "exp.yaml"
    path.write_text(text)
    return str(path)


def test_defaults_build_typed_views(monkeypatch):
    monkeypatch.delenv("LOSSSCOPE_WORKERS", raising=False)
    config = load_config()
    assert config.model_config() == ModelConfig()
    assert config.grid_spec() == GridSpec((-4.0, 4.0), (-4.0, 4.0), 40)
    assert config.curve_spec().samples_per_axis == 81
    assert config.seeds == [0, 1, 2]
    assert config.subsample is None
    pre = config.train_config("pretrain")
    assert pre.objective == "masked_lm" and pre.epochs == 4
    fine = config.train_config("finetune", seed=7)
    assert fine.objective == "classification" and fine.seed == 7
    assert config.process().vocab_size == config.model_config().vocab_size


def test_shipped_yaml_matches_defaults():
    config = load_config(str(SHIPPED_YAML))
    assert config.values == ExperimentConfig().values


def test_yaml_overrides(tmp_path):
    path = _write(tmp_path, "model:\n  num_layers: 3  # small\n"
                            "grid:\n  samples: 5\n  subsample: 20\n  alpha_min: -2\n"
                            "pretrain:\n  learning_rate: 1e-2\n"
                            "run:\n  seeds: [4, 5]\n")
    config = load_config(path)
    assert config.model_config().num_layers == 3
    assert config.grid_spec().samples_per_axis == 5
    assert config.grid_spec().alpha_range == (-2.0, 4.0)
    assert config.train_config("pretrain").learning_rate == 0.01
    assert config.subsample == 20
    assert config.seeds == [4, 5]
    assert config.get("model", "model_dim") == DEFAULTS["model"]["model_dim"]


@pytest.mark.parametrize("seeds, expected", [("7", [7]), ("'1,2'", [1, 2]), ("[3]", [3])])
def test_seed_forms(tmp_path, seeds, expected):
    assert load_config(_write(tmp_path, f"run:\n  seeds: {seeds}\n")).seeds == expected


def test_empty_file_keeps_defaults(tmp_path):
    assert load_config(_write(tmp_path, "# nothing\n")).values == ExperimentConfig().values


@pytest.mark.parametrize("text", [
    "model:\n  width: 3\n",
    "optimizer:\n  lr: 0.1\n",
    "model:\n  num_layers: three\n",
    "model:\n  num_layers: 2.5\n",
    "model:\n  model_dim: 30\n  num_heads: 4\n",
    "data:\n  small_task: sentiment\n",
    "data:\n  small_task: 3\n",
    "run:\n  seeds: [a, b]\n",
    "run:\n  seeds: []\n",
    "model: 3\n",
    "- model\n",
    "model: [unclosed\n",
])
def test_bad_config_is_a_config_error(tmp_path, text):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, text))


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "nope.yaml"))


def test_workers_env_override(tmp_path, monkeypatch):
    config = load_config(_write(tmp_path, "run:\n  workers: 3\n"))
    monkeypatch.delenv("LOSSSCOPE_WORKERS", raising=False)
    assert config.workers == 3
    monkeypatch.setenv("LOSSSCOPE_WORKERS", "1")
    assert config.workers == 1
    monkeypatch.setenv("LOSSSCOPE_WORKERS", "-2")
    with pytest.raises(ConfigError):
        _ = config.workers
