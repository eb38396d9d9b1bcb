# config.py
"""
Experiment configuration: a sectioned YAML file over documented defaults.

Every key has a default in DEFAULTS; a config file may override any of them
and nothing else. LOSSSCOPE_WORKERS, when set, takes precedence over
run.workers.
"""

import os
from dataclasses import dataclass, field

import yaml

from errors import ConfigError
from landscape import GridSpec, resolve_workers
from mini_model import ModelConfig
from synth_data import TokenProcess
from training import TrainConfig

# -----------------------------
# CONFIG
# -----------------------------
DEFAULTS = {
    "model": {
        "num_layers": 6,
        "model_dim": 32,
        "num_heads": 2,
        "ffn_dim": 64,
        "vocab_size": 64,
        "max_seq_len": 16,
        "num_classes": 2,
    },
    "data": {
        "process_seed": 0,
        "successors": 3,
        "regime_shift": 0.5,
        "corpus_size": 4000,
        "dev_corpus_size": 500,
        "train_size": 1000,
        "dev_size": 400,
        # the "smaller task" of the overfitting experiment
        "small_task": "motif",
        "small_train_size": 250,
    },
    "pretrain": {
        "epochs": 4,
        "batch_size": 32,
        "learning_rate": 1e-3,
        "mask_rate": 0.15,
    },
    "finetune": {
        "epochs": 3,
        "batch_size": 32,
        "learning_rate": 1e-3,
        "extend_factor": 4,
    },
    "scratch": {
        "epochs": 6,
        "batch_size": 32,
        "learning_rate": 1e-3,
    },
    "grid": {
        "alpha_min": -4.0,
        "alpha_max": 4.0,
        "beta_min": -4.0,
        "beta_max": 4.0,
        "samples": 40,
        "curve_samples": 81,
        "subsample": 0,
        "flatness_ratio": 2.0,
    },
    "render": {
        "width": 480,
        "height": 480,
        "loss_cap": 3.0,
        "error_cap": 1.0,
        "levels": 10,
    },
    "run": {
        "seed": 0,
        "seeds": [0, 1, 2],
        "workers": 0,
        "output_dir": "out",
    },
}


def _coerce_int(section, key, value):
    if isinstance(value, (bool, float)):
        raise ConfigError(f"{section}.{key}: {value!r} is not a valid int")
    try:
        return int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{section}.{key}: {value!r} is not a valid int")


def _coerce(section, key, value):
    default = DEFAULTS[section][key]
    if isinstance(default, list):
        # a lone seed or "0,1,2" are accepted as well as a YAML list
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        elif not isinstance(value, list):
            value = [value]
        return [_coerce_int(section, key, v) for v in value]
    if isinstance(default, int):
        return _coerce_int(section, key, value)
    if isinstance(default, float):
        if isinstance(value, bool):
            raise ConfigError(f"{section}.{key}: {value!r} is not a valid float")
        try:
            # PyYAML reads 1e-3 as a string
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{section}.{key}: {value!r} is not a valid float")
    if not isinstance(value, str):
        raise ConfigError(f"{section}.{key}: {value!r} is not a valid str")
    return value.strip()


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=lambda: {s: {k: (list(v) if isinstance(v, list) else v)
                                                      for k, v in keys.items()}
                                                  for s, keys in DEFAULTS.items()})
    source: str = None

    def get(self, section, key):
        return self.values[section][key]

    def set(self, section, key, value):
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section '{section}'")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key '{key}' in '{section}'")
        self.values[section][key] = _coerce(section, key, value)

    # -- typed views ---------------------------------------------------------

    def model_config(self):
        return ModelConfig(**self.values["model"])

    def process(self):
        d = self.values["data"]
        m = self.values["model"]
        return TokenProcess(m["vocab_size"], m["max_seq_len"], d["process_seed"], d["successors"], d["regime_shift"])

    def train_config(self, stage, seed=None):
        if stage not in ("pretrain", "finetune", "scratch"):
            raise ConfigError(f"no training stage '{stage}'")
        s = self.values[stage]
        objective = "masked_lm" if stage == "pretrain" else "classification"
        extra = {"mask_rate": s["mask_rate"]} if stage == "pretrain" else {}
        return TrainConfig(epochs=s["epochs"], batch_size=s["batch_size"], learning_rate=s["learning_rate"],
                           seed=self.seed if seed is None else seed, objective=objective, **extra)

    def grid_spec(self):
        g = self.values["grid"]
        return GridSpec((g["alpha_min"], g["alpha_max"]), (g["beta_min"], g["beta_max"]), g["samples"])

    def curve_spec(self):
        g = self.values["grid"]
        return GridSpec((g["alpha_min"], g["alpha_max"]), (g["beta_min"], g["beta_max"]), g["curve_samples"])

    @property
    def subsample(self):
        return self.values["grid"]["subsample"] or None

    @property
    def seed(self):
        return self.values["run"]["seed"]

    @property
    def seeds(self):
        seeds = list(self.values["run"]["seeds"])
        if not seeds:
            raise ConfigError("run.seeds is empty")
        return seeds

    @property
    def workers(self):
        if os.environ.get("LOSSSCOPE_WORKERS", "").strip():
            return resolve_workers(None)
        configured = self.values["run"]["workers"]
        return resolve_workers(configured if configured > 0 else None)

    @property
    def output_dir(self):
        return self.values["run"]["output_dir"]

    def validate(self):
        """Build every typed view once so bad values fail before any work starts."""
        self.model_config()
        self.process()
        for stage in ("pretrain", "finetune", "scratch"):
            self.train_config(stage)
        self.grid_spec()
        self.curve_spec()
        _ = self.seeds, self.workers
        if self.values["data"]["small_task"] not in ("regime", "motif"):
            raise ConfigError("data.small_task must be 'regime' or 'motif'")
        if self.values["finetune"]["extend_factor"] < 1:
            raise ConfigError("finetune.extend_factor must be >= 1")
        return self


def load_config(path=None):
    """Defaults, overridden by the YAML file at path when given."""
    config = ExperimentConfig(source=path)
    if path is None:
        return config.validate()
    if not os.path.exists(path):
        raise ConfigError(f"config file '{path}' not found")
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}")
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping, got {type(raw).__name__}")
    for section, keys in raw.items():
        if keys is None:
            continue
        if not isinstance(keys, dict):
            raise ConfigError(f"{path}: section '{section}' must be a mapping")
        for key, value in keys.items():
            config.set(section, key, value)
    print(f"Loaded config from '{path}'")
    try:
        return config.validate()
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"{path}: {e}")
