# training.py
"""
Adam training loops: masked-token pretraining, fine-tuning from a pretrained
vector, and training the same network from scratch. Every run records one
checkpoint per epoch, with epoch 0 holding the starting point.

Data order in epoch e is drawn from a generator seeded with (seed, e), and
the optimizer state travels with the run, so a run continued by k epochs is
bitwise identical to a run configured with k more epochs.
"""

import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from errors import EmptyDatasetError, FormatError, LayoutMismatchError
from mini_model import (
    HEADS,
    ModelConfig,
    check_compatible,
    config_of,
    evaluate,
    init_params,
    loss_and_grad,
    reset_head,
)
from param_space import ParamVector
from synth_data import make_mlm_set

PROVENANCES = ("pretrain", "finetune", "scratch")
# epoch slot reserved for the fixed evaluation masking of a corpus
EVAL_MASK_EPOCH = 1_000_000


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 32
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    objective: str = "classification"
    mask_rate: float = 0.15

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        for name in ("adam_beta1", "adam_beta2"):
            value = getattr(self, name)
            if not 0 < value < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {value}")
        if self.objective not in HEADS:
            raise ValueError(f"objective must be one of {HEADS}, got '{self.objective}'")
        if not 0 < self.mask_rate < 1:
            raise ValueError(f"mask_rate must lie in (0, 1), got {self.mask_rate}")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class Checkpoint:
    epoch_index: int
    params: ParamVector
    train_loss: float
    dev_loss: float
    dev_error: float


class Adam:
    """Adam over one flat parameter array; updates in place."""

    def __init__(self, size, lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    @classmethod
    def for_config(cls, size, config):
        return cls(size, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)

    def step(self, params, grads):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        step_size = self.lr / bc1

        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grads
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (grads * grads)

        denom = np.sqrt(self.v * (1.0 / bc2)) + self.epsilon
        params -= step_size * self.m / denom

    def copy(self):
        other = Adam(len(self.m), self.lr, self.beta1, self.beta2, self.epsilon)
        other.m = self.m.copy()
        other.v = self.v.copy()
        other.t = self.t
        return other


@dataclass
class TrainRun:
    config: TrainConfig
    checkpoints: list
    provenance: str
    label: str
    source: Optional[str] = None
    task_name: Optional[str] = None
    optimizer: Optional[Adam] = field(default=None, repr=False)

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown run provenance '{self.provenance}'")
        for expected, ckpt in enumerate(self.checkpoints):
            if ckpt.epoch_index != expected:
                raise ValueError(f"run '{self.label}': checkpoint {expected} has epoch_index {ckpt.epoch_index}")

    @property
    def initial(self):
        return self.checkpoints[0].params

    @property
    def final(self):
        return self.checkpoints[-1].params

    @property
    def epochs(self):
        return len(self.checkpoints) - 1


# ============================================================================
# DATA FEEDS
# ============================================================================

class _TaskFeed:
    head = "classification"

    def __init__(self, task):
        if len(task.train) == 0 or len(task.dev) == 0:
            raise EmptyDatasetError(f"task '{task.name}' has an empty split")
        self.task = task

    def epoch_set(self, seed, epoch):
        return self.task.train

    def eval_sets(self, seed):
        return self.task.train, self.task.dev


class _CorpusFeed:
    head = "masked_lm"

    def __init__(self, corpus, mask_rate, dev_corpus=None):
        if len(corpus) == 0:
            raise EmptyDatasetError("pretraining corpus is empty")
        self.corpus = corpus
        self.dev_corpus = dev_corpus
        self.mask_rate = mask_rate

    def epoch_set(self, seed, epoch):
        return make_mlm_set(self.corpus.sequences, np.random.default_rng([seed, epoch, 1]), self.mask_rate)

    def eval_sets(self, seed):
        train_eval = self.epoch_set(seed, EVAL_MASK_EPOCH)
        if self.dev_corpus is None:
            return train_eval, train_eval
        rng = np.random.default_rng([seed, EVAL_MASK_EPOCH, 2])
        return train_eval, make_mlm_set(self.dev_corpus.sequences, rng, self.mask_rate)


def _checkpoint(epoch, params, feed, eval_sets):
    train_set, dev_set = eval_sets
    train = evaluate(params, train_set, feed.head)
    dev = evaluate(params, dev_set, feed.head)
    return Checkpoint(epoch, params, train.loss, dev.loss, dev.error_rate)


def _run_epochs(run, feed, extra_epochs):
    """Train run.final for extra_epochs more epochs, appending checkpoints in place."""
    config = run.config
    values = np.array(run.final.values)
    layout = run.final.layout
    if run.optimizer is None:
        run.optimizer = Adam.for_config(layout.total_len, config)
    eval_sets = feed.eval_sets(config.seed)
    first = run.epochs + 1

    for epoch in tqdm(range(first, first + extra_epochs), desc=f"Training {run.label}", unit="epoch"):
        data = feed.epoch_set(config.seed, epoch)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(data))
        for start in range(0, len(order), config.batch_size):
            batch = data.subset(order[start:start + config.batch_size])
            if feed.head == "masked_lm" and not np.any(batch.labels >= 0):
                continue
            _, g = loss_and_grad(ParamVector(layout, values, run.label), batch, feed.head)
            run.optimizer.step(values, g.values)
        params = ParamVector(layout, values, f"{run.label}@{epoch}")
        ckpt = _checkpoint(epoch, params, feed, eval_sets)
        run.checkpoints.append(ckpt)
        print(f"  {run.label} epoch {epoch}: train_loss={ckpt.train_loss:.4f} "
              f"dev_loss={ckpt.dev_loss:.4f} dev_error={ckpt.dev_error:.4f}")
    return run


def _start_run(start, feed, config, provenance, label, source=None, task_name=None):
    start = start.relabel(f"{label}@0")
    ckpt0 = _checkpoint(0, start, feed, feed.eval_sets(config.seed))
    run = TrainRun(config, [ckpt0], provenance, label, source, task_name)
    return _run_epochs(run, feed, config.epochs)


def pretrain(corpus, config, model_config=None, dev_corpus=None, label=None):
    """Masked-token pretraining from init_params(model_config, config.seed)."""
    if config.objective != "masked_lm":
        raise ValueError("pretraining needs objective 'masked_lm'")
    feed = _CorpusFeed(corpus, config.mask_rate, dev_corpus)
    model_config = model_config or ModelConfig(vocab_size=corpus.vocab_size)
    label = label or f"pretrain-s{config.seed}"
    print(f"Pretraining '{label}' on {len(corpus)} sequences for {config.epochs} epochs")
    return _start_run(init_params(model_config, config.seed), feed, config, "pretrain", label)


def finetune(init, task, config, model_config=None, label=None):
    """Fine-tune every parameter of init on task, with a fresh head seeded by (seed + task_id)."""
    if config.objective != "classification":
        raise ValueError("fine-tuning needs objective 'classification'")
    check_compatible(init, model_config)
    if config_of(init).num_classes != task.num_classes:
        raise LayoutMismatchError(
            f"model has {config_of(init).num_classes} classes, task '{task.name}' has {task.num_classes}")
    feed = _TaskFeed(task)
    label = label or f"finetune-{task.name}-s{config.seed}"
    print(f"Fine-tuning '{label}' from '{init.label}' for {config.epochs} epochs")
    start = reset_head(init, config.seed + task.task_id)
    return _start_run(start, feed, config, "finetune", label, init.label, task.name)


def train_from_scratch(task, config, model_config=None, label=None):
    if config.objective != "classification":
        raise ValueError("training from scratch needs objective 'classification'")
    model_config = model_config or ModelConfig()
    if model_config.num_classes != task.num_classes:
        raise LayoutMismatchError(
            f"model has {model_config.num_classes} classes, task '{task.name}' has {task.num_classes}")
    feed = _TaskFeed(task)
    label = label or f"scratch-{task.name}-s{config.seed}"
    print(f"Training '{label}' from scratch for {config.epochs} epochs")
    start = reset_head(init_params(model_config, config.seed), config.seed + task.task_id)
    return _start_run(start, feed, config, "scratch", label, None, task.name)


def continue_run(run, data, extra_epochs, dev_corpus=None):
    """Keep training a run for extra_epochs; data is the task (or corpus) it was trained on."""
    if extra_epochs < 1:
        raise ValueError(f"extra_epochs must be >= 1, got {extra_epochs}")
    if run.provenance == "pretrain":
        feed = _CorpusFeed(data, run.config.mask_rate, dev_corpus)
    else:
        feed = _TaskFeed(data)
    if run.optimizer is None:
        print(f"Warning: run '{run.label}' has no optimizer state, continuing with a fresh Adam")
    extended = TrainRun(run.config, list(run.checkpoints), run.provenance, run.label,
                        run.source, run.task_name, run.optimizer.copy() if run.optimizer else None)
    print(f"Continuing '{run.label}' from epoch {run.epochs} for {extra_epochs} more epochs")
    return _run_epochs(extended, feed, extra_epochs)


# ============================================================================
# LEARNING CURVES
# ============================================================================

CURVE_COLUMNS = ["run", "provenance", "epoch", "train_loss", "dev_loss", "dev_error"]


def export_learning_curves(runs):
    """
    Learning curves of several runs as one table.

    Args:
        runs: TrainRuns, each with its per-epoch checkpoints.

    Returns:
        DataFrame with CURVE_COLUMNS, one row per (run, epoch) in run order.

    Raises:
        ValueError: runs is empty.
    """
    if not runs:
        raise ValueError("no runs to export")
    rows = []
    for run in runs:
        for ckpt in run.checkpoints:
            rows.append({
                "run": run.label,
                "provenance": run.provenance,
                "epoch": ckpt.epoch_index,
                "train_loss": ckpt.train_loss,
                "dev_loss": ckpt.dev_loss,
                "dev_error": ckpt.dev_error,
            })
    return pd.DataFrame(rows, columns=CURVE_COLUMNS)


def write_learning_curves(df, path):
    df.to_csv(path, index=False, float_format="%.17g")


def read_learning_curves(path):
    if not os.path.exists(path):
        raise FormatError(f"learning-curve file '{path}' not found")
    df = pd.read_csv(path, float_precision="round_trip")
    if list(df.columns) != CURVE_COLUMNS:
        raise FormatError(f"{path}: expected columns {CURVE_COLUMNS}, got {list(df.columns)}")
    return df
