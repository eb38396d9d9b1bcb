import dataclasses

import numpy as np
import pytest

from conftest import TINY
from errors import FormatError, LayoutMismatchError
from mini_model import ModelConfig, init_params
from training import (
    Adam,
    TrainConfig,
    continue_run,
    export_learning_curves,
    finetune,
    pretrain,
    read_learning_curves,
    train_from_scratch,
    write_learning_curves,
)


def test_adam_first_step_moves_by_learning_rate():
    params = np.array([1.0, -2.0, 0.5])
    grads = np.array([0.3, -4.0, 1e-3])
    opt = Adam(3, lr=0.01)
    opt.step(params, grads)
    # with bias correction the first update is lr * sign(g), up to eps
    np.testing.assert_allclose(params, [0.99, -1.99, 0.49], rtol=0, atol=1e-6)
    assert opt.t == 1


def test_adam_copy_is_independent():
    opt = Adam(2, lr=0.1)
    params = np.zeros(2)
    opt.step(params, np.ones(2))
    twin = opt.copy()
    opt.step(params, np.ones(2))
    assert twin.t == 1 and opt.t == 2
    assert not np.array_equal(twin.m, opt.m)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(objective="regression")
    with pytest.raises(ValueError):
        TrainConfig(adam_beta1=1.0)


def test_scratch_run_shape(tiny_task, fine_config):
    run = train_from_scratch(tiny_task, fine_config, TINY)
    assert run.epochs == fine_config.epochs
    assert [c.epoch_index for c in run.checkpoints] == list(range(fine_config.epochs + 1))
    assert run.provenance == "scratch" and run.task_name == tiny_task.name
    for ckpt in run.checkpoints:
        assert 0.0 <= ckpt.dev_error <= 1.0
        assert ckpt.train_loss >= 0.0


def test_training_is_deterministic(tiny_task, fine_config):
    a = train_from_scratch(tiny_task, fine_config, TINY)
    b = train_from_scratch(tiny_task, fine_config, TINY)
    assert a.final.values.tobytes() == b.final.values.tobytes()
    other = train_from_scratch(tiny_task, dataclasses.replace(fine_config, seed=1), TINY)
    assert a.final.values.tobytes() != other.final.values.tobytes()


def test_training_lowers_train_loss(tiny_task):
    config = TrainConfig(epochs=6, batch_size=16, learning_rate=1e-2, seed=0)
    run = train_from_scratch(tiny_task, config, TINY)
    assert run.checkpoints[-1].train_loss < run.checkpoints[0].train_loss


def test_pretrain_then_finetune(tiny_corpus, tiny_task, mlm_config, fine_config):
    pre = pretrain(tiny_corpus, mlm_config, TINY)
    assert pre.provenance == "pretrain" and pre.epochs == 1
    assert pre.initial.values.tobytes() == init_params(TINY, mlm_config.seed).values.tobytes()

    fine = finetune(pre.final, tiny_task, fine_config, TINY)
    start, theta0 = fine.initial.unflatten(), pre.final.unflatten()
    for name in start:
        if name.startswith("head.cls"):
            continue
        np.testing.assert_array_equal(start[name], theta0[name])
    assert not np.array_equal(start["head.cls.weight"], theta0["head.cls.weight"])
    assert fine.source == pre.final.label


def test_objective_checks(tiny_corpus, tiny_task, mlm_config, fine_config):
    with pytest.raises(ValueError):
        pretrain(tiny_corpus, fine_config, TINY)
    with pytest.raises(ValueError):
        finetune(init_params(TINY, 0), tiny_task, mlm_config, TINY)


def test_finetune_rejects_class_mismatch(tiny_task, fine_config):
    three_way = init_params(dataclasses.replace(TINY, num_classes=3), 0)
    with pytest.raises(LayoutMismatchError):
        finetune(three_way, tiny_task, fine_config)
    with pytest.raises(LayoutMismatchError):
        finetune(init_params(ModelConfig(num_layers=1), 0), tiny_task, fine_config, TINY)


def test_continue_matches_longer_run(tiny_task, fine_config):
    short = train_from_scratch(tiny_task, fine_config, TINY)
    longer = train_from_scratch(tiny_task, dataclasses.replace(fine_config, epochs=fine_config.epochs + 2), TINY)
    extended = continue_run(short, tiny_task, 2)
    assert extended.epochs == longer.epochs
    for a, b in zip(extended.checkpoints, longer.checkpoints):
        assert a.params.values.tobytes() == b.params.values.tobytes()
        assert a.train_loss == b.train_loss
    # the original run is left alone
    assert short.epochs == fine_config.epochs


def test_continue_rejects_zero_epochs(tiny_task, fine_config):
    run = train_from_scratch(tiny_task, dataclasses.replace(fine_config, epochs=1), TINY)
    with pytest.raises(ValueError):
        continue_run(run, tiny_task, 0)


def test_learning_curves_round_trip(tmp_path, tiny_task, fine_config):
    runs = [train_from_scratch(tiny_task, fine_config, TINY, label="a"),
            train_from_scratch(tiny_task, dataclasses.replace(fine_config, seed=1), TINY, label="b")]
    df = export_learning_curves(runs)
    assert len(df) == 2 * (fine_config.epochs + 1)
    assert set(df["run"]) == {"a", "b"}
    path = tmp_path / "curves.csv"
    write_learning_curves(df, path)
    again = read_learning_curves(path)
    np.testing.assert_array_equal(again["train_loss"].to_numpy(), df["train_loss"].to_numpy())
    assert list(again["epoch"]) == list(df["epoch"])


def test_learning_curves_errors(tmp_path):
    with pytest.raises(ValueError):
        export_learning_curves([])
    with pytest.raises(FormatError):
        read_learning_curves(tmp_path / "missing.csv")
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y\n1,2\n")
    with pytest.raises(FormatError):
        read_learning_curves(bad)
