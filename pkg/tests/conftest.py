import numpy as np
import pytest

from mini_model import ModelConfig, init_params
from param_space import ParamVector, all_layers, splice_group, toy_layout
from synth_data import TokenProcess, gen_corpus, gen_task
from training import TrainConfig

TINY = ModelConfig(num_layers=3, model_dim=8, num_heads=2, ffn_dim=16, vocab_size=16, max_seq_len=8)
TINY_PROCESS = TokenProcess(vocab_size=16, seq_len=8)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_process():
    return TINY_PROCESS


@pytest.fixture(scope="session")
def tiny_task():
    return gen_task("regime", 0, (48, 24), TINY_PROCESS)


@pytest.fixture(scope="session")
def tiny_motif_task():
    return gen_task("motif", 0, (48, 24), TINY_PROCESS)


@pytest.fixture(scope="session")
def tiny_corpus():
    return gen_corpus(0, 64, TINY_PROCESS)


@pytest.fixture
def fine_config():
    return TrainConfig(epochs=2, batch_size=16, learning_rate=3e-3, seed=0, objective="classification")


@pytest.fixture
def mlm_config():
    return TrainConfig(epochs=1, batch_size=16, learning_rate=3e-3, seed=0, objective="masked_lm")


def toy_vector(values, label="v", layers=None):
    """ParamVector over one-scalar segments, one per layer unless layers says otherwise."""
    values = np.asarray(values, dtype=float)
    layout = toy_layout([1] * len(values), layers)
    return ParamVector(layout, values, label)


def encoder_only_copy(base, other, label):
    """base with every encoder segment taken from other."""
    return splice_group(base, other, all_layers(base.layout.num_layers)).relabel(label)


@pytest.fixture
def theta_triplet():
    """(theta0, theta1, theta2) that differ only in encoder segments."""
    theta0 = init_params(TINY, 0).relabel("theta0")
    theta1 = encoder_only_copy(theta0, init_params(TINY, 1), "theta1")
    theta2 = encoder_only_copy(theta0, init_params(TINY, 2), "theta2")
    return theta0, theta1, theta2
