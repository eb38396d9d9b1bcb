import math

import numpy as np
import pytest

from conftest import TINY, TINY_PROCESS
from errors import EmptyDatasetError, LayoutMismatchError, TokenRangeError, UnknownKindError
from mini_model import (
    CLS_ID,
    Batch,
    ModelConfig,
    attention_maps,
    build_layout,
    check_compatible,
    evaluate,
    forward_loss,
    grad,
    init_params,
    loss_and_grad,
    param_count,
    predict,
    reset_head,
)
from param_space import ParamVector
from synth_data import gen_corpus, make_mlm_set

GRAD_CHECK = ModelConfig(num_layers=2, model_dim=8, num_heads=2, ffn_dim=16, vocab_size=16, max_seq_len=6)


def _perturbed(config, seed):
    """Parameters away from the symmetric init (non-zero biases, non-unit gains)."""
    params = init_params(config, seed)
    rng = np.random.default_rng(seed + 100)
    noise = rng.normal(0.0, 0.1, params.layout.total_len)
    # head weights well away from their tiny init
    head = params.layout.index_mask(lambda seg: seg.role == "head")
    noise[head] *= 5.0
    return ParamVector(params.layout, params.values + noise, "p")


def _batches(config, seed):
    rng = np.random.default_rng(seed)
    tokens = rng.integers(2, config.vocab_size, size=(4, config.max_seq_len))
    tokens[:, 0] = CLS_ID
    cls = Batch(tokens, np.array([0, 1, 1, 0]))
    mlm = make_mlm_set(tokens, np.random.default_rng(seed + 1), mask_rate=0.3)
    return {"classification": cls, "masked_lm": mlm}


@pytest.mark.parametrize("config", [
    TINY,
    GRAD_CHECK,
    ModelConfig(),
    ModelConfig(num_layers=1, model_dim=4, num_heads=1, ffn_dim=3, vocab_size=5, max_seq_len=2, num_classes=3),
])
def test_layout_matches_param_count(config):
    assert build_layout(config).total_len == param_count(config)


def test_init_is_deterministic():
    a, b, c = init_params(TINY, 4), init_params(TINY, 4), init_params(TINY, 5)
    assert a.values.tobytes() == b.values.tobytes()
    assert a.values.tobytes() != c.values.tobytes()


def test_init_scheme():
    w = init_params(ModelConfig(), 0).unflatten()
    assert np.all(w["layer0.ln1.gain"] == 1.0)
    assert np.all(w["layer0.attn.bq"] == 0.0)
    assert np.std(w["head.cls.weight"]) < 0.05
    assert np.std(w["layer0.attn.wq"]) == pytest.approx(1 / math.sqrt(32), rel=0.2)


def test_reset_head_only_touches_classifier():
    params = init_params(TINY, 0)
    fresh = reset_head(params, 9)
    head = params.layout.index_mask(lambda seg: seg.name.startswith("head.cls"))
    np.testing.assert_array_equal(fresh.values[~head], params.values[~head])
    assert not np.array_equal(fresh.values[head], params.values[head])


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("head", ["classification", "masked_lm"])
def test_gradient_matches_finite_differences(seed, head):
    params = _perturbed(GRAD_CHECK, seed)
    batch = _batches(GRAD_CHECK, seed)[head]
    analytic = grad(params, batch, head).values
    h = 1e-5
    numeric = np.zeros_like(analytic)
    values = params.values.copy()
    for k in range(len(values)):
        orig = values[k]
        values[k] = orig + h
        up = forward_loss(ParamVector(params.layout, values), batch, head).loss
        values[k] = orig - h
        down = forward_loss(ParamVector(params.layout, values), batch, head).loss
        values[k] = orig
        numeric[k] = (up - down) / (2 * h)
    for seg in params.layout.segments:
        a = analytic[seg.offset:seg.stop]
        n = numeric[seg.offset:seg.stop]
        scale = max(np.linalg.norm(a), np.linalg.norm(n))
        assert np.linalg.norm(a - n) <= 1e-6 * scale + 1e-9, seg.name


def test_loss_and_grad_agrees_with_forward():
    params = _perturbed(TINY, 0)
    batch = _batches(TINY, 0)["classification"]
    value, direction = loss_and_grad(params, batch, "classification")
    assert value.loss == forward_loss(params, batch, "classification").loss
    assert direction.provenance.kind == "gradient"
    # the masked-token head gets no gradient from a classification batch
    np.testing.assert_array_equal(direction.layout.unflatten(direction.values)["head.mlm.weight"], 0.0)


def _oracle_loss(params, tokens, label):
    """Loop-by-loop forward pass for one sequence of a one-layer, one-head model."""
    w = params.unflatten()
    c = params.layout.model_config
    d = c.model_dim
    s = len(tokens)

    def ln(vec, gain, bias):
        mu = sum(vec) / d
        var = sum((x - mu) ** 2 for x in vec) / d
        return [(vec[i] - mu) / math.sqrt(var + 1e-5) * gain[i] + bias[i] for i in range(d)]

    def affine(vec, weight, bias):
        return [sum(vec[i] * weight[i][j] for i in range(len(vec))) + bias[j] for j in range(len(bias))]

    def gelu(u):
        return 0.5 * u * (1 + math.tanh(math.sqrt(2 / math.pi) * (u + 0.044715 * u ** 3)))

    x = [[w["embed.token"][t][i] + w["embed.position"][p][i] for i in range(d)] for p, t in enumerate(tokens)]
    hn = [ln(row, w["layer0.ln1.gain"], w["layer0.ln1.bias"]) for row in x]
    q = [affine(row, w["layer0.attn.wq"], w["layer0.attn.bq"]) for row in hn]
    k = [affine(row, w["layer0.attn.wk"], w["layer0.attn.bk"]) for row in hn]
    v = [affine(row, w["layer0.attn.wv"], w["layer0.attn.bv"]) for row in hn]
    ctx = []
    for i in range(s):
        scores = [sum(q[i][m] * k[j][m] for m in range(d)) / math.sqrt(d) for j in range(s)]
        top = max(scores)
        e = [math.exp(z - top) for z in scores]
        probs = [z / sum(e) for z in e]
        ctx.append([sum(probs[j] * v[j][m] for j in range(s)) for m in range(d)])
    x = [[a + b for a, b in zip(x[i], affine(ctx[i], w["layer0.attn.wo"], w["layer0.attn.bo"]))] for i in range(s)]
    hn2 = [ln(row, w["layer0.ln2.gain"], w["layer0.ln2.bias"]) for row in x]
    ff = [[gelu(u) for u in affine(row, w["layer0.ffn.w1"], w["layer0.ffn.b1"])] for row in hn2]
    x = [[a + b for a, b in zip(x[i], affine(ff[i], w["layer0.ffn.w2"], w["layer0.ffn.b2"]))] for i in range(s)]
    cls = ln(x[0], w["final_ln.gain"], w["final_ln.bias"])
    logits = affine(cls, w["head.cls.weight"], w["head.cls.bias"])
    top = max(logits)
    return -(logits[label] - top - math.log(sum(math.exp(z - top) for z in logits)))


def test_forward_matches_scalar_oracle():
    config = ModelConfig(num_layers=1, model_dim=2, num_heads=1, ffn_dim=3, vocab_size=4, max_seq_len=3)
    params = _perturbed(config, 7)
    tokens = np.array([[0, 2, 3], [0, 3, 3]])
    labels = np.array([1, 0])
    expected = (_oracle_loss(params, tokens[0], 1) + _oracle_loss(params, tokens[1], 0)) / 2
    assert forward_loss(params, Batch(tokens, labels), "classification").loss == pytest.approx(expected, abs=1e-12)


def test_initial_losses_are_near_uniform():
    params = init_params(TINY, 0)
    batches = _batches(TINY, 0)
    assert forward_loss(params, batches["classification"], "classification").loss == pytest.approx(math.log(2), abs=0.05)
    assert forward_loss(params, batches["masked_lm"], "masked_lm").loss == pytest.approx(math.log(16), abs=0.3)


def test_attention_rows_are_distributions():
    params = init_params(TINY, 0)
    maps = attention_maps(params, _batches(TINY, 0)["classification"].token_ids)
    assert len(maps) == TINY.num_layers
    for m in maps:
        assert m.shape == (4, TINY.num_heads, TINY.max_seq_len, TINY.max_seq_len)
        np.testing.assert_allclose(m.sum(axis=-1), 1.0, atol=1e-12)


def test_evaluate_chunks_match_one_batch():
    params = init_params(TINY, 0)
    corpus = gen_corpus(0, 50, TINY_PROCESS)
    labels = np.arange(50) % 2
    dataset = Batch(corpus.sequences, labels)
    whole = forward_loss(params, dataset, "classification")
    chunked = evaluate(params, dataset, "classification", batch_size=7)
    assert chunked.loss == pytest.approx(whole.loss, abs=1e-12)
    assert chunked.correct_count == whole.correct_count
    assert chunked.error_rate == pytest.approx(1 - whole.correct_count / 50)
    assert predict(params, corpus.sequences).shape == (50,)


def test_model_errors():
    params = init_params(TINY, 0)
    tokens = np.zeros((2, 4), dtype=int)
    with pytest.raises(TokenRangeError):
        forward_loss(params, Batch(tokens + TINY.vocab_size, np.array([0, 1])), "classification")
    with pytest.raises(UnknownKindError):
        forward_loss(params, Batch(tokens, np.array([0, 1])), "regression")
    with pytest.raises(ValueError):
        forward_loss(params, Batch(tokens, np.array([0, 1])), "masked_lm")
    with pytest.raises(EmptyDatasetError):
        evaluate(params, Batch(np.zeros((0, 4), dtype=int), np.zeros(0, dtype=int)), "classification")
    with pytest.raises(EmptyDatasetError):
        forward_loss(params, Batch(tokens, np.full((2, 4), -1)), "masked_lm")
    other = init_params(ModelConfig(num_layers=1), 0)
    with pytest.raises(LayoutMismatchError):
        check_compatible(other, TINY)


def _with_zero_classifier(params, bias=None):
    values = params.values.copy()
    w = params.layout.unflatten(values)
    w["head.cls.weight"][...] = 0.0
    w["head.cls.bias"][...] = 0.0 if bias is None else bias
    return ParamVector(params.layout, values, "zero-head")


@pytest.mark.parametrize("head", ["classification", "masked_lm"])
def test_loss_ignores_batch_order(head):
    params = _perturbed(TINY, 3)
    batch = _batches(TINY, 3)[head]
    order = np.array([2, 0, 3, 1])
    shuffled = Batch(batch.token_ids[order], batch.labels[order])
    a, b = forward_loss(params, batch, head), forward_loss(params, shuffled, head)
    assert b.loss == pytest.approx(a.loss, abs=1e-12)
    assert b.correct_count == a.correct_count


@pytest.mark.parametrize("num_classes", [2, 3])
def test_zero_head_loss_is_log_num_classes(num_classes):
    config = ModelConfig(num_layers=1, model_dim=8, num_heads=2, ffn_dim=16, vocab_size=16, max_seq_len=8,
                         num_classes=num_classes)
    params = _with_zero_classifier(_perturbed(config, 0))
    tokens = _batches(config, 0)["classification"].token_ids[:2]
    loss = forward_loss(params, Batch(tokens, np.array([0, num_classes - 1])), "classification").loss
    assert loss == pytest.approx(math.log(num_classes), rel=1e-15)


def test_absent_tokens_get_no_embedding_gradient():
    params = _perturbed(TINY, 1)
    tokens = np.array([[CLS_ID, 2, 3, 4, 2, 3, 4, 2], [CLS_ID, 4, 4, 3, 2, 2, 3, 4]])
    g = grad(params, Batch(tokens, np.array([0, 1])), "classification")
    rows = g.layout.unflatten(g.values)["embed.token"]
    present = [CLS_ID, 2, 3, 4]
    absent = [t for t in range(TINY.vocab_size) if t not in present]
    assert np.all(rows[absent] == 0.0)
    assert np.all(np.any(rows[present] != 0.0, axis=1))


def test_majority_class_error_on_a_60_40_split():
    # constant prediction of class 0
    params = _with_zero_classifier(init_params(TINY, 0), bias=np.array([1.0, 0.0]))
    corpus = gen_corpus(0, 10, TINY_PROCESS)
    dataset = Batch(corpus.sequences, np.array([0] * 6 + [1] * 4))
    metrics = evaluate(params, dataset, "classification")
    assert metrics.error_rate == pytest.approx(0.40, abs=1e-15)
    assert metrics.correct_count == 6
    assert np.all(predict(params, corpus.sequences) == 0)
