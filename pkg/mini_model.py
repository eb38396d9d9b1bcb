# mini_model.py
"""
A small pre-layer-norm transformer encoder written directly in numpy.

All weights are read out of one flat ParamVector, and the backward pass is
derived by hand so that training, gradient checks and landscape sampling all
work on the same flat float64 array. No dropout anywhere: a loss value is a
pure function of (params, batch).

Token id 0 is [CLS] and sits at position 0 of every sequence; the
classification head reads its final hidden state. Token id 1 is [MASK].
"""

import math
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from errors import EmptyDatasetError, LayoutMismatchError, TokenRangeError, UnknownKindError
from param_space import Direction, ParamLayout, ParamVector, Provenance, Segment

CLS_ID = 0
MASK_ID = 1
NUM_SPECIAL = 2

HEADS = ("masked_lm", "classification")
LN_EPS = 1e-5
GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 6
    model_dim: int = 32
    num_heads: int = 2
    ffn_dim: int = 64
    vocab_size: int = 64
    max_seq_len: int = 16
    num_classes: int = 2

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 1:
                raise ValueError(f"model config '{name}' must be >= 1, got {value}")
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}")
        if self.vocab_size <= NUM_SPECIAL:
            raise ValueError(f"vocab_size must leave room for regular tokens, got {self.vocab_size}")

    @property
    def head_dim(self):
        return self.model_dim // self.num_heads

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class Batch:
    token_ids: np.ndarray
    # (B,) class ids, or (B, S) target ids with -1 where nothing is predicted
    labels: np.ndarray

    @property
    def head(self):
        return "classification" if self.labels.ndim == 1 else "masked_lm"

    def __len__(self):
        return self.token_ids.shape[0]

    def subset(self, index):
        return Batch(self.token_ids[index], self.labels[index])


# a labeled dataset is just a big batch
LabeledSet = Batch


@dataclass(frozen=True)
class LossValue:
    loss: float
    correct_count: int
    example_count: int


@dataclass(frozen=True)
class Metrics:
    loss: float
    error_rate: float
    correct_count: int
    example_count: int


# ============================================================================
# LAYOUT AND INITIALIZATION
# ============================================================================

def _layer_shapes(c):
    d, f = c.model_dim, c.ffn_dim
    return [
        ("ln1.gain", (d,)), ("ln1.bias", (d,)),
        ("attn.wq", (d, d)), ("attn.bq", (d,)),
        ("attn.wk", (d, d)), ("attn.bk", (d,)),
        ("attn.wv", (d, d)), ("attn.bv", (d,)),
        ("attn.wo", (d, d)), ("attn.bo", (d,)),
        ("ln2.gain", (d,)), ("ln2.bias", (d,)),
        ("ffn.w1", (d, f)), ("ffn.b1", (f,)),
        ("ffn.w2", (f, d)), ("ffn.b2", (d,)),
    ]


def build_layout(config):
    c = config
    entries = [
        ("embed.token", None, (c.vocab_size, c.model_dim), "embedding"),
        ("embed.position", None, (c.max_seq_len, c.model_dim), "embedding"),
    ]
    for layer in range(c.num_layers):
        for name, shape in _layer_shapes(c):
            entries.append((f"layer{layer}.{name}", layer, shape, "encoder"))
    entries += [
        ("final_ln.gain", None, (c.model_dim,), "final_norm"),
        ("final_ln.bias", None, (c.model_dim,), "final_norm"),
        ("head.mlm.weight", None, (c.model_dim, c.vocab_size), "head"),
        ("head.mlm.bias", None, (c.vocab_size,), "head"),
        ("head.cls.weight", None, (c.model_dim, c.num_classes), "head"),
        ("head.cls.bias", None, (c.num_classes,), "head"),
    ]
    segments = []
    offset = 0
    for name, layer, shape, role in entries:
        length = int(np.prod(shape))
        segments.append(Segment(name, layer, offset, length, shape, role))
        offset += length
    return ParamLayout(tuple(segments), offset, config)


def param_count(config):
    """Closed-form parameter count; must agree with build_layout."""
    d, f, v, s, k = config.model_dim, config.ffn_dim, config.vocab_size, config.max_seq_len, config.num_classes
    per_layer = 4 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d)
    return v * d + s * d + config.num_layers * per_layer + 2 * d + (d * v + v) + (d * k + k)


def _fill(values, layout, rng, config):
    w = layout.unflatten(values)
    out_scale = 1.0 / math.sqrt(2.0 * config.num_layers)
    for seg in layout.segments:
        tail = seg.name.rsplit(".", 1)[-1]
        arr = w[seg.name]
        if seg.name.startswith("embed."):
            arr[...] = rng.normal(0.0, 1.0, seg.shape)
        elif tail == "gain":
            arr[...] = 1.0
        elif seg.name.startswith("head.") and tail == "weight":
            arr[...] = rng.normal(0.0, 0.02, seg.shape)
        elif len(seg.shape) == 2:
            std = 1.0 / math.sqrt(seg.shape[0])
            if tail in ("wo", "w2"):
                std *= out_scale
            arr[...] = rng.normal(0.0, std, seg.shape)
        else:
            arr[...] = 0.0


def init_params(config, seed):
    layout = build_layout(config)
    values = np.zeros(layout.total_len)
    _fill(values, layout, np.random.default_rng(seed), config)
    return ParamVector(layout, values, f"init{seed}")


def reset_head(params, seed):
    """Fresh classification head drawn from seed; every other segment untouched."""
    values = params.values.copy()
    w = params.layout.unflatten(values)
    rng = np.random.default_rng(seed)
    w["head.cls.weight"][...] = rng.normal(0.0, 0.02, w["head.cls.weight"].shape)
    w["head.cls.bias"][...] = 0.0
    return ParamVector(params.layout, values, params.label)


def config_of(params):
    config = params.layout.model_config
    if not isinstance(config, ModelConfig):
        raise LayoutMismatchError(f"'{params.label}' was not built by mini_model.build_layout")
    return config


# ============================================================================
# FORWARD / BACKWARD
# ============================================================================

def _layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def _layer_norm_backward(dy, gain, cache):
    xhat, inv = cache
    d = dy.shape[-1]
    dgain = (dy * xhat).reshape(-1, d).sum(axis=0)
    dbias = dy.reshape(-1, d).sum(axis=0)
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


def _gelu(u):
    t = np.tanh(GELU_C * (u + 0.044715 * u ** 3))
    return 0.5 * u * (1.0 + t), t


def _gelu_grad(u, t):
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * u * u)


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _split_heads(x, h):
    b, s, d = x.shape
    return x.reshape(b, s, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * dh)


def _encode(w, config, token_ids):
    """Run the encoder. Returns the final normalized hidden states and the caches for backward."""
    b, s = token_ids.shape
    h = config.num_heads
    scale = 1.0 / math.sqrt(config.head_dim)
    x = w["embed.token"][token_ids] + w["embed.position"][:s]
    caches = []
    for layer in range(config.num_layers):
        p = f"layer{layer}."
        hn, ln1 = _layer_norm(x, w[p + "ln1.gain"], w[p + "ln1.bias"])
        q = _split_heads(hn @ w[p + "attn.wq"] + w[p + "attn.bq"], h)
        k = _split_heads(hn @ w[p + "attn.wk"] + w[p + "attn.bk"], h)
        v = _split_heads(hn @ w[p + "attn.wv"] + w[p + "attn.bv"], h)
        attn = softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
        ctx = _merge_heads(attn @ v)
        x = x + ctx @ w[p + "attn.wo"] + w[p + "attn.bo"]
        hn2, ln2 = _layer_norm(x, w[p + "ln2.gain"], w[p + "ln2.bias"])
        u = hn2 @ w[p + "ffn.w1"] + w[p + "ffn.b1"]
        a, t = _gelu(u)
        x = x + a @ w[p + "ffn.w2"] + w[p + "ffn.b2"]
        caches.append((hn, ln1, q, k, v, attn, ctx, hn2, ln2, u, a, t))
    hf, lnf = _layer_norm(x, w["final_ln.gain"], w["final_ln.bias"])
    return hf, (caches, lnf)


def attention_maps(params, token_ids):
    """Attention probabilities per layer, shape (B, heads, S, S) each."""
    config = config_of(params)
    token_ids = _check_tokens(np.asarray(token_ids), config)
    _, (caches, _) = _encode(params.unflatten(), config, token_ids)
    return [c[5] for c in caches]


def _head_forward(w, hf, labels, head):
    """Logits for the predicted positions, their targets, and where they came from."""
    if head == "classification":
        feats = hf[:, 0, :]
        logits = feats @ w["head.cls.weight"] + w["head.cls.bias"]
        return logits, labels, feats, None
    where = labels >= 0
    feats = hf[where]
    logits = feats @ w["head.mlm.weight"] + w["head.mlm.bias"]
    return logits, labels[where], feats, where


def _check_tokens(token_ids, config):
    if token_ids.ndim != 2:
        raise ValueError(f"token_ids must be (batch, seq_len), got shape {token_ids.shape}")
    if token_ids.shape[1] > config.max_seq_len:
        raise ValueError(f"sequence length {token_ids.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= config.vocab_size):
        raise TokenRangeError(f"token ids must lie in [0, {config.vocab_size})")
    return token_ids


def _check_batch(batch, head, config):
    if head not in HEADS:
        raise UnknownKindError(f"unknown head '{head}', expected one of {HEADS}")
    if batch.head != head:
        raise ValueError(f"batch labels are shaped for '{batch.head}', not '{head}'")
    tokens = _check_tokens(np.asarray(batch.token_ids), config)
    labels = np.asarray(batch.labels)
    if head == "classification":
        if labels.size and (labels.min() < 0 or labels.max() >= config.num_classes):
            raise ValueError(f"class labels must lie in [0, {config.num_classes})")
    else:
        if labels.shape != tokens.shape:
            raise ValueError("masked_lm labels must have the same shape as token_ids")
        if labels.max(initial=-1) >= config.vocab_size:
            raise TokenRangeError(f"target ids must lie in [0, {config.vocab_size})")
        if np.any(tokens[labels >= 0] != MASK_ID):
            raise ValueError("every predicted position must hold the [MASK] token")
    return tokens, labels


def _cross_entropy(logits, targets):
    if len(targets) == 0:
        raise EmptyDatasetError("batch has nothing to predict")
    logp = _log_softmax(logits)
    picked = logp[np.arange(len(targets)), targets]
    correct = int(np.sum(np.argmax(logits, axis=-1) == targets))
    return -picked.mean(), logp, correct


def forward_loss(params, batch, head):
    config = config_of(params)
    tokens, labels = _check_batch(batch, head, config)
    w = params.unflatten()
    hf, _ = _encode(w, config, tokens)
    logits, targets, _, _ = _head_forward(w, hf, labels, head)
    loss, _, correct = _cross_entropy(logits, targets)
    return LossValue(float(loss), correct, len(targets))


def loss_and_grad(params, batch, head):
    """Mean cross-entropy and its gradient with respect to every parameter."""
    config = config_of(params)
    tokens, labels = _check_batch(batch, head, config)
    w = params.unflatten()
    hf, (caches, lnf) = _encode(w, config, tokens)
    logits, targets, feats, where = _head_forward(w, hf, labels, head)
    loss, logp, correct = _cross_entropy(logits, targets)

    grad_values = np.zeros(params.layout.total_len)
    g = params.layout.unflatten(grad_values)

    n = len(targets)
    dlogits = np.exp(logp)
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n
    dhf = np.zeros_like(hf)
    if head == "classification":
        g["head.cls.weight"][...] = feats.T @ dlogits
        g["head.cls.bias"][...] = dlogits.sum(axis=0)
        dhf[:, 0, :] = dlogits @ w["head.cls.weight"].T
    else:
        g["head.mlm.weight"][...] = feats.T @ dlogits
        g["head.mlm.bias"][...] = dlogits.sum(axis=0)
        dhf[where] = dlogits @ w["head.mlm.weight"].T

    dx, g["final_ln.gain"][...], g["final_ln.bias"][...] = _layer_norm_backward(dhf, w["final_ln.gain"], lnf)

    d = config.model_dim
    scale = 1.0 / math.sqrt(config.head_dim)
    for layer in reversed(range(config.num_layers)):
        p = f"layer{layer}."
        hn, ln1, q, k, v, attn, ctx, hn2, ln2, u, a, t = caches[layer]

        # feed-forward block (residual: dx flows through unchanged)
        g[p + "ffn.w2"][...] = a.reshape(-1, a.shape[-1]).T @ dx.reshape(-1, d)
        g[p + "ffn.b2"][...] = dx.reshape(-1, d).sum(axis=0)
        du = (dx @ w[p + "ffn.w2"].T) * _gelu_grad(u, t)
        g[p + "ffn.w1"][...] = hn2.reshape(-1, d).T @ du.reshape(-1, du.shape[-1])
        g[p + "ffn.b1"][...] = du.reshape(-1, du.shape[-1]).sum(axis=0)
        dln2, g[p + "ln2.gain"][...], g[p + "ln2.bias"][...] = _layer_norm_backward(
            du @ w[p + "ffn.w1"].T, w[p + "ln2.gain"], ln2)
        dx = dx + dln2

        # attention block
        g[p + "attn.wo"][...] = ctx.reshape(-1, d).T @ dx.reshape(-1, d)
        g[p + "attn.bo"][...] = dx.reshape(-1, d).sum(axis=0)
        dctx = _split_heads(dx @ w[p + "attn.wo"].T, config.num_heads)
        dattn = dctx @ v.transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ dctx
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale
        dq = _merge_heads(dscores @ k)
        dk = _merge_heads(dscores.transpose(0, 1, 3, 2) @ q)
        dv = _merge_heads(dv)
        flat_hn = hn.reshape(-1, d)
        dhn = np.zeros_like(hn)
        for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
            g[p + f"attn.w{name}"][...] = flat_hn.T @ dproj.reshape(-1, d)
            g[p + f"attn.b{name}"][...] = dproj.reshape(-1, d).sum(axis=0)
            dhn += dproj @ w[p + f"attn.w{name}"].T
        dln1, g[p + "ln1.gain"][...], g[p + "ln1.bias"][...] = _layer_norm_backward(
            dhn, w[p + "ln1.gain"], ln1)
        dx = dx + dln1

    np.add.at(g["embed.token"], tokens, dx)
    g["embed.position"][:tokens.shape[1]] = dx.sum(axis=0)

    direction = Direction(params.layout, grad_values, Provenance("gradient", (params.label,)))
    return LossValue(float(loss), correct, n), direction


def grad(params, batch, head):
    return loss_and_grad(params, batch, head)[1]


def evaluate(params, dataset, head, batch_size=512):
    """Mean loss and error rate over a whole labeled set, in fixed chunk order."""
    total = len(dataset)
    if total == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    loss_sum = 0.0
    correct = 0
    count = 0
    for start in range(0, total, batch_size):
        part = dataset.subset(slice(start, start + batch_size))
        if head == "masked_lm" and not np.any(part.labels >= 0):
            continue
        result = forward_loss(params, part, head)
        loss_sum += result.loss * result.example_count
        correct += result.correct_count
        count += result.example_count
    if count == 0:
        raise EmptyDatasetError("dataset has no masked positions to evaluate")
    return Metrics(loss_sum / count, 1.0 - correct / count, correct, count)


def predict(params, token_ids):
    """Predicted class per sequence."""
    config = config_of(params)
    tokens = _check_tokens(np.asarray(token_ids), config)
    w = params.unflatten()
    hf, _ = _encode(w, config, tokens)
    logits = hf[:, 0, :] @ w["head.cls.weight"] + w["head.cls.bias"]
    return np.argmax(logits, axis=-1)


def check_compatible(params, config: Optional[ModelConfig]):
    if config is not None and config_of(params) != config:
        raise LayoutMismatchError(f"'{params.label}' was built for {config_of(params)}, not {config}")
