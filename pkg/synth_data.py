# synth_data.py
"""
Synthetic corpus and classification tasks.

Sequences come from a mixture of two first-order token-transition regimes
that share one process seed. The pretraining corpus mixes both regimes, so
masked-token prediction learns exactly the transition structure the
downstream tasks are built on:

  regime  label = which of the two transition matrices generated the sequence
  motif   label = whether a fixed three-token path occurs in the sequence

Position 0 of every sequence is [CLS]; regular tokens start at id 2.
"""

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from errors import FormatError, UnknownKindError
from mini_model import CLS_ID, MASK_ID, NUM_SPECIAL, LabeledSet

TASK_KINDS = ("regime", "motif")
BLOCK = 4096
# give up on a split after this many blocks of draws
MAX_DRAW_BLOCKS = 64


@dataclass(frozen=True)
class TokenProcess:
    vocab_size: int = 64
    seq_len: int = 16
    process_seed: int = 0
    successors: int = 3
    regime_shift: float = 0.5

    def __post_init__(self):
        if self.vocab_size < NUM_SPECIAL + 2:
            raise ValueError(f"vocab_size must leave at least 2 regular tokens, got {self.vocab_size}")
        if self.seq_len < 2:
            raise ValueError(f"seq_len must be >= 2 ([CLS] plus one token), got {self.seq_len}")
        if self.successors < 1:
            raise ValueError(f"successors must be >= 1, got {self.successors}")
        if not 0.0 <= self.regime_shift <= 1.0:
            raise ValueError(f"regime_shift must be in [0, 1], got {self.regime_shift}")

    def max_distinct_sequences(self):
        """Upper bound on the number of sequences either regime can emit."""
        r = self.num_regular
        k = min(self.successors, r)
        steps = self.seq_len - 2
        return min(r ** (steps + 1), 2 * r * k ** steps)

    @property
    def num_regular(self):
        return self.vocab_size - NUM_SPECIAL

    def matrices(self):
        """(P_A, P_B) over regular tokens; P_B re-draws a share of P_A's rows."""
        r = self.num_regular
        k = min(self.successors, r)
        rng = np.random.default_rng([self.process_seed, 7])

        def draw_row():
            row = np.zeros(r)
            cols = rng.choice(r, size=k, replace=False)
            row[cols] = rng.dirichlet(np.full(k, 2.0))
            return row

        p_a = np.stack([draw_row() for _ in range(r)])
        p_b = p_a.copy()
        for i in range(r):
            if rng.random() < self.regime_shift:
                p_b[i] = draw_row()
        return p_a, p_b

    def motif(self):
        """A likely three-token path under regime A (as token ids)."""
        p_a, _ = self.matrices()
        rng = np.random.default_rng([self.process_seed, 11])
        a = int(rng.integers(self.num_regular))
        b = int(np.argmax(p_a[a]))
        c = int(np.argmax(p_a[b]))
        return tuple(t + NUM_SPECIAL for t in (a, b, c))


@dataclass
class SyntheticCorpus:
    sequences: np.ndarray
    vocab_size: int
    generator_spec: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.sequences)


@dataclass
class ClassificationTask:
    name: str
    train: LabeledSet
    dev: LabeledSet
    num_classes: int
    task_id: int
    generator_spec: dict = field(default_factory=dict)


def _sample_chains(process, regimes, rng):
    """One sequence per entry of regimes (0 = A, 1 = B), [CLS] first."""
    mats = [np.cumsum(m, axis=1) for m in process.matrices()]
    n = len(regimes)
    r = process.num_regular
    out = np.empty((n, process.seq_len), dtype=np.int64)
    out[:, 0] = CLS_ID
    current = rng.integers(r, size=n)
    out[:, 1] = current + NUM_SPECIAL
    for t in range(2, process.seq_len):
        u = rng.random(n)
        nxt = np.empty(n, dtype=np.int64)
        for regime, cum in enumerate(mats):
            rows = regimes == regime
            if np.any(rows):
                picks = (cum[current[rows]] < u[rows, None]).sum(axis=1)
                nxt[rows] = np.minimum(picks, r - 1)
        current = nxt
        out[:, t] = current + NUM_SPECIAL
    return out


def gen_corpus(seed, size, process=None):
    """
    Sample an unlabeled pretraining corpus from both regimes.

    Args:
        seed: seed for regime choice and token draws
        size: number of sequences
        process: TokenProcess, default TokenProcess()

    Returns:
        SyntheticCorpus of (size, seq_len) token ids, [CLS] first
    """
    if size < 1:
        raise ValueError(f"corpus size must be >= 1, got {size}")
    process = process or TokenProcess()
    rng = np.random.default_rng([seed, 1])
    regimes = rng.integers(2, size=size)
    sequences = _sample_chains(process, regimes, rng)
    spec = {"rule": "markov-mixture", "seed": seed, "size": size, "process": asdict(process)}
    return SyntheticCorpus(sequences, process.vocab_size, spec)


def expected_bigram_distribution(process, regime_weights=(0.5, 0.5)):
    """Exact joint law of (token, next token) over regular positions of one sequence."""
    r = process.num_regular
    steps = process.seq_len - 2
    joint = np.zeros((r, r))
    for weight, p in zip(regime_weights, process.matrices()):
        occupancy = np.full(r, 1.0 / r)
        for _ in range(steps):
            joint += weight * occupancy[:, None] * p
            occupancy = occupancy @ p
    return joint / steps


def empirical_bigram_distribution(sequences, vocab_size):
    r = vocab_size - NUM_SPECIAL
    body = np.asarray(sequences)[:, 1:] - NUM_SPECIAL
    counts = np.zeros((r, r))
    np.add.at(counts, (body[:, :-1].ravel(), body[:, 1:].ravel()), 1.0)
    return counts / counts.sum()


def contains_motif(sequences, motif):
    seqs = np.asarray(sequences)
    a, b, c = motif
    hit = (seqs[:, :-2] == a) & (seqs[:, 1:-1] == b) & (seqs[:, 2:] == c)
    return hit.any(axis=1)


def _fill_split(want, draw, used):
    """Collect want[label] unseen sequences per label using draw(rng-block) -> (seqs, labels)."""
    picked = {label: [] for label in want}
    blocks = 0
    while any(len(picked[l]) < want[l] for l in want):
        if blocks == MAX_DRAW_BLOCKS:
            short = [l for l in want if len(picked[l]) < want[l]]
            label = short[0]
            raise ValueError(
                f"only {len(picked[label])} of {want[label]} unseen sequences with label {label} "
                f"after {blocks * BLOCK} draws; use a larger vocab_size or seq_len, or smaller splits")
        blocks += 1
        seqs, labels = draw()
        for seq, label in zip(seqs, labels):
            label = int(label)
            if label not in picked or len(picked[label]) >= want[label]:
                continue
            key = seq.tobytes()
            if key in used:
                continue
            used.add(key)
            picked[label].append(seq)
    return picked


def _balanced_split(size, draw, used, rng):
    labels = np.arange(size) % 2
    rng.shuffle(labels)
    picked = _fill_split({0: int(np.sum(labels == 0)), 1: int(np.sum(labels == 1))}, draw, used)
    cursor = {0: 0, 1: 0}
    rows = []
    for label in labels:
        rows.append(picked[int(label)][cursor[int(label)]])
        cursor[int(label)] += 1
    return LabeledSet(np.array(rows, dtype=np.int64).reshape(size, -1), labels.astype(np.int64))


def gen_task(kind, seed, sizes, process=None):
    """
    Build a balanced binary classification task with disjoint train and dev splits.

    Args:
        kind: "regime" or "motif"
        seed: seed for the draws (the transition matrices come from process)
        sizes: (train_size, dev_size)
        process: TokenProcess, default TokenProcess()

    Returns:
        ClassificationTask with no sequence shared within or across splits

    Raises:
        ValueError when the process cannot supply enough distinct sequences
    """
    if kind not in TASK_KINDS:
        raise UnknownKindError(f"unknown task kind '{kind}', expected one of {TASK_KINDS}")
    train_size, dev_size = sizes
    if train_size < 1 or dev_size < 1:
        raise ValueError(f"task split sizes must be >= 1, got {sizes}")
    process = process or TokenProcess()
    if kind == "motif" and process.seq_len < 4:
        raise ValueError(f"the motif task needs seq_len >= 4 ([CLS] plus three tokens), got {process.seq_len}")
    capacity = process.max_distinct_sequences()
    if train_size + dev_size > capacity:
        raise ValueError(f"{train_size + dev_size} distinct sequences requested but the process "
                         f"can emit at most {capacity}")
    task_id = TASK_KINDS.index(kind)
    rng = np.random.default_rng([seed, 2, task_id])

    if kind == "regime":
        def draw():
            regimes = rng.integers(2, size=BLOCK)
            return _sample_chains(process, regimes, rng), regimes
    else:
        motif = process.motif()

        def draw():
            seqs = _sample_chains(process, rng.integers(2, size=BLOCK), rng)
            return seqs, contains_motif(seqs, motif).astype(np.int64)

    used = set()
    train = _balanced_split(train_size, draw, used, rng)
    dev = _balanced_split(dev_size, draw, used, rng)
    spec = {"kind": kind, "seed": seed, "sizes": [train_size, dev_size], "process": asdict(process)}
    return ClassificationTask(kind, train, dev, 2, task_id, spec)


def likelihood_ratio_predict(process, sequences):
    """Regime guess from the true generator: 1 where regime B is strictly more likely."""
    body = np.asarray(sequences)[:, 1:] - NUM_SPECIAL
    with np.errstate(divide="ignore"):
        log_a, log_b = (np.log(p) for p in process.matrices())
    prev, nxt = body[:, :-1], body[:, 1:]
    ll_a = log_a[prev, nxt].sum(axis=1)
    ll_b = log_b[prev, nxt].sum(axis=1)
    with np.errstate(invalid="ignore"):
        return (ll_b > ll_a).astype(np.int64)


def make_mlm_set(sequences, rng, mask_rate=0.15):
    """Mask regular positions with probability mask_rate, at least one per sequence."""
    tokens = np.array(sequences, dtype=np.int64)
    n, s = tokens.shape
    chosen = rng.random((n, s)) < mask_rate
    chosen[:, 0] = False
    empty = ~chosen.any(axis=1)
    if np.any(empty):
        forced = rng.integers(1, s, size=int(empty.sum()))
        chosen[np.flatnonzero(empty), forced] = True
    labels = np.where(chosen, tokens, -1)
    tokens[chosen] = MASK_ID
    return LabeledSet(tokens, labels)


# ============================================================================
# JSON LINES I/O
# ============================================================================

def write_jsonl(path, token_ids, labels=None):
    with open(path, "w", encoding="utf-8") as f:
        for k, seq in enumerate(np.asarray(token_ids)):
            row = {"tokens": [int(t) for t in seq]}
            if labels is not None:
                row["label"] = int(labels[k])
            f.write(json.dumps(row) + "\n")


def read_jsonl(path):
    tokens, labels = [], []
    with open(path, "r", encoding="utf-8") as f:
        for line_num, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                tokens.append(row["tokens"])
                if "label" in row:
                    labels.append(row["label"])
            except (json.JSONDecodeError, KeyError) as e:
                raise FormatError(f"{path}:{line_num}: not a sequence record ({e})")
    if labels and len(labels) != len(tokens):
        raise FormatError(f"{path}: some records have labels and some do not")
    try:
        token_array = np.array(tokens, dtype=np.int64)
    except ValueError:
        raise FormatError(f"{path}: sequences have different lengths")
    return token_array, (np.array(labels, dtype=np.int64) if labels else None)


def _write_meta(path, meta):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def _read_meta(path):
    if not os.path.exists(path):
        raise FormatError(f"metadata file '{path}' not found")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def save_corpus(corpus, data_dir, name="corpus"):
    os.makedirs(data_dir, exist_ok=True)
    write_jsonl(os.path.join(data_dir, f"{name}.jsonl"), corpus.sequences)
    _write_meta(os.path.join(data_dir, f"{name}.meta.json"),
                {"vocab_size": corpus.vocab_size, "generator_spec": corpus.generator_spec})


def load_corpus(data_dir, name="corpus"):
    meta = _read_meta(os.path.join(data_dir, f"{name}.meta.json"))
    sequences, _ = read_jsonl(os.path.join(data_dir, f"{name}.jsonl"))
    return SyntheticCorpus(sequences, meta["vocab_size"], meta["generator_spec"])


def save_task(task, data_dir):
    os.makedirs(data_dir, exist_ok=True)
    write_jsonl(os.path.join(data_dir, f"{task.name}_train.jsonl"), task.train.token_ids, task.train.labels)
    write_jsonl(os.path.join(data_dir, f"{task.name}_dev.jsonl"), task.dev.token_ids, task.dev.labels)
    _write_meta(os.path.join(data_dir, f"{task.name}.meta.json"), {
        "name": task.name,
        "num_classes": task.num_classes,
        "task_id": task.task_id,
        "generator_spec": task.generator_spec,
    })


def load_task(data_dir, name):
    meta = _read_meta(os.path.join(data_dir, f"{name}.meta.json"))
    splits = []
    for split in ("train", "dev"):
        tokens, labels = read_jsonl(os.path.join(data_dir, f"{name}_{split}.jsonl"))
        if labels is None:
            raise FormatError(f"{name}_{split}.jsonl has no labels")
        splits.append(LabeledSet(tokens, labels))
    return ClassificationTask(meta["name"], splits[0], splits[1], meta["num_classes"],
                              meta["task_id"], meta["generator_spec"])


def process_from_spec(generator_spec):
    return TokenProcess(**generator_spec["process"])
