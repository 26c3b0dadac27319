"""Knowledge-distillation training of the draft head.

The distilled dataset is built by rolling the base model forward a fixed
horizon of greedy tokens at every position of a corpus sequence, capturing
the hidden state at that position; the ground-truth variant keeps the corpus
continuation instead.  Training minimizes the mean teacher-forced negative
log-likelihood with Adam; the base model stays frozen throughout.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import drafter
from .errors import ContractError, FormatError, TrainingError
from .kernels import argmax_tie_low

log = logging.getLogger(__name__)


@dataclass
class DistillExample:
    context: np.ndarray  # committed tokens the example conditions on
    teacher: np.ndarray  # horizon target tokens
    h: np.ndarray        # base-model hidden state at the last context position


@dataclass
class TrainConfig:
    horizon: int = 5
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1 or self.learning_rate < 0:
            raise ContractError("need horizon >= 1 and learning_rate >= 0")


def build_distill_dataset(base, corpus, horizon):
    """One example per corpus position: greedy horizon-token rollout plus h.

    Sequences of length <= 1 (or positions without rollout headroom) are
    skipped; the skip count is logged.
    """
    examples = []
    skipped = 0
    for seq in corpus:
        seq = np.asarray(seq, dtype=np.int64)
        if seq.shape[0] <= 1:
            skipped += 1
            continue
        cache = base.new_cache()
        for t in range(1, seq.shape[0] + 1):
            out = base.forward_context([seq[t - 1]], cache)
            if t + horizon > base.config.max_seq_len:
                skipped += 1
                continue
            scratch = cache.clone()
            roll_out = out
            teacher = []
            for _ in range(horizon):
                token = argmax_tie_low(roll_out.logits[-1])
                teacher.append(token)
                roll_out = base.forward_context([token], scratch)
            examples.append(DistillExample(context=seq[:t].copy(),
                                           teacher=np.asarray(teacher, np.int64),
                                           h=out.hidden[-1].copy()))
    if skipped:
        log.warning("distill dataset: skipped %d short/overflowing positions", skipped)
    return examples


def ground_truth_dataset(base, corpus, horizon):
    """Control arm: the teacher is the corpus's own continuation.

    The base model still supplies the hidden states the draft head conditions
    on.  Positions within ``horizon`` of the sequence end are skipped.
    """
    examples = []
    skipped = 0
    for seq in corpus:
        seq = np.asarray(seq, dtype=np.int64)
        if seq.shape[0] <= horizon:
            skipped += 1
            continue
        cache = base.new_cache()
        out = base.forward_context(seq, cache)
        for t in range(1, seq.shape[0] - horizon + 1):
            examples.append(DistillExample(context=seq[:t].copy(),
                                           teacher=seq[t:t + horizon].copy(),
                                           h=out.hidden[t - 1].copy()))
    if skipped:
        log.warning("ground-truth dataset: skipped %d short sequences", skipped)
    return examples


def write_dataset(path, examples):
    """Newline-delimited records: context_len T context_tokens... teacher_tokens..."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fields = [len(ex.context), len(ex.teacher), *ex.context, *ex.teacher]
            fh.write(" ".join(str(int(x)) for x in fields) + "\n")


def read_dataset(path, base):
    """Load a dataset file, recomputing hidden states with the given base model."""
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            vals = [int(x) for x in line.split()]
            if len(vals) < 2 or len(vals) != 2 + vals[0] + vals[1]:
                raise FormatError(f"{path}:{lineno}: malformed dataset record")
            n_ctx, horizon = vals[0], vals[1]
            context = np.asarray(vals[2:2 + n_ctx], np.int64)
            teacher = np.asarray(vals[2 + n_ctx:], np.int64)
            cache = base.new_cache()
            out = base.forward_context(context, cache)
            examples.append(DistillExample(context=context, teacher=teacher,
                                           h=out.hidden[-1].copy()))
    return examples


def train_drafter(dataset, params_init, cfg, embeddings):
    """Adam on the mean teacher-forced loss.  Deterministic for a fixed seed.

    Returns the trained parameters and the per-epoch mean loss curve.
    """
    if not dataset:
        raise ContractError("training dataset is empty")
    horizons = {len(ex.teacher) for ex in dataset}
    if horizons != {cfg.horizon}:
        raise ContractError(f"dataset horizons {sorted(horizons)} != cfg.horizon {cfg.horizon}")

    params = params_init.copy()
    emb = np.asarray(embeddings, dtype=np.float64)
    h_all = np.stack([ex.h for ex in dataset]).astype(np.float64)
    s0_all = emb[[int(ex.context[-1]) for ex in dataset]]
    teacher_all = np.stack([ex.teacher for ex in dataset])

    m = [np.zeros_like(arr) for _, arr in params.flat_arrays()]
    v = [np.zeros_like(arr) for _, arr in params.flat_arrays()]
    step_count = 0
    rng = np.random.default_rng(cfg.seed)
    n = len(dataset)
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = drafter.batch_loss(params, emb, h_all[idx], s0_all[idx],
                                             teacher_all[idx])
            denom = len(idx) * cfg.horizon  # mean over sequences and positions
            epoch_loss += loss
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged to {loss} at epoch {epoch}")
            grads.scale(1.0 / denom)
            step_count += 1
            bc1 = 1.0 - cfg.beta1 ** step_count
            bc2 = 1.0 - cfg.beta2 ** step_count
            for slot, (_, g) in enumerate(grads.flat_arrays()):
                m[slot] = cfg.beta1 * m[slot] + (1.0 - cfg.beta1) * g
                v[slot] = cfg.beta2 * v[slot] + (1.0 - cfg.beta2) * g * g
            for slot, (_, p) in enumerate(params.flat_arrays()):
                p -= cfg.learning_rate * (m[slot] / bc1) / (np.sqrt(v[slot] / bc2) + cfg.eps)
        curve.append(epoch_loss / (n * cfg.horizon))
    return params, curve


def empirical_kl(base, params, probe_contexts, horizon, embeddings=None):
    """Exact per-step KL(base || drafter), teacher-forced on base greedy tokens.

    Returns an array of length ``horizon``: KL at recurrence step k averaged
    over the probe contexts.
    """
    emb = np.asarray(embeddings if embeddings is not None else base.token_embeddings,
                     dtype=np.float64)
    totals = np.zeros(horizon)
    for context in probe_contexts:
        cache = base.new_cache()
        out = base.forward_context(list(context), cache)
        state = drafter.init_state(out.hidden[-1], int(context[-1]), emb)
        for k in range(horizon):
            base_logits = out.logits[-1].astype(np.float64)
            z = base_logits - base_logits.max()
            p = np.exp(z) / np.exp(z).sum()
            logp_base = z - np.log(np.exp(z).sum())
            logq = drafter.head_logp(state, params)
            totals[k] += float((p * (logp_base - logq)).sum())
            token = argmax_tie_low(base_logits)
            out = base.forward_context([token], cache)
            state = drafter.step(state, token, params, emb)
    return totals / max(1, len(probe_contexts))


def sample_markov_corpus(seed, n_sequences=500, seq_len=64, vocab_size=32, order=2,
                         temperature=1.0):
    """Corpus drawn from a seeded random Markov chain (softmax-sampled).

    Built from its own transition table, so it is distinct from any
    SyntheticMarkovModel's greedy chains.
    """
    rng = np.random.default_rng(seed)
    table = rng.normal(0.0, 1.5, (vocab_size ** order, vocab_size))
    sequences = []
    for _ in range(n_sequences):
        seq = [int(rng.integers(vocab_size)) for _ in range(order)]
        while len(seq) < seq_len:
            idx = 0
            for t in seq[-order:]:
                idx = idx * vocab_size + t
            z = table[idx] / temperature
            z = z - z.max()
            p = np.exp(z) / np.exp(z).sum()
            seq.append(int(rng.choice(vocab_size, p=p)))
        sequences.append(np.asarray(seq, np.int64))
    return sequences
