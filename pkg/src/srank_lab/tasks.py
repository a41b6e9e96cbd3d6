"""Deterministic synthetic token tasks.

copy          tokens repeat with period COPY_OFFSET, so the target is the
              token seen COPY_OFFSET positions back.
induction     a random segment followed by itself, so second-half targets
              are recoverable by matching the current token's earlier
              occurrence.
random_markov a skewed first-order Markov chain (one favored successor per
              token), learnable from the current token alone.

Batches are pure functions of (task, vocab, seq_len, batch, seed, step):
stream (0, step) draws batch randomness, stream (1, 0) draws the Markov
table, stream (2, 0) is reserved for probe sequences.
"""

import numpy as np

TASK_CHOICES = ("copy", "induction", "random_markov")

COPY_OFFSET = 4

_MARKOV_FAVORED_P = 0.9


def _stream(seed: int, key: tuple) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=key)))


def markov_table(seed: int, vocab: int) -> np.ndarray:
    """Row-stochastic transition matrix with one favored successor per token."""
    rng = _stream(seed, (1, 0))
    favored = rng.permutation(vocab)
    if vocab == 1:
        return np.ones((1, 1))
    table = np.full((vocab, vocab), (1.0 - _MARKOV_FAVORED_P) / (vocab - 1))
    table[np.arange(vocab), favored] = _MARKOV_FAVORED_P
    return table


def make_batch(task: str, vocab: int, seq_len: int, batch: int, seed: int, step: int) -> np.ndarray:
    """(batch, seq_len) int64 token array for the given step."""
    if task not in TASK_CHOICES:
        raise ValueError(f"unknown task {task!r}")
    rng = _stream(seed, (0, step))
    if task == "copy":
        tokens = rng.integers(0, vocab, size=(batch, seq_len))
        k = min(COPY_OFFSET, seq_len)
        for t in range(k, seq_len):
            tokens[:, t] = tokens[:, t - k]
        return tokens
    if task == "induction":
        half = (seq_len + 1) // 2
        seg = rng.integers(0, vocab, size=(batch, half))
        return np.concatenate([seg, seg], axis=1)[:, :seq_len]
    table = markov_table(seed, vocab)
    cum = np.cumsum(table, axis=1)
    tokens = np.empty((batch, seq_len), dtype=np.int64)
    tokens[:, 0] = rng.integers(0, vocab, size=batch)
    for t in range(1, seq_len):
        draws = rng.random(batch)
        tokens[:, t] = np.minimum(
            (draws[:, None] > cum[tokens[:, t - 1]]).sum(axis=1), vocab - 1
        )
    return tokens


def probe_sequence(task: str, vocab: int, seq_len: int, seed: int) -> np.ndarray:
    """Fixed diagnostic sequence drawn from a reserved stream."""
    if task not in TASK_CHOICES:
        raise ValueError(f"unknown task {task!r}")
    rng = _stream(seed, (2, 0))
    if task == "random_markov":
        table = markov_table(seed, vocab)
        cum = np.cumsum(table, axis=1)
        seq = np.empty(seq_len, dtype=np.int64)
        seq[0] = rng.integers(0, vocab)
        for t in range(1, seq_len):
            seq[t] = min(int((rng.random() > cum[seq[t - 1]]).sum()), vocab - 1)
        return seq
    if task == "copy":
        seq = rng.integers(0, vocab, size=seq_len)
        k = min(COPY_OFFSET, seq_len)
        for t in range(k, seq_len):
            seq[t] = seq[t - k]
        return seq
    half = (seq_len + 1) // 2
    seg = rng.integers(0, vocab, size=half)
    return np.concatenate([seg, seg])[:seq_len]
