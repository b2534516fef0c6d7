"""Synthetic sequence-classification tasks.

Token 0 is a [CLS]-style marker at position 0. Every task owns six signal
tokens split into groups A, B and C; the rest of the sequence is drawn from a
shared pool of noise tokens that no task reads. Labelling rules:

``presence``  (2 classes) tokens from A appear (1) or tokens from B appear (0)
``majority``  (2 classes) an odd number of A/B tokens; 1 iff A outnumbers B
``order``     (2 classes) one A and one B token; 1 iff A comes first
``dominant``  (3 classes) which of A, B, C occurs strictly most often

Train and eval splits partition sequence space by a content hash, so no
sequence can land in both.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .model import Example

RULES = {"presence": 2, "majority": 2, "order": 2, "dominant": 3}
CLS_TOKEN = 0
SIGNALS_PER_TASK = 6
EVAL_BUCKETS = 8  # one hash bucket in eight is reserved for evaluation
_HASH_MOD = 2_147_483_647
_CHUNK = 1024  # fixed draw size keeps shorter splits prefixes of longer ones


@dataclass(frozen=True)
class SyntheticTask:
    task_id: str
    rule: str
    seed: int
    seq_len: int
    signal_tokens: Tuple[int, ...]
    noise_tokens: Tuple[int, ...]

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown rule {self.rule!r}; choose from {sorted(RULES)}")
        if len(self.signal_tokens) != SIGNALS_PER_TASK:
            raise ValueError(f"task {self.task_id!r} needs {SIGNALS_PER_TASK} signal tokens")
        if set(self.signal_tokens) & set(self.noise_tokens) or CLS_TOKEN in self.signal_tokens + self.noise_tokens:
            raise ValueError("signal, noise and CLS tokens must be disjoint")
        if self.seq_len < 7:
            raise ValueError("seq_len must be at least 7")

    @property
    def n_classes(self) -> int:
        return RULES[self.rule]

    def groups(self):
        s = np.array(self.signal_tokens)
        return s[0:2], s[2:4], s[4:6]

    def to_dict(self) -> dict:
        return {
            "id": self.task_id,
            "rule": self.rule,
            "seed": self.seed,
            "seq_len": self.seq_len,
            "signal_tokens": list(self.signal_tokens),
            "noise_tokens": list(self.noise_tokens),
        }


def default_tasks(n_tasks: int, vocab_size: int, seq_len: int, base_seed: int = 0,
                  rules: Optional[Sequence[str]] = None) -> List[SyntheticTask]:
    """Tasks with disjoint signal blocks at the top of the vocabulary."""
    rules = list(rules) if rules else [list(RULES)[i % len(RULES)] for i in range(n_tasks)]
    first_signal = vocab_size - SIGNALS_PER_TASK * n_tasks
    if first_signal < 3:
        raise ValueError(f"vocab_size={vocab_size} too small for {n_tasks} tasks")
    noise = tuple(range(1, first_signal))
    tasks = []
    for i, rule in enumerate(rules):
        lo = first_signal + SIGNALS_PER_TASK * i
        tasks.append(SyntheticTask(f"t{i}-{rule}", rule, base_seed * 1000 + i, seq_len, tuple(range(lo, lo + SIGNALS_PER_TASK)), noise))
    return tasks


class Dataset:
    """Fixed-length examples of a single task, stored as arrays."""

    def __init__(self, tokens: np.ndarray, labels: np.ndarray, task_id: str):
        self.tokens = np.asarray(tokens, dtype=np.int64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.task_id = task_id
        if len(self.tokens) != len(self.labels):
            raise ValueError("tokens and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i) -> Example:
        return Example(tuple(int(t) for t in self.tokens[i]), int(self.labels[i]), self.task_id)

    def __iter__(self) -> Iterator[Example]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.tokens[idx], self.labels[idx], self.task_id)

    def shuffled(self, rng: np.random.Generator) -> "Dataset":
        return self.subset(rng.permutation(len(self)))

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for ex in self:
                f.write(json.dumps(ex.to_json()) + "\n")

    @classmethod
    def from_examples(cls, examples: Sequence[Example]) -> "Dataset":
        tasks = {ex.task_id for ex in examples}
        if len(tasks) != 1:
            raise ValueError(f"expected one task id, found {sorted(tasks)}")
        return cls(np.array([ex.tokens for ex in examples]), np.array([ex.label for ex in examples]), tasks.pop())


def read_jsonl(path) -> List[Example]:
    with open(path, encoding="utf-8") as f:
        return [Example.from_json(json.loads(line)) for line in f if line.strip()]


def _content_hash(tokens: np.ndarray) -> np.ndarray:
    h = np.zeros(len(tokens), dtype=np.int64)
    for col in tokens.T:
        h = (h * 131 + col + 1) % _HASH_MOD
    return h


def _sample_raw(task: SyntheticTask, rng: np.random.Generator, n: int):
    T = task.seq_len
    noise = np.array(task.noise_tokens)
    A, B, C = task.groups()
    tokens = noise[rng.integers(0, len(noise), size=(n, T))]
    tokens[:, 0] = CLS_TOKEN
    labels = np.zeros(n, dtype=np.int64)
    slots = np.argsort(rng.random((n, T - 1)), axis=1) + 1  # random distinct positions
    for i in range(n):
        pos = slots[i]
        if task.rule == "presence":
            y = int(rng.integers(2))
            k = int(rng.integers(1, 3))
            tokens[i, pos[:k]] = rng.choice(A if y else B, size=k)
        elif task.rule == "majority":
            k = int(rng.choice([1, 3, 5]))
            n_a = int(rng.integers(0, k + 1))
            y = int(n_a > k - n_a)
            picks = np.concatenate([rng.choice(A, size=n_a), rng.choice(B, size=k - n_a)])
            tokens[i, pos[:k]] = picks
        elif task.rule == "order":
            y = int(rng.integers(2))
            first, second = np.sort(pos[:2])
            tokens[i, first] = rng.choice(A if y else B)
            tokens[i, second] = rng.choice(B if y else A)
        else:  # dominant
            y = int(rng.integers(3))
            top = int(rng.integers(2, 5))
            counts = [int(rng.integers(0, top)) for _ in range(3)]
            counts[y] = top
            groups = (A, B, C)
            picks = np.concatenate([rng.choice(groups[g], size=counts[g]) for g in range(3)])
            tokens[i, pos[: len(picks)]] = picks
        labels[i] = y
    return tokens, labels


def generate(task: SyntheticTask, split: str, n: int) -> Dataset:
    """Deterministic ``n`` examples of ``split`` ('train' or 'eval')."""
    if split not in ("train", "eval"):
        raise ValueError(f"unknown split {split!r}")
    rng = np.random.default_rng([task.seed, 0 if split == "train" else 1])
    toks, labs = [], []
    have = 0
    while have < n:
        t, y = _sample_raw(task, rng, _CHUNK)
        in_eval = _content_hash(t) % EVAL_BUCKETS == 0
        keep = in_eval if split == "eval" else ~in_eval
        toks.append(t[keep])
        labs.append(y[keep])
        have += int(keep.sum())
    return Dataset(np.concatenate(toks)[:n], np.concatenate(labs)[:n], task.task_id)
