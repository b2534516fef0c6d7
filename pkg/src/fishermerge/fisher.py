"""Diagonal empirical Fisher over a sample of training examples.

Two estimators: one over the (H + D) x L mask nodes, and the full
per-parameter baseline. Both square per-example gradients and accumulate them
sequentially in example order before dividing by n, so results are bit-stable
for a given input order however the gradients themselves were scheduled.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional

import numpy as np

from . import container
from .grad import mask_grads_batch, param_grad
from .model import Checkpoint, Example, ModelConfig, param_shapes

SAMPLE_SWEEP = (128, 2048, 32768)

MASK_KIND = "mask-fisher"
FULL_KIND = "full-fisher"


class FisherError(ValueError):
    pass


@dataclass
class MaskFisher:
    f_mha: np.ndarray  # (H, L)
    f_mlp: np.ndarray  # (D, L)
    n_samples: int
    task_id: str
    digest: Optional[str] = None  # digest of the checkpoint it was estimated on

    def n_entries(self) -> int:
        return int(self.f_mha.size + self.f_mlp.size)

    def save(self, path, force: bool = False) -> None:
        container.write(path, MASK_KIND, self._meta(), {"f_mha": self.f_mha, "f_mlp": self.f_mlp}, force=force)

    def _meta(self) -> dict:
        return {"task_id": self.task_id, "n_samples": self.n_samples, "checkpoint_digest": self.digest}

    @classmethod
    def load(cls, path) -> "MaskFisher":
        kind, meta, t = container.read(path)
        if kind != MASK_KIND:
            raise FisherError(f"expected {MASK_KIND!r}, got {kind!r}")
        return cls(t["f_mha"], t["f_mlp"], meta["n_samples"], meta["task_id"], meta["checkpoint_digest"])


@dataclass
class FullFisher:
    fisher: Dict[str, np.ndarray]
    n_samples: int
    task_id: str
    digest: Optional[str] = None

    def n_entries(self) -> int:
        return sum(int(v.size) for v in self.fisher.values())

    def save(self, path, force: bool = False) -> None:
        meta = {"task_id": self.task_id, "n_samples": self.n_samples, "checkpoint_digest": self.digest}
        container.write(path, FULL_KIND, meta, self.fisher, force=force)

    @classmethod
    def load(cls, path) -> "FullFisher":
        kind, meta, t = container.read(path)
        if kind != FULL_KIND:
            raise FisherError(f"expected {FULL_KIND!r}, got {kind!r}")
        return cls(t, meta["n_samples"], meta["task_id"], meta["checkpoint_digest"])


def load_fisher(path):
    kind, _, _ = container.read(path)
    return MaskFisher.load(path) if kind == MASK_KIND else FullFisher.load(path)


def _take(data: Iterable[Example], n: int) -> List[Example]:
    if n < 1:
        raise FisherError("n must be >= 1")
    sample = list(itertools.islice(iter(data), n))
    if not sample:
        raise FisherError("no examples provided")
    if len(sample) < n:
        raise FisherError(f"needed {n} examples, data yielded only {len(sample)}")
    tasks = {ex.task_id for ex in sample}
    if len(tasks) != 1:
        raise FisherError(f"examples mix task ids {sorted(tasks)}")
    return sample


def _map(fn, items, threads: int) -> list:
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))  # input order preserved


def estimate_mask_fisher(
    ckpt: Checkpoint,
    data: Iterable[Example],
    n: int,
    batch_size: int = 1,
    threads: int = 1,
) -> MaskFisher:
    """Mean of squared per-example mask gradients over the first ``n`` examples.

    ``batch_size`` only groups forward/backward passes; each example still
    contributes its own squared gradient.
    """
    sample = _take(data, n)
    task = sample[0].task_id
    tokens = np.array([ex.tokens for ex in sample])
    labels = np.array([ex.label for ex in sample])
    cfg = ckpt.config
    chunks = [slice(i, i + batch_size) for i in range(0, n, batch_size)]

    def run(sl):
        return mask_grads_batch(ckpt, tokens[sl], labels[sl], task)

    acc_mha = np.zeros((cfg.n_heads, cfg.n_layers))
    acc_mlp = np.zeros((cfg.d_ff, cfg.n_layers))
    for g_mha, g_mlp in _map(run, chunks, threads):
        for i in range(len(g_mha)):
            acc_mha += g_mha[i] * g_mha[i]
            acc_mlp += g_mlp[i] * g_mlp[i]
    return MaskFisher(acc_mha / n, acc_mlp / n, n, task, ckpt.digest())


def estimate_full_fisher(ckpt: Checkpoint, data: Iterable[Example], n: int, threads: int = 1) -> FullFisher:
    """Mean of squared per-example parameter gradients over the first ``n`` examples."""
    sample = _take(data, n)
    acc = {name: np.zeros_like(v) for name, v in ckpt.params.items()}
    step = max(threads, 1) * 16
    for start in range(0, n, step):
        for pg in _map(lambda ex: param_grad(ckpt, ex), sample[start : start + step], threads):
            for name, g in pg.grads.items():
                acc[name] += g * g
    return FullFisher({k: v / n for k, v in acc.items()}, n, sample[0].task_id, ckpt.digest())


def count_gradient_params(config: ModelConfig, method: str) -> int:
    """Number of scalars whose gradient each estimator needs."""
    if method == "mask":
        return (config.n_heads + config.d_ff) * config.n_layers
    if method == "full":
        return sum(int(np.prod(s)) for s in param_shapes(config).values())
    raise ValueError(f"unknown method {method!r}; expected 'mask' or 'full'")
