"""Desk-scale merging experiment.

A parent encoder is pretrained briefly on a mixture of all tasks, one child
is fine-tuned per task with plain SGD, and every unordered pair of children
is merged with each method and scored on both tasks with the task's own head.
Scores are normalized against the child fine-tuned on that task and
aggregated by the median.
"""

from __future__ import annotations

import itertools
import json
import statistics
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .fisher import estimate_full_fisher, estimate_mask_fisher
from .grad import batch_loss_and_grad
from .merge import MergeSpec, assign_weights, full_fisher_merge, merge, simple_average
from .model import Checkpoint, ModelConfig, head_param, init_checkpoint, predict
from .tasks import Dataset, SyntheticTask, generate

METHODS = ("average", "mask-fisher", "full-fisher")


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainSettings:
    pretrain_steps: int = 50
    finetune_steps: int = 600
    lr: float = 0.1
    batch_size: int = 32
    train_size: int = 4096
    eval_size: int = 512


def sgd_steps(ckpt: Checkpoint, data: Sequence[Dataset], steps: int, settings: TrainSettings,
              rng: np.random.Generator) -> Checkpoint:
    """Plain fixed-step SGD, cycling round-robin through ``data`` one batch at a time."""
    ckpt = ckpt.copy()
    orders = [rng.permutation(len(d)) for d in data]
    cursors = [0] * len(data)
    bs = settings.batch_size
    for step in range(steps):
        k = step % len(data)
        d = data[k]
        if cursors[k] + bs > len(d):
            orders[k] = rng.permutation(len(d))
            cursors[k] = 0
        idx = orders[k][cursors[k] : cursors[k] + bs]
        cursors[k] += bs
        loss, grads = batch_loss_and_grad(ckpt, d.tokens[idx], d.labels[idx], d.task_id)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}")
        for name, g in grads.items():
            ckpt.params[name] -= settings.lr * g
    return ckpt


def build_config(model: dict, tasks: Sequence[SyntheticTask]) -> ModelConfig:
    return ModelConfig(**model, n_classes={t.task_id: t.n_classes for t in tasks})


def train_split(task: SyntheticTask, settings: TrainSettings, min_size: int = 0) -> Dataset:
    return generate(task, "train", max(settings.train_size, min_size))


def pretrain_parent(config: ModelConfig, tasks: Sequence[SyntheticTask], seed: int,
                    settings: Optional[TrainSettings] = None) -> Checkpoint:
    """Random init followed by a short round-robin pass over every task's data."""
    settings = settings or TrainSettings()
    rng = np.random.default_rng([seed, 0])
    parent = init_checkpoint(config, rng)
    data = [train_split(t, settings) for t in tasks]
    return sgd_steps(parent, data, settings.pretrain_steps, settings, rng)


def finetune(parent: Checkpoint, task: SyntheticTask, steps: int, seed: int,
             settings: Optional[TrainSettings] = None) -> Checkpoint:
    settings = settings or TrainSettings()
    if steps == 0:
        return parent.copy(task=task.task_id)
    rng = np.random.default_rng([seed, 1, int(task.seed)])
    child = sgd_steps(parent, [train_split(task, settings)], steps, settings, rng)
    child.task = task.task_id
    return child


def evaluate(ckpt: Checkpoint, task: SyntheticTask, head: Optional[str] = None,
             eval_size: int = 512) -> float:
    """Accuracy on the task's held-out split, read through ``head`` (default: the task's own)."""
    head = head or task.task_id
    if head_param(head, "W") not in ckpt.params:
        raise KeyError(f"checkpoint has no head {head!r}")
    data = generate(task, "eval", eval_size)
    pred = predict(ckpt, data.tokens, head)
    return float(np.mean(pred == data.labels))


def median(values: Sequence[float]) -> float:
    return float(statistics.median(values))


@dataclass
class EvalReport:
    seed: int
    tasks: List[str]
    methods: List[str]
    n_samples: List[int]
    parent_accuracy: Dict[str, float]
    finetuned_accuracy: Dict[str, float]
    records: List[dict] = field(default_factory=list)
    fisher_seconds: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def scores(self, method: str, n: Optional[int]) -> List[float]:
        out = []
        for r in self.records:
            if r["method"] == method and r["n_samples"] == n:
                out.extend(r["scores"][t]["normalized"] for t in r["pair"])
        return out

    def aggregate(self) -> Dict[str, Dict[str, float]]:
        """Median normalized score per method and sample count ("-" for averaging)."""
        agg = {}
        for method in self.methods:
            ns = [None] if method == "average" else self.n_samples
            agg[method] = {_nkey(n): median(self.scores(method, n)) for n in ns}
        return agg

    def deltas(self) -> Dict[str, Dict[str, float]]:
        """Aggregate score minus the averaging aggregate, per Fisher method and n."""
        agg = self.aggregate()
        if "average" not in agg:
            return {}
        base = agg["average"]["-"]
        return {m: {k: v - base for k, v in row.items()} for m, row in agg.items() if m != "average"}

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "seed": self.seed,
            "tasks": self.tasks,
            "methods": self.methods,
            "n_samples": self.n_samples,
            "parent_accuracy": self.parent_accuracy,
            "finetuned_accuracy": self.finetuned_accuracy,
            "records": self.records,
            "aggregate": self.aggregate(),
            "delta_vs_average": self.deltas(),
        }
        if include_timing:
            d["fisher_seconds"] = self.fisher_seconds
        return d

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)


def _nkey(n: Optional[int]) -> str:
    return "-" if n is None else str(n)


def run_pairwise_protocol(
    parent: Checkpoint,
    tasks: Sequence[SyntheticTask],
    methods: Sequence[str] = METHODS,
    n_samples_list: Sequence[int] = (128,),
    settings: Optional[TrainSettings] = None,
    seed: int = 0,
    fisher_batch_size: int = 64,
    spec: Optional[MergeSpec] = None,
    children: Optional[Dict[str, Checkpoint]] = None,
) -> EvalReport:
    """Fine-tune one child per task, then merge and score every unordered pair."""
    settings = settings or TrainSettings()
    if len(tasks) < 2:
        raise ValueError("need at least two tasks")
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    methods = [m for m in METHODS if m in methods]
    n_list = sorted(set(int(n) for n in n_samples_list))
    by_id = {t.task_id: t for t in tasks}
    if len(by_id) != len(tasks):
        raise ValueError("task ids must be unique")

    children = dict(children or {})
    for t in tasks:
        if t.task_id not in children:
            children[t.task_id] = finetune(parent, t, settings.finetune_steps, seed, settings)
    report = EvalReport(
        seed=seed,
        tasks=[t.task_id for t in tasks],
        methods=list(methods),
        n_samples=n_list,
        parent_accuracy={t.task_id: evaluate(parent, t, eval_size=settings.eval_size) for t in tasks},
        finetuned_accuracy={t.task_id: evaluate(children[t.task_id], t, eval_size=settings.eval_size) for t in tasks},
    )

    fisher_data = {}
    if any(m != "average" for m in methods):
        max_n = max(n_list)
        for t in tasks:
            data = train_split(t, settings, max_n)
            fisher_data[t.task_id] = data.shuffled(np.random.default_rng([seed, 2, int(t.seed)]))

    weights_cache, timing = {}, {}

    def fisher_for(method, task_id, n):
        key = (method, task_id, n)
        if key not in weights_cache:
            child = children[task_id]
            start = time.perf_counter()
            if method == "mask-fisher":
                mf = estimate_mask_fisher(child, fisher_data[task_id], n, batch_size=fisher_batch_size)
            else:
                mf = estimate_full_fisher(child, fisher_data[task_id], n)
            timing.setdefault((method, n), []).append(time.perf_counter() - start)
            weights_cache[key] = assign_weights(child.config, mf) if method == "mask-fisher" else mf
        return weights_cache[key]

    for a, b in itertools.combinations([t.task_id for t in tasks], 2):
        pair = [children[a], children[b]]
        for method in methods:
            for n in ([None] if method == "average" else n_list):
                if method == "average":
                    merged = simple_average(pair)
                elif method == "mask-fisher":
                    merged = merge(pair, [fisher_for(method, a, n), fisher_for(method, b, n)], spec)
                else:
                    merged = full_fisher_merge(pair, [fisher_for(method, a, n), fisher_for(method, b, n)], spec)
                scores = {}
                for tid in (a, b):
                    raw = evaluate(merged, by_id[tid], eval_size=settings.eval_size)
                    ft = report.finetuned_accuracy[tid]
                    scores[tid] = {"raw": raw, "finetuned": ft, "normalized": normalize(raw, ft)}
                report.records.append({"pair": [a, b], "method": method, "n_samples": n, "scores": scores})

    report.fisher_seconds = {
        m: {str(n): float(np.mean(v)) for (mm, n), v in sorted(timing.items()) if mm == m}
        for m in methods if m != "average"
    }
    return report


def normalize(raw: float, finetuned: float) -> float:
    """Merged accuracy as a percentage of the fine-tuned model's accuracy."""
    if finetuned <= 0:
        raise ValueError("fine-tuned accuracy must be positive to normalize against")
    return 100.0 * raw / finetuned


def format_table(reports: Sequence[EvalReport], label: str = "seed") -> str:
    """Methods x sample counts, Fisher cells annotated with the delta against averaging."""
    if not reports:
        return ""
    methods = reports[0].methods
    n_list = reports[0].n_samples
    cols = []
    for m in methods:
        for n in ([None] if m == "average" else n_list):
            cols.append((m, _nkey(n)))
    head1 = f"{'':<12}" + "".join(f"{m if n in ('-', _nkey(n_list[0])) else '':>16}" for m, n in cols)
    head2 = f"{'n samples':<12}" + "".join(f"{n:>16}" for _, n in cols)
    lines = [head1, head2, "-" * len(head2)]

    def row(name, agg):
        base = agg.get("average", {}).get("-")
        cells = []
        for m, n in cols:
            v = agg[m][n]
            if m == "average" or base is None:
                cells.append(f"{v:>16.1f}")
            else:
                cells.append(f"{v:>8.1f} ({v - base:+5.1f})")
        return f"{name:<12}" + "".join(cells)

    aggs = [r.aggregate() for r in reports]
    for r, agg in zip(reports, aggs):
        lines.append(row(f"{label} {r.seed}", agg))
    if len(reports) > 1:
        mean_agg = {m: {n: float(np.mean([a[m][n] for a in aggs])) for _, n in cols if _ == m} for m in methods}
        lines.append("-" * len(head2))
        lines.append(row("mean", mean_agg))
    return "\n".join(lines)
