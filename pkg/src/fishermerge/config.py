"""Experiment configuration: one JSON file describing model, tasks, training
and protocol. Every key is optional; omitted keys take the defaults below.

.. code-block:: json

    {
      "seed": 0,
      "model": {"n_layers": 2, "n_heads": 4, "d_model": 32, "d_head": 8,
                "d_ff": 64, "vocab_size": 64, "max_seq_len": 16},
      "tasks": {"count": 4, "rules": ["presence", "majority", "order", "dominant"]},
      "training": {"pretrain_steps": 50, "finetune_steps": 600, "lr": 0.1,
                   "batch_size": 32, "train_size": 4096, "eval_size": 512},
      "protocol": {"methods": ["average", "mask-fisher", "full-fisher"],
                   "n_samples": [128, 2048, 32768], "seeds": [0],
                   "fisher_batch_size": 64}
    }

``tasks`` may instead be a list of explicit task objects
``{"id", "rule", "seed", "signal_tokens": [6 ints]}``; explicit seeds are
offset by ``1000 * master_seed``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional

from .fisher import SAMPLE_SWEEP
from .harness import METHODS, TrainSettings, build_config
from .model import ModelConfig
from .tasks import CLS_TOKEN, SyntheticTask, default_tasks

DEFAULT_MODEL = {
    "n_layers": 2,
    "n_heads": 4,
    "d_model": 32,
    "d_head": 8,
    "d_ff": 64,
    "vocab_size": 64,
    "max_seq_len": 16,
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    model: dict = field(default_factory=lambda: dict(DEFAULT_MODEL))
    tasks: object = field(default_factory=lambda: {"count": 4})
    training: TrainSettings = field(default_factory=TrainSettings)
    methods: List[str] = field(default_factory=lambda: list(METHODS))
    n_samples: List[int] = field(default_factory=lambda: list(SAMPLE_SWEEP))
    seeds: List[int] = field(default_factory=lambda: [0])
    fisher_batch_size: int = 64

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {"seed", "model", "tasks", "training", "protocol"}
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        proto = dict(d.get("protocol", {}))
        unknown = set(proto) - {"methods", "n_samples", "seeds", "fisher_batch_size"}
        if unknown:
            raise ValueError(f"unknown protocol keys {sorted(unknown)}")
        model = dict(DEFAULT_MODEL, **d.get("model", {}))
        cfg = cls(
            seed=int(d.get("seed", 0)),
            model=model,
            tasks=d.get("tasks", {"count": 4}),
            training=TrainSettings(**d.get("training", {})),
            methods=list(proto.get("methods", METHODS)),
            n_samples=[int(n) for n in proto.get("n_samples", SAMPLE_SWEEP)],
            seeds=[int(s) for s in proto.get("seeds", [d.get("seed", 0)])],
            fisher_batch_size=int(proto.get("fisher_batch_size", 64)),
        )
        bad = set(cfg.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "model": self.model,
            "tasks": self.tasks,
            "training": asdict(self.training),
            "protocol": {
                "methods": self.methods,
                "n_samples": self.n_samples,
                "seeds": self.seeds,
                "fisher_batch_size": self.fisher_batch_size,
            },
        }

    def build_tasks(self, seed: Optional[int] = None) -> List[SyntheticTask]:
        seed = self.seed if seed is None else seed
        vocab, seq = self.model["vocab_size"], self.model["max_seq_len"]
        if isinstance(self.tasks, dict):
            return default_tasks(int(self.tasks.get("count", 4)), vocab, seq, base_seed=seed, rules=self.tasks.get("rules"))
        claimed = {CLS_TOKEN}
        for t in self.tasks:
            claimed.update(t["signal_tokens"])
        noise = tuple(i for i in range(vocab) if i not in claimed)
        return [
            SyntheticTask(str(t["id"]), t["rule"], int(t.get("seed", i)) + 1000 * seed, seq, tuple(t["signal_tokens"]), noise)
            for i, t in enumerate(self.tasks)
        ]

    def model_config(self, tasks) -> ModelConfig:
        return build_config(self.model, tasks)
