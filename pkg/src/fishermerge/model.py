"""Pre-LN BERT-style encoder with constant-1 mask nodes on every attention
head output and every feed-forward filter.

Per layer ``l`` (rows of ``X`` are token positions)::

    Z = LN(X)
    Y_h = softmax((Z Wq_h' + bq_h)(Z Wk_h' + bk_h)' / sqrt(d_head)) (Z Wv_h' + bv_h)
    X <- X + concat_h(m_mha[h, l] * Y_h) Wo' + bo
    Z = LN(X)
    X <- X + GELU(m_mlp[:, l] * (Z W1') + b1) W2' + b2

followed by a final LN and a per-task linear head on position 0.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import container
from .tensor import LN_EPS, check_finite, gelu, layer_norm, log_softmax

# Frozen architectural choices, written into every checkpoint manifest.
ARCHITECTURE = {
    "activation": "gelu-erf",
    "layer_norm_eps": LN_EPS,
    "layer_norm_placement": "pre",
    "final_layer_norm": True,
    "attention_scale": "1/sqrt(d_head)",
    "classifier_input": "position-0",
    "mlp_mask": "scales W_mlp1 x, before b_mlp1",
    "mha_mask": "per-head scalar on Y_h, before W_o",
}

CHECKPOINT_KIND = "checkpoint"


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_head: int
    d_ff: int
    vocab_size: int
    max_seq_len: int
    n_classes: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.n_layers < 1 or self.n_heads < 1 or self.d_ff < 1 or self.d_head < 1:
            raise ValueError("n_layers, n_heads, d_head and d_ff must be >= 1")
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError(f"d_model={self.d_model} != n_heads*d_head={self.n_heads * self.d_head}")
        if self.vocab_size < 1 or self.max_seq_len < 1:
            raise ValueError("vocab_size and max_seq_len must be >= 1")
        for task, c in self.n_classes.items():
            if c < 2:
                raise ValueError(f"task {task!r} needs at least 2 classes")

    # short symbol aliases
    @property
    def L(self) -> int:
        return self.n_layers

    @property
    def H(self) -> int:
        return self.n_heads

    @property
    def D(self) -> int:
        return self.d_ff

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["n_classes"] = dict(self.n_classes)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        d["n_classes"] = {str(k): int(v) for k, v in d.get("n_classes", {}).items()}
        return cls(**d)


def head_param(task_id: str, part: str) -> str:
    return f"heads.{task_id}.{part}"


def is_head(name: str) -> bool:
    return name.startswith("heads.")


def param_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Ordered name -> shape table for every parameter of ``config``."""
    d, dh, D = config.d_model, config.d_head, config.d_ff
    shapes = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_seq_len, d),
    }
    for l in range(config.n_layers):
        p = f"layers.{l}."
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        for h in range(config.n_heads):
            for part in ("q", "k", "v"):
                shapes[f"{p}attn.{h}.W_{part}"] = (dh, d)
                shapes[f"{p}attn.{h}.b_{part}"] = (dh,)
        shapes[p + "attn.W_o"] = (d, config.n_heads * dh)
        shapes[p + "attn.b_o"] = (d,)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
        shapes[p + "mlp1.W"] = (D, d)
        shapes[p + "mlp1.b"] = (D,)
        shapes[p + "mlp2.W"] = (d, D)
        shapes[p + "mlp2.b"] = (d,)
    shapes["ln_f.gain"] = (d,)
    shapes["ln_f.bias"] = (d,)
    for task, c in config.n_classes.items():
        shapes[head_param(task, "W")] = (c, d)
        shapes[head_param(task, "b")] = (c,)
    return shapes


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    """Architecture plus an ordered parameter map.

    Task heads live in ``params`` under ``heads.<task>.W`` / ``heads.<task>.b``.
    ``task`` names the task this model was fine-tuned on, if any; merges use it
    to decide whose head each task gets.
    """

    config: ModelConfig
    params: Dict[str, np.ndarray]
    task: Optional[str] = None
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.config)
        if list(self.params) != list(expected):
            missing = set(expected) - set(self.params)
            extra = set(self.params) - set(expected)
            if missing or extra:
                raise CheckpointError(f"parameter names differ from config (missing={sorted(missing)[:3]}, extra={sorted(extra)[:3]})")
            self.params = {k: self.params[k] for k in expected}
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise CheckpointError(f"{name}: shape {self.params[name].shape} != {shape}")
        if self.task is not None and self.task not in self.config.n_classes:
            raise CheckpointError(f"unknown task {self.task!r}")

    @property
    def heads(self) -> Dict[str, Dict[str, np.ndarray]]:
        return {t: {"W": self.params[head_param(t, "W")], "b": self.params[head_param(t, "b")]} for t in self.config.n_classes}

    def encoder_names(self) -> List[str]:
        return [n for n in self.params if not is_head(n)]

    def n_elements(self) -> int:
        return sum(int(v.size) for v in self.params.values())

    def is_sibling(self, other: "Checkpoint") -> bool:
        return self.config == other.config and list(self.params) == list(other.params)

    def digest(self) -> str:
        header = {"config": self.config.to_dict(), "architecture": ARCHITECTURE}
        return container.tensors_digest(header, self.params)

    def encoder_digest(self) -> str:
        header = {"config": self.config.to_dict(), "architecture": ARCHITECTURE}
        return container.tensors_digest(header, {n: self.params[n] for n in self.encoder_names()})

    def copy(self, **changes) -> "Checkpoint":
        params = {k: v.copy() for k, v in self.params.items()}
        kw = {"config": self.config, "params": params, "task": self.task, "meta": json.loads(json.dumps(self.meta))}
        kw.update(changes)
        return Checkpoint(**kw)

    def manifest_meta(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "architecture": ARCHITECTURE,
            "task": self.task,
            "digest": self.digest(),
            **({"provenance": self.meta["provenance"]} if "provenance" in self.meta else {}),
            **({k: v for k, v in self.meta.items() if k != "provenance"}),
        }

    def to_bytes(self) -> bytes:
        return container.encode(CHECKPOINT_KIND, self.manifest_meta(), self.params)

    def save(self, path, force: bool = False) -> None:
        container.write(path, CHECKPOINT_KIND, self.manifest_meta(), self.params, force=force)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        kind, meta, tensors = container.decode(buf)
        return cls._from_parts(kind, meta, tensors)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        kind, meta, tensors = container.read(path)
        return cls._from_parts(kind, meta, tensors)

    @classmethod
    def _from_parts(cls, kind, meta, tensors) -> "Checkpoint":
        if kind != CHECKPOINT_KIND:
            raise CheckpointError(f"expected a checkpoint, got kind {kind!r}")
        if meta.get("architecture") != ARCHITECTURE:
            raise CheckpointError("checkpoint was written for a different architecture definition")
        extra = {k: v for k, v in meta.items() if k not in ("config", "architecture", "task", "digest")}
        ckpt = cls(ModelConfig.from_dict(meta["config"]), tensors, task=meta.get("task"), meta=extra)
        if ckpt.digest() != meta.get("digest"):
            raise CheckpointError("checkpoint digest does not match its contents")
        return ckpt


@dataclass
class MaskSet:
    """Mask nodes: ``m_mha`` is H x L, ``m_mlp`` is D x L. Always ones outside tests."""

    m_mha: np.ndarray
    m_mlp: np.ndarray

    @classmethod
    def ones(cls, config: ModelConfig) -> "MaskSet":
        return cls(np.ones((config.n_heads, config.n_layers)), np.ones((config.d_ff, config.n_layers)))

    def check(self, config: ModelConfig) -> None:
        if self.m_mha.shape != (config.n_heads, config.n_layers) or self.m_mlp.shape != (config.d_ff, config.n_layers):
            raise ValueError(f"mask shapes {self.m_mha.shape}, {self.m_mlp.shape} do not match config")


@dataclass(frozen=True)
class Example:
    tokens: Tuple[int, ...]
    label: int
    task_id: str

    def to_json(self) -> dict:
        return {"tokens": [int(t) for t in self.tokens], "label": int(self.label), "task_id": self.task_id}

    @classmethod
    def from_json(cls, d: Mapping) -> "Example":
        return cls(tuple(int(t) for t in d["tokens"]), int(d["label"]), str(d["task_id"]))


def init_checkpoint(config: ModelConfig, rng: np.random.Generator) -> Checkpoint:
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            params[name] = np.ones(shape)
        elif name.endswith((".bias", ".b", ".b_q", ".b_k", ".b_v", ".b_o")):
            params[name] = np.zeros(shape)
        elif name in ("tok_emb", "pos_emb"):
            params[name] = rng.normal(0.0, 1.0, size=shape)
        else:
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[1]), size=shape)
    return Checkpoint(config, params)


def fused_qkv(params: Mapping[str, np.ndarray], layer: int, n_heads: int):
    """Concatenate the per-head q, k, v slices of one layer.

    Row blocks are ordered (q heads 0..H-1, k heads, v heads), giving
    W of shape (3*H*d_head, d_model) and b of shape (3*H*d_head,).
    """
    p = f"layers.{layer}.attn."
    names = [f"{p}{h}.{{}}_{part}" for part in ("q", "k", "v") for h in range(n_heads)]
    W = np.concatenate([params[n.format("W")] for n in names])
    b = np.concatenate([params[n.format("b")] for n in names])
    return W, b


def validate_tokens(config: ModelConfig, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] < 1:
        raise ValueError(f"tokens must be a non-empty (batch, seq) array, got shape {tokens.shape}")
    if tokens.shape[1] > config.max_seq_len:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_seq_len={config.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ValueError("token id out of range")
    return tokens.astype(np.int64)


def forward_batch(ckpt: Checkpoint, tokens, task_id: str, masks: Optional[MaskSet] = None):
    """Run a batch of equal-length sequences for one task.

    Returns ``(logits, record)`` where ``logits`` is (B, n_classes) and
    ``record`` keeps the activations the backward pass consumes.
    """
    cfg = ckpt.config
    if task_id not in cfg.n_classes:
        raise ValueError(f"checkpoint has no head for task {task_id!r}")
    masks = masks if masks is not None else MaskSet.ones(cfg)
    masks.check(cfg)
    tokens = validate_tokens(cfg, tokens)
    P = ckpt.params
    B, T = tokens.shape
    H, dh = cfg.n_heads, cfg.d_head
    scale = 1.0 / np.sqrt(dh)

    X = P["tok_emb"][tokens] + P["pos_emb"][:T]
    layers = []
    for l in range(cfg.n_layers):
        pre = f"layers.{l}."
        rec = {}
        Z, rec["xhat1"], rec["rstd1"] = layer_norm(X, P[pre + "ln1.gain"], P[pre + "ln1.bias"])
        rec["Z1"] = Z
        W_qkv, b_qkv = fused_qkv(P, l, H)
        QKV = Z @ W_qkv.T + b_qkv  # (B, T, 3*H*dh)
        q, k, v = (QKV[..., i * H * dh : (i + 1) * H * dh].reshape(B, T, H, dh).transpose(0, 2, 1, 3) for i in range(3))
        rec["q"], rec["k"], rec["v"] = q, k, v
        S = np.matmul(rec["q"], rec["k"].transpose(0, 1, 3, 2)) * scale
        S = S - S.max(axis=-1, keepdims=True)
        E = np.exp(S)
        Pm = E / E.sum(axis=-1, keepdims=True)
        rec["P"] = Pm
        Yh = np.matmul(Pm, rec["v"])  # (B, H, T, dh)
        rec["Y"] = Yh
        Ym = Yh * masks.m_mha[:, l][None, :, None, None]
        Ycat = Ym.transpose(0, 2, 1, 3).reshape(B, T, H * dh)
        rec["Ycat"] = Ycat
        X = X + Ycat @ P[pre + "attn.W_o"].T + P[pre + "attn.b_o"]

        Z2, rec["xhat2"], rec["rstd2"] = layer_norm(X, P[pre + "ln2.gain"], P[pre + "ln2.bias"])
        rec["Z2"] = Z2
        U = Z2 @ P[pre + "mlp1.W"].T  # (B, T, D)
        rec["U"] = U
        A = U * masks.m_mlp[:, l] + P[pre + "mlp1.b"]
        rec["A"] = A
        G = gelu(A)
        rec["G"] = G
        X = X + G @ P[pre + "mlp2.W"].T + P[pre + "mlp2.b"]
        layers.append(rec)

    Zf, xhatf, rstdf = layer_norm(X, P["ln_f.gain"], P["ln_f.bias"])
    cls = Zf[:, 0]
    logits = cls @ P[head_param(task_id, "W")].T + P[head_param(task_id, "b")]
    check_finite(logits, "logits")
    record = {
        "tokens": tokens,
        "task_id": task_id,
        "masks": masks,
        "layers": layers,
        "xhatf": xhatf,
        "rstdf": rstdf,
        "cls": cls,
    }
    return logits, record


def forward(ckpt: Checkpoint, masks: Optional[MaskSet], example: Example):
    """Single-example forward; returns ``(logits, record)`` with logits of shape (n_classes,)."""
    n_cls = ckpt.config.n_classes.get(example.task_id)
    if n_cls is not None and not 0 <= example.label < n_cls:
        raise ValueError(f"label {example.label} out of range for task {example.task_id!r}")
    logits, record = forward_batch(ckpt, np.asarray(example.tokens)[None, :], example.task_id, masks)
    return logits[0], record


def loss(logits: np.ndarray, label: int) -> float:
    """Cross-entropy of one example: -log softmax(logits)[label]."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise ValueError(f"label {label} out of range for {logits.shape[-1]} classes")
    return float(-log_softmax(logits)[..., label])


def batch_losses(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return -log_softmax(logits)[np.arange(len(labels)), labels]


def predict(ckpt: Checkpoint, tokens: np.ndarray, task_id: str, batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(tokens), batch_size):
        logits, _ = forward_batch(ckpt, tokens[i : i + batch_size], task_id)
        out.append(np.argmax(logits, axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
