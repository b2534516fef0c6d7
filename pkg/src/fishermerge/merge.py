"""Fisher-weighted parameter averaging of sibling checkpoints.

``theta* = sum_j lambda_j F_j theta_j / sum_j lambda_j F_j`` elementwise, with
``F_j`` either mapped from mask-node Fisher values (:func:`assign_weights`) or
taken from the full per-parameter Fisher. Task heads are never averaged: the
merged model carries each task's head from the model fine-tuned on it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .fisher import FullFisher, MaskFisher
from .model import Checkpoint, ModelConfig, head_param, is_head, param_shapes


class MergeError(ValueError):
    pass


@dataclass
class MappingFlags:
    """Which parameters inherit a mask node's Fisher value.

    Defaults: a head's query/key weights and biases get that head's value;
    row r of W_mlp1 and b_mlp1[r] get filter r's value. Value slices, W_o
    columns and W_mlp2 columns stay at 1 unless switched on.
    """

    qk_bias: bool = True
    value: bool = False
    out_columns: bool = False
    mlp2_columns: bool = False


@dataclass
class FisherWeights:
    weights: Dict[str, np.ndarray]
    digest: Optional[str] = None
    flags: Optional[MappingFlags] = None


@dataclass
class MergeSpec:
    lambdas: Optional[List[float]] = None
    zero_denominator: str = "fallback"  # or "epsilon"
    epsilon: float = 1e-12

    def resolved_lambdas(self, m: int) -> List[float]:
        lambdas = [1.0] * m if self.lambdas is None else [float(x) for x in self.lambdas]
        if len(lambdas) != m:
            raise MergeError(f"{len(lambdas)} lambdas for {m} models")
        if any(not x > 0 for x in lambdas):
            raise MergeError("lambdas must be positive")
        if self.zero_denominator not in ("fallback", "epsilon"):
            raise MergeError(f"unknown zero_denominator policy {self.zero_denominator!r}")
        if self.zero_denominator == "epsilon" and not self.epsilon > 0:
            raise MergeError("epsilon policy needs a positive epsilon")
        return lambdas


def assign_weights(config: ModelConfig, mf: MaskFisher, flags: Optional[MappingFlags] = None) -> FisherWeights:
    flags = flags or MappingFlags()
    H, L, D = config.n_heads, config.n_layers, config.d_ff
    dh = config.d_head
    if mf.f_mha.shape != (H, L) or mf.f_mlp.shape != (D, L):
        raise MergeError(f"mask Fisher shapes {mf.f_mha.shape}, {mf.f_mlp.shape} do not match config")
    w = {name: np.ones(shape) for name, shape in param_shapes(config).items()}
    head_parts = ["q", "k"] + (["v"] if flags.value else [])
    for l in range(L):
        p = f"layers.{l}."
        for h in range(H):
            f = mf.f_mha[h, l]
            for part in head_parts:
                w[f"{p}attn.{h}.W_{part}"][:] = f
                if flags.qk_bias or part == "v":
                    w[f"{p}attn.{h}.b_{part}"][:] = f
            if flags.out_columns:
                w[p + "attn.W_o"][:, h * dh : (h + 1) * dh] = f
        f_rows = mf.f_mlp[:, l]
        w[p + "mlp1.W"][:] = f_rows[:, None]
        w[p + "mlp1.b"][:] = f_rows
        if flags.mlp2_columns:
            w[p + "mlp2.W"][:] = f_rows[None, :]
    return FisherWeights(w, mf.digest, flags)


def _check_siblings(ckpts: Sequence[Checkpoint]) -> None:
    if len(ckpts) < 2:
        raise MergeError("need at least two checkpoints to merge")
    first = ckpts[0]
    for c in ckpts[1:]:
        if not first.is_sibling(c):
            raise MergeError("checkpoints are not siblings (config or parameter names differ)")


def _check_digests(ckpts, digests) -> None:
    if len(digests) != len(ckpts):
        raise MergeError(f"{len(digests)} weight sets for {len(ckpts)} checkpoints")
    for j, (c, d) in enumerate(zip(ckpts, digests)):
        if d is not None and d != c.digest():
            raise MergeError(f"Fisher weights #{j} were not computed on checkpoint #{j} (digest mismatch)")


def _finalize(value: np.ndarray, thetas: List[np.ndarray]) -> np.ndarray:
    # weighted means of equal values are those values; never leave the hull
    lo = hi = thetas[0]
    same = np.ones(thetas[0].shape, dtype=bool)
    for t in thetas[1:]:
        lo = np.minimum(lo, t)
        hi = np.maximum(hi, t)
        same &= t == thetas[0]
    out = np.clip(value, lo, hi)
    return np.where(same, thetas[0], out)


def _plain_mean(thetas: List[np.ndarray]) -> np.ndarray:
    acc = np.zeros_like(thetas[0])
    for t in thetas:
        acc = acc + t
    return acc / len(thetas)


def _head_owners(ckpts: Sequence[Checkpoint]) -> Dict[str, int]:
    owners = {}
    for task in ckpts[0].config.n_classes:
        owners[task] = next((j for j, c in enumerate(ckpts) if c.task == task), 0)
    return owners


def _assemble(ckpts, encoder: Dict[str, np.ndarray], provenance: dict) -> Checkpoint:
    owners = _head_owners(ckpts)
    params = {}
    for name in ckpts[0].params:
        if is_head(name):
            task = name.split(".")[1]
            params[name] = ckpts[owners[task]].params[name].copy()
        else:
            params[name] = encoder[name]
    provenance = dict(provenance, inputs=[c.digest() for c in ckpts], head_owners=owners)
    return Checkpoint(ckpts[0].config, params, task=None, meta={"provenance": provenance})


def _weighted_merge(ckpts, weight_maps, spec: MergeSpec, method: str, flags=None) -> Checkpoint:
    lambdas = spec.resolved_lambdas(len(ckpts))
    encoder = {}
    for name in ckpts[0].encoder_names():
        thetas = [c.params[name] for c in ckpts]
        Fs = []
        for j, wm in enumerate(weight_maps):
            F = np.asarray(wm[name], dtype=np.float64)
            if F.shape != thetas[0].shape:
                raise MergeError(f"weights for {name} have shape {F.shape}, expected {thetas[0].shape}")
            if np.any(F < 0) or not np.all(np.isfinite(F)):
                raise MergeError(f"weights for {name} must be finite and non-negative")
            if spec.zero_denominator == "epsilon":
                F = np.maximum(F, spec.epsilon)
            Fs.append(F)
        num = np.zeros_like(thetas[0])
        den = np.zeros_like(thetas[0])
        for lam, F, t in zip(lambdas, Fs, thetas):
            num = num + lam * F * t
            den = den + lam * F
        ok = den > 0
        value = np.divide(num, den, out=np.zeros_like(num), where=ok)
        if not np.all(ok):
            value = np.where(ok, value, _plain_mean(thetas))
        encoder[name] = _finalize(value, thetas)
    provenance = {
        "method": method,
        "spec": {"lambdas": lambdas, "zero_denominator": spec.zero_denominator, "epsilon": spec.epsilon},
        "flags": asdict(flags) if flags is not None else {},
    }
    return _assemble(ckpts, encoder, provenance)


def merge(ckpts: Sequence[Checkpoint], ws: Sequence[FisherWeights], spec: Optional[MergeSpec] = None) -> Checkpoint:
    """Mask-Fisher merge: Fisher-weighted average with mapped weights."""
    spec = spec or MergeSpec()
    _check_siblings(ckpts)
    _check_digests(ckpts, [w.digest for w in ws])
    flags = next((w.flags for w in ws if w.flags is not None), None)
    return _weighted_merge(ckpts, [w.weights for w in ws], spec, "mask-fisher", flags)


def full_fisher_merge(ckpts: Sequence[Checkpoint], fishers: Sequence[FullFisher], spec: Optional[MergeSpec] = None) -> Checkpoint:
    spec = spec or MergeSpec()
    _check_siblings(ckpts)
    _check_digests(ckpts, [f.digest for f in fishers])
    return _weighted_merge(ckpts, [f.fisher for f in fishers], spec, "full-fisher")


def simple_average(ckpts: Sequence[Checkpoint]) -> Checkpoint:
    _check_siblings(ckpts)
    encoder = {}
    for name in ckpts[0].encoder_names():
        thetas = [c.params[name] for c in ckpts]
        encoder[name] = _finalize(_plain_mean(thetas), thetas)
    return _assemble(ckpts, encoder, {"method": "average"})
