"""Hand-derived reverse pass through the masked encoder.

Mask gradients come out per example even for a batched pass, since each
example's mask gradient is a reduction over that example's own activations.
When only mask gradients are requested no weight gradient is ever formed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .model import Checkpoint, Example, MaskSet, forward, forward_batch, fused_qkv, head_param
from .tensor import check_finite, gelu_grad, layer_norm_backward, softmax


@dataclass
class MaskGradients:
    g_mha: np.ndarray  # (H, L)
    g_mlp: np.ndarray  # (D, L)


@dataclass
class ParamGradients:
    grads: Dict[str, np.ndarray]


def loss_grad_logits(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(cross-entropy)/d(logits) per row."""
    g = softmax(logits, axis=-1)
    g[np.arange(len(labels)), labels] -= 1.0
    return g


def backward(ckpt: Checkpoint, record: dict, dlogits: np.ndarray, want_params: bool = False):
    """Backpropagate ``dlogits`` (B, C) through a recorded forward pass.

    Returns ``(g_mha, g_mlp, grads)``: mask gradients of shape (B, H, L) and
    (B, D, L), and, if ``want_params``, parameter gradients summed over the
    batch (otherwise ``None``).
    """
    cfg = ckpt.config
    P = ckpt.params
    B, T = record["tokens"].shape
    H, dh, L = cfg.n_heads, cfg.d_head, cfg.n_layers
    scale = 1.0 / np.sqrt(dh)
    masks: MaskSet = record["masks"]
    task = record["task_id"]
    grads = None
    if want_params:
        grads = {name: np.zeros_like(v) for name, v in P.items()}

    g_mha = np.zeros((B, H, L))
    g_mlp = np.zeros((B, cfg.d_ff, L))

    W_head = P[head_param(task, "W")]
    dcls = dlogits @ W_head
    if grads is not None:
        grads[head_param(task, "W")] += dlogits.T @ record["cls"]
        grads[head_param(task, "b")] += dlogits.sum(axis=0)
    dZf = np.zeros((B, T, cfg.d_model))
    dZf[:, 0] = dcls
    if grads is not None:
        grads["ln_f.gain"] += (dZf * record["xhatf"]).sum(axis=(0, 1))
        grads["ln_f.bias"] += dZf.sum(axis=(0, 1))
    dX = layer_norm_backward(dZf, record["xhatf"], record["rstdf"], P["ln_f.gain"])

    for l in reversed(range(L)):
        pre = f"layers.{l}."
        rec = record["layers"][l]

        # feed-forward block
        dM = dX
        dG = dM @ P[pre + "mlp2.W"]
        dA = dG * gelu_grad(rec["A"])
        g_mlp[:, :, l] = (dA * rec["U"]).sum(axis=1)
        dU = dA * masks.m_mlp[:, l]
        dZ2 = dU @ P[pre + "mlp1.W"]
        if grads is not None:
            grads[pre + "mlp2.W"] += dM.reshape(B * T, -1).T @ rec["G"].reshape(B * T, -1)
            grads[pre + "mlp2.b"] += dM.sum(axis=(0, 1))
            grads[pre + "mlp1.W"] += dU.reshape(B * T, -1).T @ rec["Z2"].reshape(B * T, -1)
            grads[pre + "mlp1.b"] += dA.sum(axis=(0, 1))
            grads[pre + "ln2.gain"] += (dZ2 * rec["xhat2"]).sum(axis=(0, 1))
            grads[pre + "ln2.bias"] += dZ2.sum(axis=(0, 1))
        dX = dX + layer_norm_backward(dZ2, rec["xhat2"], rec["rstd2"], P[pre + "ln2.gain"])

        # attention block
        dO = dX
        dYcat = dO @ P[pre + "attn.W_o"]
        if grads is not None:
            grads[pre + "attn.W_o"] += dO.reshape(B * T, -1).T @ rec["Ycat"].reshape(B * T, -1)
            grads[pre + "attn.b_o"] += dO.sum(axis=(0, 1))
        dYm = dYcat.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        g_mha[:, :, l] = (dYm * rec["Y"]).sum(axis=(2, 3))
        dY = dYm * masks.m_mha[:, l][None, :, None, None]
        Pm = rec["P"]
        dP = np.matmul(dY, rec["v"].transpose(0, 1, 3, 2))
        dv = np.matmul(Pm.transpose(0, 1, 3, 2), dY)
        dS = Pm * (dP - (dP * Pm).sum(axis=-1, keepdims=True)) * scale
        dq = np.matmul(dS, rec["k"])
        dk = np.matmul(dS.transpose(0, 1, 3, 2), rec["q"])
        dQKV = np.concatenate([d.transpose(0, 2, 1, 3).reshape(B, T, H * dh) for d in (dq, dk, dv)], axis=-1)
        W_qkv, _ = fused_qkv(P, l, H)
        dZ1 = dQKV @ W_qkv
        if grads is not None:
            flat = dQKV.reshape(B * T, -1)
            dW = (flat.T @ rec["Z1"].reshape(B * T, -1)).reshape(3, H, dh, cfg.d_model)
            db = flat.sum(axis=0).reshape(3, H, dh)
            for i, part in enumerate(("q", "k", "v")):
                for h in range(H):
                    grads[f"{pre}attn.{h}.W_{part}"] += dW[i, h]
                    grads[f"{pre}attn.{h}.b_{part}"] += db[i, h]
        if grads is not None:
            grads[pre + "ln1.gain"] += (dZ1 * rec["xhat1"]).sum(axis=(0, 1))
            grads[pre + "ln1.bias"] += dZ1.sum(axis=(0, 1))
        dX = dX + layer_norm_backward(dZ1, rec["xhat1"], rec["rstd1"], P[pre + "ln1.gain"])

    if grads is not None:
        np.add.at(grads["tok_emb"], record["tokens"].reshape(-1), dX.reshape(-1, cfg.d_model))
        grads["pos_emb"][:T] += dX.sum(axis=0)
        for name, g in grads.items():
            check_finite(g, f"gradient of {name}")
    check_finite(g_mha, "head mask gradient")
    check_finite(g_mlp, "filter mask gradient")
    return g_mha, g_mlp, grads


def mask_grad(ckpt: Checkpoint, example: Example, masks: Optional[MaskSet] = None) -> MaskGradients:
    """Gradient of the example's loss with respect to every mask node at m = 1."""
    logits, record = forward(ckpt, masks, example)
    dlogits = loss_grad_logits(logits[None, :], np.array([example.label]))
    g_mha, g_mlp, _ = backward(ckpt, record, dlogits, want_params=False)
    return MaskGradients(g_mha[0], g_mlp[0])


def mask_grads_batch(ckpt: Checkpoint, tokens: np.ndarray, labels: np.ndarray, task_id: str):
    """Per-example mask gradients for a batch: arrays (B, H, L) and (B, D, L)."""
    logits, record = forward_batch(ckpt, tokens, task_id)
    dlogits = loss_grad_logits(logits, np.asarray(labels))
    g_mha, g_mlp, _ = backward(ckpt, record, dlogits, want_params=False)
    return g_mha, g_mlp


def param_grad(ckpt: Checkpoint, example: Example) -> ParamGradients:
    """Gradient of the example's loss with respect to every parameter."""
    logits, record = forward(ckpt, None, example)
    dlogits = loss_grad_logits(logits[None, :], np.array([example.label]))
    _, _, grads = backward(ckpt, record, dlogits, want_params=True)
    return ParamGradients(grads)


def batch_loss_and_grad(ckpt: Checkpoint, tokens: np.ndarray, labels: np.ndarray, task_id: str):
    """Mean cross-entropy over the batch and its parameter gradient (for training)."""
    logits, record = forward_batch(ckpt, tokens, task_id)
    labels = np.asarray(labels)
    dlogits = loss_grad_logits(logits, labels) / len(labels)
    _, _, grads = backward(ckpt, record, dlogits, want_params=True)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    losses = np.log(np.exp(shifted).sum(axis=-1)) - shifted[np.arange(len(labels)), labels]
    return float(losses.mean()), grads
