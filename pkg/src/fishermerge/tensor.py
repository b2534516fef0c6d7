"""Dense float64 array primitives used by the encoder, the backward pass and
the merge arithmetic.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Every function
here refuses non-finite input or output instead of propagating NaN/Inf.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

DTYPE = np.float64
LN_EPS = 1e-12

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NonFiniteError(FloatingPointError):
    """Raised when a tensor operation sees or produces NaN/Inf."""


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains non-finite values")
    return x


def tensor(data, shape=None) -> np.ndarray:
    """Build a float64 tensor, optionally from flat row-major ``data``."""
    arr = np.array(data, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ValueError(f"shape entries must be positive, got {shape}")
        if arr.size != int(np.prod(shape)):
            raise ValueError(f"{arr.size} values do not fill shape {shape}")
        arr = arr.reshape(shape)
    return check_finite(arr)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.matmul(check_finite(a), check_finite(b))
    return check_finite(out, "matmul result")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"add shape mismatch: {np.shape(a)} vs {np.shape(b)}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.add(a, b)
    return check_finite(out, "add result")


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"mul shape mismatch: {np.shape(a)} vs {np.shape(b)}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.multiply(a, b)
    return check_finite(out, "mul result")


def scale(a: np.ndarray, c: float) -> np.ndarray:
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.multiply(a, float(c))
    return check_finite(out, "scale result")


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax; safe for large logits."""
    check_finite(x, "softmax input")
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    check_finite(x, "log_softmax input")
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, x * Phi(x) with the erf-based normal CDF."""
    check_finite(x, "gelu input")
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LN_EPS):
    """Normalize over the last axis.

    Returns ``(y, xhat, rstd)``; the last two are what the backward pass needs.
    """
    check_finite(x, "layer_norm input")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd


def layer_norm_backward(dy: np.ndarray, xhat: np.ndarray, rstd: np.ndarray, gain: np.ndarray):
    """Gradient w.r.t. the layer-norm input given upstream ``dy``."""
    dxhat = dy * gain
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return rstd * (dxhat - m1 - xhat * m2)


def to_bytes(x: np.ndarray) -> bytes:
    """Little-endian float64, row-major, no padding."""
    return np.ascontiguousarray(x, dtype="<f8").tobytes(order="C")


def from_bytes(buf: bytes, shape) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    arr = np.frombuffer(buf, dtype="<f8")
    if arr.size != int(np.prod(shape)):
        raise ValueError(f"{len(buf)} bytes do not fill shape {shape}")
    return check_finite(arr.astype(DTYPE).reshape(shape))
