"""Dense-array substrate: matmul, masked softmax, norms, and the
finite-difference gradient checker used by every loss test.

Arrays are plain contiguous numpy ndarrays (row-major, float32 or float64).
Gradient checks always run in float64 regardless of the engine dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


class FullyMaskedRowError(ValueError):
    """A softmax row had every position masked out."""


class NonFiniteError(FloatingPointError):
    """A computation produced or encountered a non-finite value."""


def as_tensor(x, dtype=None):
    """Coerce to a contiguous row-major ndarray (copies only when needed)."""
    a = np.ascontiguousarray(x, dtype=dtype)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float64)
    return a


def matmul(a, b):
    """Row-major matrix product with explicit shape checking."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def masked_softmax(logits, mask=None):
    """Softmax over the last axis with an additive {0, -inf} mask.

    Masked positions come out exactly 0.  Stability comes from subtracting the
    per-row max over *unmasked* entries only, so -inf never meets -inf.
    """
    logits = np.asarray(logits)
    if mask is not None:
        mask = np.asarray(mask)
        z = np.where(np.isneginf(mask), -np.inf, logits)
        z = np.broadcast_to(z, np.broadcast_shapes(logits.shape, mask.shape)).copy()
    else:
        z = logits.astype(logits.dtype, copy=True)
    row_max = np.max(z, axis=-1, keepdims=True)
    if np.any(np.isneginf(row_max)):
        raise FullyMaskedRowError("softmax row with every position masked")
    out = np.exp(z - row_max)
    out /= out.sum(axis=-1, keepdims=True)
    return out


def layer_norm(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def gelu(x):
    """Exact (erf-based) GELU."""
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def finite_difference_gradient(f, x, eps=1e-5):
    """Central-difference gradient of a scalar function, computed in float64."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f(x))
        flat[i] = orig - eps
        f_minus = float(f(x))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteError(f"non-finite evaluation while perturbing coordinate {i}")
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


@dataclass
class GradCheckReport:
    max_relative_error: float
    per_parameter_errors: list = field(default_factory=list)


def gradient_check(f, analytic_grad, x, eps=1e-5):
    """Compare an analytic gradient against central finite differences.

    Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-6).
    """
    numeric = finite_difference_gradient(f, x, eps=eps)
    analytic = np.asarray(analytic_grad, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise ShapeError(f"gradient shape {analytic.shape} != input shape {numeric.shape}")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    errs = np.abs(analytic - numeric) / denom
    return GradCheckReport(
        max_relative_error=float(errs.max()) if errs.size else 0.0,
        per_parameter_errors=errs.reshape(-1).tolist(),
    )
