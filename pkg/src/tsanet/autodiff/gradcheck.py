"""Central finite-difference oracle for reverse-mode gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import ValidationError
from .tensor import Tensor, no_grad


def numerical_grad(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Per-element central differences of the scalar function ``f`` at ``x``."""
    out = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    grad_flat = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = float(f(x).data)
            flat[i] = orig - eps
            minus = float(f(x).data)
            flat[i] = orig
            grad_flat[i] = (plus - minus) / (2.0 * eps)
    return out


def analytic_grad(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    x.zero_grad()
    f(x).backward()
    return x.grad.copy()


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    ``x`` must be a float64 leaf with ``requires_grad=True``; ``f`` must be
    deterministic and return a single-element tensor.
    """
    if x.dtype != np.float64:
        raise ValidationError(f"gradcheck needs a float64 tensor, got {x.dtype}")
    if not x.requires_grad or not x.is_leaf:
        raise ValidationError("gradcheck needs a leaf tensor with requires_grad=True")
    a = analytic_grad(f, x)
    n = numerical_grad(f, x, eps)
    return relative_error(a, n)
