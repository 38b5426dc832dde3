"""Parameter initialisation and flat-dict helpers."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor

Params = dict[str, Tensor]


def he_conv(rng: np.random.Generator, cout: int, cin: int, k: int, dtype) -> tuple[Tensor, Tensor]:
    std = np.sqrt(2.0 / (cin * k * k))
    w = rng.standard_normal((cout, cin, k, k)) * std
    return Tensor(w.astype(dtype), requires_grad=True), Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)


def zero_conv(cout: int, cin: int, k: int, dtype) -> tuple[Tensor, Tensor]:
    return (
        Tensor(np.zeros((cout, cin, k, k), dtype=dtype), requires_grad=True),
        Tensor(np.zeros(cout, dtype=dtype), requires_grad=True),
    )


def he_linear(rng: np.random.Generator, n_in: int, n_out: int, dtype, gain: float = 1.0) -> tuple[Tensor, Tensor]:
    w = rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in) * gain
    return Tensor(w.astype(dtype), requires_grad=True), Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)


def subtree(params: Params, prefix: str) -> Params:
    """Entries under ``prefix.`` with the prefix stripped."""
    head = prefix + "."
    return {k[len(head):]: v for k, v in params.items() if k.startswith(head)}


def prefixed(prefix: str, params: Params) -> Params:
    return {f"{prefix}.{k}": v for k, v in params.items()}
