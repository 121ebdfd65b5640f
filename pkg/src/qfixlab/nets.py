"""Feed-forward building blocks shared by agents and mixers."""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .autodiff import ParamStore, Tensor, relu


def init_linear(store: ParamStore, name: str, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False) -> None:
    # torch-style uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for both weight and bias
    bound = 1.0 / np.sqrt(max(n_in, 1))
    if zero:
        store.add(f"{name}.w", np.zeros((n_in, n_out)))
        store.add(f"{name}.b", np.zeros(n_out))
    else:
        store.add(f"{name}.w", rng.uniform(-bound, bound, size=(n_in, n_out)))
        store.add(f"{name}.b", rng.uniform(-bound, bound, size=n_out))


def init_mlp(
    store: ParamStore,
    name: str,
    sizes: Sequence[int],
    rng: np.random.Generator,
    zero_last: bool = False,
) -> None:
    """Register layers ``name.0``, ``name.1``, ... mapping ``sizes[0] -> ... -> sizes[-1]``."""
    n_layers = len(sizes) - 1
    for i in range(n_layers):
        init_linear(store, f"{name}.{i}", sizes[i], sizes[i + 1], rng, zero=zero_last and i == n_layers - 1)


def linear(x: Tensor, p: Mapping[str, Tensor], name: str) -> Tensor:
    return x @ p[f"{name}.w"] + p[f"{name}.b"]


def mlp(x: Tensor, p: Mapping[str, Tensor], name: str) -> Tensor:
    """Apply the layers registered by :func:`init_mlp`, relu between them."""
    i = 0
    while f"{name}.{i + 1}.w" in p:
        x = relu(linear(x, p, f"{name}.{i}"))
        i += 1
    return linear(x, p, f"{name}.{i}")
