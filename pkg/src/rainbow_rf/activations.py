"""Entrywise activation functions usable as rainbow-network layers.

Every activation is centered under a symmetric Gaussian pre-activation:
``identity``, ``tanh``, ``erf`` and ``sign`` are odd, and ``centered_relu``
subtracts ``E relu(sqrt(r) N) = sqrt(r / 2pi)`` for the layer's
pre-activation variance ``r``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import special

ArrayFn = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class Activation:
    name: str
    fn: ArrayFn
    grad: ArrayFn | None
    smooth: bool
    odd: bool

    def __call__(self, x, r: float = 1.0) -> np.ndarray:
        return self.fn(np.asarray(x, dtype=np.float64), r)

    def derivative(self, x, r: float = 1.0) -> np.ndarray:
        if self.grad is None:
            raise ValueError(f"activation {self.name!r} has no pointwise derivative")
        return self.grad(np.asarray(x, dtype=np.float64), r)


def _relu_mean(r: float) -> float:
    return math.sqrt(max(r, 0.0) / (2.0 * math.pi))


_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)

ACTIVATIONS: dict[str, Activation] = {
    "identity": Activation(
        "identity", lambda x, r: x.copy(), lambda x, r: np.ones_like(x), smooth=True, odd=True
    ),
    "tanh": Activation(
        "tanh", lambda x, r: np.tanh(x), lambda x, r: 1.0 - np.tanh(x) ** 2, smooth=True, odd=True
    ),
    "erf": Activation(
        "erf",
        lambda x, r: special.erf(x),
        lambda x, r: _TWO_OVER_SQRT_PI * np.exp(-x * x),
        smooth=True,
        odd=True,
    ),
    "sign": Activation("sign", lambda x, r: np.sign(x), None, smooth=False, odd=True),
    "centered_relu": Activation(
        "centered_relu",
        lambda x, r: np.maximum(x, 0.0) - _relu_mean(r),
        lambda x, r: (x > 0).astype(np.float64),
        smooth=False,
        odd=False,
    ),
}


def get_activation(name: str) -> Activation:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(
            f"unknown activation {name!r}; expected one of {sorted(ACTIVATIONS)}"
        ) from None
