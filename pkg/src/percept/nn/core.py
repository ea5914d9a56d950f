"""Parameter container, layer contract, and weight initialization."""

from __future__ import annotations

import os

import numpy as np

# Optional invariant checking: every op output is verified finite when enabled.
CHECK_FINITE = os.environ.get("PERCEPT_NN_CHECK", "") == "1"


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if CHECK_FINITE and not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x


class Parameter:
    """A trainable array with an optional accumulated gradient."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {self.value.shape}")
        self.grad = g.copy() if self.grad is None else self.grad + g

    def zero_grad(self) -> None:
        self.grad = None


class Layer:
    """Base class for layers with an explicit forward/backward pair.

    ``forward`` caches whatever ``backward`` needs; ``backward`` consumes the
    cache, so it can be called at most once per forward.  Parameter gradients
    accumulate on the :class:`Parameter` objects; input gradients are
    returned.
    """

    def __init__(self):
        self.params: dict[str, Parameter] = {}
        self._cache = None

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def _take_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called without a cached forward")
        cache, self._cache = self._cache, None
        return cache

    def parameters(self) -> dict[str, Parameter]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def bias_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
