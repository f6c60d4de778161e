"""Array primitives shared by every other module.

Tensors are plain ``numpy.ndarray`` objects in C (row-major) order.  Shipped
code paths run in float32; the gradient-check suite switches to float64 by
passing ``dtype=np.float64`` where a function accepts it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float32
CHECK_DTYPE = np.float64


class InvalidShapeError(ValueError):
    pass


class InvalidParameterError(ValueError):
    pass


def as_tensor(values, dtype=DEFAULT_DTYPE) -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=dtype)
    if arr.ndim and 0 in arr.shape:
        raise InvalidShapeError(f"tensor extents must be >= 1, got {arr.shape}")
    return arr


@dataclass(frozen=True)
class Rng:
    """Counter-based random stream identified by ``(seed, stream)``.

    Backed by Philox, so draws for different streams can be produced in any
    order (or concurrently) without changing any individual stream.
    """

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        return np.random.Generator(np.random.Philox(ss))

    def child(self, stream: int) -> "Rng":
        return Rng(self.seed, stream)


# Named streams expanded from one root seed.  Offsets keep the per-sample
# streams of different purposes disjoint.
STREAMS = {
    "data": 1 << 40,
    "init": 2 << 40,
    "shuffle": 3 << 40,
    "bayes": 4 << 40,
    "attribution": 5 << 40,
}


def named_rng(seed: int, name: str, index: int = 0) -> Rng:
    return Rng(seed, STREAMS[name] + index)


def normal_sample(rng: Rng | np.random.Generator, mean, std, shape, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """I.i.d. draws from N(mean, std**2).

    ``mean`` may be a scalar or an array broadcastable to ``shape``.  A zero
    ``std`` returns ``mean`` exactly without consuming randomness.
    """
    mean_arr = np.asarray(mean, dtype=np.float64)
    if not np.all(np.isfinite(mean_arr)) or not math.isfinite(float(std)):
        raise InvalidParameterError("mean and std must be finite")
    if std < 0:
        raise InvalidParameterError(f"std must be >= 0, got {std}")
    shape = tuple(int(s) for s in np.atleast_1d(shape)) if np.ndim(shape) else (int(shape),)
    if std == 0:
        return np.ascontiguousarray(np.broadcast_to(np.asarray(mean, dtype=dtype), shape))
    gen = rng.generator() if isinstance(rng, Rng) else rng
    z = gen.standard_normal(shape, dtype=np.float64)
    return np.ascontiguousarray(mean_arr + std * z, dtype=dtype)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits)
    if logits.size == 0:
        raise InvalidShapeError("softmax of an empty tensor")
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise InvalidShapeError(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")


def add(a, b):
    _check_same_shape(a, b)
    return np.add(a, b)


def sub(a, b):
    _check_same_shape(a, b)
    return np.subtract(a, b)


def mul_scalar(a, k):
    return np.multiply(a, k, dtype=np.asarray(a).dtype)


def mean(a, axis=None):
    return np.mean(a, axis=axis)


def std(a, axis=None):
    """Population standard deviation (divides by N)."""
    return np.std(a, axis=axis, ddof=0)


def percentile(a, q: float) -> float:
    """Linear interpolation between order statistics."""
    if not 0 <= q <= 100:
        raise InvalidParameterError(f"percentile q must lie in [0, 100], got {q}")
    return float(np.percentile(np.asarray(a, dtype=np.float64), q, method="linear"))


def argmax(a, axis=None):
    return np.argmax(a, axis=axis)
