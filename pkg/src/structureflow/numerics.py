"""Shared numerical helpers: checked matrix products, seeded randomness, finite differences.

Matrices are plain 2-D ``float64`` numpy arrays throughout the package.
"""
from __future__ import annotations

from typing import Callable

import numpy as np


class Prng:
    """Seeded random stream backed by the counter-based Philox generator.

    Philox output depends only on (key, counter), so a given seed produces the
    same stream on every platform. Substreams for (seed, step, ...) tuples are
    derived with :meth:`substream` and never share state with the parent.
    """

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed)))

    def substream(self, *keys: int) -> "Prng":
        child = Prng.__new__(Prng)
        child.seed = self.seed
        entropy = [self.seed, *[int(k) for k in keys]]
        child.gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
        return child

    def normal(self, size) -> np.ndarray:
        return self.gen.standard_normal(size)

    def uniform(self, low: float, high: float, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, high: int, size=None):
        return self.gen.integers(0, high, size)

    def random(self, size=None):
        return self.gen.random(size)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def gauss(prng: Prng, n: int) -> np.ndarray:
    """Draw ``n`` i.i.d. standard normals, advancing ``prng``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return prng.normal(n)


def fd_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64).ravel()
    grad = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad
