"""Dense float64 matrix helpers and the seeded random source.

Matrices are plain ``numpy.ndarray`` objects of dtype float64, row-major,
with batches stored as rows.  The helpers here add shape checking and the
finiteness guarantee on top of numpy.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

RNG_ALGORITHM = "PCG64"


class ShapeError(ValueError):
    """Raised when operand shapes are not conformable."""


def as_matrix(values) -> np.ndarray:
    m = np.array(values, dtype=np.float64, ndmin=2)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def _check_finite(m: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise FloatingPointError(f"{what} produced non-finite values")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit conformability check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return _check_finite(a @ b, "matmul")


def elementwise(a: np.ndarray, f: Callable, b: np.ndarray | None = None) -> np.ndarray:
    """Apply ``f`` per element; binary when ``b`` is given (shapes must match)."""
    a = np.asarray(a, dtype=np.float64)
    if b is None:
        out = f(a)
    else:
        b = np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
        out = f(a, b)
    return _check_finite(np.asarray(out, dtype=np.float64), "elementwise")


def relu(a: np.ndarray) -> np.ndarray:
    return elementwise(a, lambda x: np.maximum(x, 0.0))


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return elementwise(a, np.add, b)


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return elementwise(a, np.multiply, b)


class Rng:
    """Seeded PCG64 stream.

    ``split`` derives independent child streams through ``SeedSequence`` so
    parallel or logically separate consumers never share one stream.
    """

    algorithm = RNG_ALGORITHM

    def __init__(self, seed: int | np.random.SeedSequence):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
            self.seed = seed.entropy
        else:
            self.seed = int(seed)
            self._seq = np.random.SeedSequence(self.seed)
        self.generator = np.random.Generator(np.random.PCG64(self._seq))

    def uniform(self, n) -> np.ndarray:
        """``n`` draws in [0, 1); ``n`` may be an int or a shape tuple."""
        if isinstance(n, (int, np.integer)) and n < 0:
            raise ValueError("n must be non-negative")
        return self.generator.random(n)

    def split(self, n: int) -> list["Rng"]:
        return [Rng(child) for child in self._seq.spawn(n)]

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


def rng_uniform(rng: Rng, n: int) -> np.ndarray:
    return rng.uniform(n)
