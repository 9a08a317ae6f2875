"""Seeded random streams and the scalar statistics shared across the package.

The random generator is SplitMix64 evaluated in counter mode: output ``i`` of a
stream with state ``k`` is ``mix(k + (i + 1) * GOLDEN)``.  Everything is done
with numpy ``uint64`` arithmetic so a whole batch of variates costs one
vectorised pass, and the sequence only depends on the seed.

Normal variates use Box-Muller on consecutive uniform pairs ``(u1, u2)``::

    r = sqrt(-2 ln(1 - u1)),  z0 = r cos(2 pi u2),  z1 = r sin(2 pi u2)
"""

from __future__ import annotations

import hashlib
import math
from typing import Sequence

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
MASK64 = (1 << 64) - 1

PSNR_IDENTICAL = math.inf  # sentinel returned when the two sets match exactly


def _mix_int(z: int) -> int:
    z = (z ^ (z >> 30)) * MIX1 & MASK64
    z = (z ^ (z >> 27)) * MIX2 & MASK64
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    return z ^ (z >> np.uint64(31))


def _key_to_int(key) -> int:
    if isinstance(key, (bool, np.bool_)):
        return int(key)
    if isinstance(key, (int, np.integer)):
        return int(key) & MASK64
    if isinstance(key, str):
        return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "little")
    raise TypeError(f"cannot derive a seed from {type(key).__name__}")


def derive_seed(*keys) -> int:
    """Fold integers and strings into one 64-bit seed, order sensitive."""
    h = 0x6C6F626974  # arbitrary nonzero start
    for key in keys:
        h = _mix_int((h ^ _key_to_int(key)) + GOLDEN & MASK64)
    return h


class Rng:
    """Counter-based SplitMix64 stream; single owner, not thread-shared."""

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self.counter = 0

    def derive(self, *keys) -> "Rng":
        return Rng(derive_seed(self.seed, *keys))

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            state = np.uint64(self.seed) + idx * np.uint64(GOLDEN)
            return _mix_array(state)

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform doubles on [0, 1) with 53 random bits."""
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return u.reshape(shape)

    def normal(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self.uniform((pairs, 2))
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = r * np.cos(theta)
        z[:, 1] = r * np.sin(theta)
        return z.reshape(-1)[:n].reshape(shape)

    def integers(self, high: int, shape=()) -> np.ndarray:
        """Integers in [0, high) by scaling a uniform double (bias < 2^-40 for small high)."""
        return np.minimum((self.uniform(shape) * high).astype(np.int64), high - 1)

    def beta(self, a: float, b: float, shape=()) -> np.ndarray:
        """Beta(a, b) variates.

        Closed-form inverse CDF when either shape parameter is 1, Johnk's
        rejection method otherwise.
        """
        if a <= 0 or b <= 0:
            raise ValueError("beta parameters must be positive")
        n = int(np.prod(shape, dtype=np.int64))
        if b == 1.0:
            return (self.uniform(n) ** (1.0 / a)).reshape(shape)
        if a == 1.0:
            return (1.0 - self.uniform(n) ** (1.0 / b)).reshape(shape)
        out = np.empty(n)
        todo = np.arange(n)
        while todo.size:
            u = self.uniform((todo.size, 2))
            x = u[:, 0] ** (1.0 / a)
            y = u[:, 1] ** (1.0 / b)
            s = x + y
            ok = (s <= 1.0) & (s > 0.0)
            out[todo[ok]] = x[ok] / s[ok]
            todo = todo[~ok]
        return out.reshape(shape)


def _paired(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _paired(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, data_range: float = 2.0) -> float:
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    err = mse(a, b)
    if err == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(data_range**2 / err)


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = _paired(x, y)
    if x.ndim != 1 or x.size < 2:
        raise ValueError("pearson needs two equal-length vectors of length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("correlation undefined for a constant vector")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def skewness(x: Sequence[float]) -> float:
    """Sample skewness g1 = m3 / m2**1.5 from biased central moments."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size < 3:
        raise ValueError("skewness needs at least 3 observations")
    d = x - x.mean()
    m2 = float(np.mean(d**2))
    if m2 == 0.0:
        raise ValueError("skewness undefined for a constant vector")
    m3 = float(np.mean(d**3))
    return m3 / m2**1.5
