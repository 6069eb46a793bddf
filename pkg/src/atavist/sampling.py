"""Random streams and alias tables.

Streams are Philox (counter-based) generators keyed by a master seed and a
tuple of labels, so every replicate gets its own reproducible stream no matter
which worker runs it.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(x) -> int:
    if isinstance(x, (int, np.integer)):
        return int(x)
    return zlib.crc32(str(x).encode())


def stream(seed: int, *labels) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(x) for x in labels))
    return np.random.Generator(np.random.Philox(ss))


def _vose(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    k = len(probs)
    scaled = probs * k / probs.sum()
    accept = np.ones(k)
    alias = np.arange(k)
    small = [i for i in range(k) if scaled[i] < 1.0]
    large = [i for i in range(k) if scaled[i] >= 1.0]
    while small and large:
        s = small.pop()
        g = large.pop()
        accept[s] = scaled[s]
        alias[s] = g
        scaled[g] -= 1.0 - scaled[s]
        if scaled[g] < 1.0:
            small.append(g)
        else:
            large.append(g)
    # leftovers are 1 up to rounding
    for i in small + large:
        accept[i] = 1.0
    return accept, alias


class AliasTable:
    """O(1) draws from a finite distribution (Vose's construction)."""

    def __init__(self, probs):
        probs = np.asarray(probs, dtype=float)
        if probs.ndim != 1 or len(probs) == 0 or np.any(probs < 0) or probs.sum() <= 0:
            raise ValueError("alias table needs a nonnegative, non-zero weight vector")
        self.accept, self.alias = _vose(probs)
        self.size = len(probs)

    def draw(self, u: np.ndarray) -> np.ndarray:
        """Map uniforms on [0, 1) to outcomes; one uniform per draw."""
        x = np.asarray(u) * self.size
        i = np.minimum(x.astype(np.int64), self.size - 1)
        return np.where(x - i < self.accept[i], i, self.alias[i])

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self.draw(rng.random(size))


class RowAlias:
    """Alias tables for every row of a row-stochastic matrix, stacked for vectorised draws."""

    def __init__(self, matrix):
        matrix = np.asarray(matrix, dtype=float)
        n, k = matrix.shape
        self.k = k
        self.accept = np.empty((n, k))
        self.alias = np.empty((n, k), dtype=np.int64)
        for s in range(n):
            self.accept[s], self.alias[s] = _vose(matrix[s])

    def draw(self, rows, u) -> np.ndarray:
        x = np.asarray(u) * self.k
        i = np.minimum(x.astype(np.int64), self.k - 1)
        return np.where(x - i < self.accept[rows, i], i, self.alias[rows, i])
