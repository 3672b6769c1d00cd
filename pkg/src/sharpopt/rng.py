"""Seeded randomness.

Uniform draws come from numpy's counter-based Philox bit generator; normal
draws are produced here with the Box-Muller transform so the Gaussian stream
does not depend on numpy's sampler internals.
"""

from __future__ import annotations

import numpy as np

from .params import Layout, ParamVector


class Rng:
    """Deterministic random stream identified by ``(seed, stream)``.

    ``spawn`` derives independent child streams, e.g. one per data split.
    """

    def __init__(self, seed: int, stream: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF, *self.stream]
        self._bits = np.random.Philox(np.random.SeedSequence(entropy))
        self._gen = np.random.Generator(self._bits)

    def spawn(self, *key: int) -> "Rng":
        return Rng(self.seed, self.stream + tuple(key))

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1)."""
        return self._gen.random(n)

    def normal(self, n: int) -> np.ndarray:
        """``n`` standard normal draws via Box-Muller."""
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1 = 1.0 - u[:m]  # (0, 1], keeps log finite
        u2 = u[m:]
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        z = np.empty(2 * m)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return z[:n]

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        return self._gen.integers(low, high, size=n)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"


def gaussian_vector(rng: Rng, layout: Layout, sigma: float) -> ParamVector:
    """Isotropic Gaussian vector with per-coordinate standard deviation ``sigma``."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return ParamVector(layout, sigma * rng.normal(layout.dim))
