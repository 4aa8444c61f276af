"""Seeded complex Gaussian sampling.

All randomness flows through a Philox (counter-based, 64-bit) generator.
Gaussians come from Box-Muller on uniform pairs so that the draw order is
fixed: entries are visited in column-major order and each entry consumes
two uniforms, the first giving the radius and the second the angle; the
cosine branch is the real part and the sine branch the imaginary part.
"""

from __future__ import annotations

import numpy as np

SeedLike = int | np.random.SeedSequence | tuple


def make_rng(seed: SeedLike) -> np.random.Generator:
    """Philox generator from an int, a SeedSequence or an (entropy, *keys) tuple."""
    if isinstance(seed, tuple):
        entropy, *keys = seed
        seed = np.random.SeedSequence(entropy, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(seed))


def complex_gaussian(rng: np.random.Generator, shape, variance=1.0) -> np.ndarray:
    """Draw CN(0, variance) samples of the given shape.

    ``variance`` broadcasts against ``shape`` (e.g. a per-column vector of
    pathloss factors). Real and imaginary parts each carry ``variance / 2``.
    """
    shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    n = int(np.prod(shape)) if shape else 1
    u = rng.random((n, 2))
    # 1 - U lies in (0, 1], keeping the log finite
    radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
    angle = 2.0 * np.pi * u[:, 1]
    z = radius * np.cos(angle) + 1j * radius * np.sin(angle)
    z = z.reshape(shape, order="F")
    return z * np.sqrt(np.asarray(variance, dtype=float) / 2.0)
