"""
Seeded random number generation with a documented algorithm identity.

Uniform doubles come from numpy's PCG64 bit generator. Gaussian variates are
produced with the Box-Muller transform on those uniforms and Laplace variates
with the inverse CDF, so a seed maps to the same stream on every platform.
"""

from typing import Sequence, Tuple, Union

import numpy as np

Shape = Union[int, Sequence[int]]


def _as_shape(shape: Shape) -> Tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(d) for d in shape)


class SeededRNG:
    """
    Reproducible random stream owned by a single run.

    Args:
        seed (int): Non-negative integer seed
    """

    ALGORITHM = "pcg64+box-muller"

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._generator = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, key: int) -> "SeededRNG":
        """
        Derive an independent child stream from this stream's seed.

        Args:
            key (int): Child identifier; equal keys give equal streams

        Returns:
            SeededRNG: The child generator
        """
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=(int(key),))
        return SeededRNG(int(sequence.generate_state(1, dtype=np.uint64)[0]))

    def uniform(self, shape: Shape) -> np.ndarray:
        """Uniform doubles in [0, 1)."""
        return self._generator.random(_as_shape(shape))

    def normal(self, shape: Shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """
        Gaussian variates via Box-Muller.

        Args:
            shape (Shape): Output shape
            mean (float, optional): Mean of every entry. Defaults to 0.
            std (float, optional): Standard deviation. Defaults to 1.

        Returns:
            np.ndarray: Array of the requested shape
        """
        dims = _as_shape(shape)
        count = int(np.prod(dims, dtype=np.int64))
        pairs = (count + 1) // 2
        u1 = 1.0 - self._generator.random(pairs)  # (0, 1], keeps log finite
        u2 = self._generator.random(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1).ravel()
        return mean + std * z[:count].reshape(dims)

    def laplace(self, shape: Shape, scale: float) -> np.ndarray:
        """Zero-mean Laplace variates with scale ``b`` via the inverse CDF."""
        dims = _as_shape(shape)
        u = self._generator.random(dims) - 0.5
        tail = np.clip(1.0 - 2.0 * np.abs(u), np.finfo(np.float64).tiny, 1.0)
        return -scale * np.sign(u) * np.log(tail)

    def integers(self, low: int, high: int, shape: Shape) -> np.ndarray:
        """Integers in [low, high)."""
        return self._generator.integers(low, high, size=_as_shape(shape))

    def permutation(self, count: int) -> np.ndarray:
        return self._generator.permutation(count)

    def unit_vectors(self, count: int, dim: int) -> np.ndarray:
        """Rows drawn uniformly from the unit sphere in ``dim`` dimensions."""
        draws = self.normal((count, dim))
        return draws / np.linalg.norm(draws, axis=1, keepdims=True)
