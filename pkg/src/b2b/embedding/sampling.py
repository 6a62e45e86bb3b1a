from __future__ import annotations

import numpy as np

MAX_REJECTIONS = 100


class NegativeTable:
    """Unigram sampler over vocabulary rows, weights ``count ** power``."""

    def __init__(self, counts, power: float = 1.0):
        counts = np.asarray(counts, dtype=np.float64)
        if counts.ndim != 1 or counts.size == 0:
            raise ValueError("counts must be a non-empty vector")
        if np.any(counts < 0):
            raise ValueError("counts must be non-negative")
        if power < 0:
            raise ValueError("power must be >= 0")
        weights = np.power(counts, power)
        total = weights.sum()
        if not total > 0:
            raise ValueError("all sampling weights are zero")
        self.power = power
        self.probabilities = weights / total
        self._cdf = np.cumsum(self.probabilities)
        self._cdf[-1] = 1.0

    def __len__(self) -> int:
        return self.probabilities.size

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        u = rng.random(size)
        idx = np.searchsorted(self._cdf, u, side="right")
        # guards u landing exactly on a trailing zero-weight boundary
        return np.minimum(idx, len(self) - 1)

    def sample_excluding(self, rng: np.random.Generator, exclude: np.ndarray, n: int) -> np.ndarray:
        """Draw ``n`` negatives per row of ``exclude``, resampling collisions.

        Each slot is redrawn at most ``MAX_REJECTIONS`` times; slots still
        colliding after that come back as ``-1`` and are skipped by callers.
        """
        exclude = np.asarray(exclude)
        out = self.sample(rng, (exclude.size, n))
        bad = out == exclude[:, None]
        for _ in range(MAX_REJECTIONS):
            k = int(bad.sum())
            if k == 0:
                break
            out[bad] = self.sample(rng, k)
            bad = out == exclude[:, None]
        out[bad] = -1
        return out
