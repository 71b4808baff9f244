"""Background-distribution negative sampling over the ad catalog."""
from __future__ import annotations

from collections import Counter
from typing import Iterable, Sequence

import numpy as np


class NegativeSampler:
    """i.i.d. draws from a background distribution over ads, never the positive."""

    def __init__(self, ad_ids: Sequence[str], weights: Sequence[float], seed: int = 0):
        w = np.asarray(weights, dtype=np.float64)
        if len(ad_ids) != len(w) or np.any(w < 0) or w.sum() <= 0:
            raise ValueError("sampler weights must be nonnegative with positive total")
        if np.count_nonzero(w) < 2:
            raise ValueError("catalog too small: need at least two ads with nonzero probability")
        self.ad_ids = list(ad_ids)
        self.row = {a: i for i, a in enumerate(self.ad_ids)}
        self.probs = w / w.sum()
        self.cum = np.cumsum(self.probs)
        self.cum /= self.cum[-1]
        self.rng = np.random.default_rng(seed)

    @classmethod
    def uniform(cls, ad_ids: Sequence[str], seed: int = 0) -> "NegativeSampler":
        return cls(ad_ids, np.ones(len(ad_ids)), seed)

    @classmethod
    def frequency(cls, ad_ids: Sequence[str], positive_ad_ids: Iterable[str], seed: int = 0) -> "NegativeSampler":
        counts = Counter(positive_ad_ids)
        return cls(ad_ids, [counts.get(a, 0) for a in ad_ids], seed)

    def _draw(self, shape) -> np.ndarray:
        return np.minimum(np.searchsorted(self.cum, self.rng.random(shape), side="right"), len(self.cum) - 1)

    def sample_rows(self, positive_rows: np.ndarray, k: int) -> np.ndarray:
        """``(n, k)`` ad row indices; any draw equal to its positive is redrawn."""
        positive_rows = np.asarray(positive_rows)
        out = self._draw((len(positive_rows), k))
        bad = out == positive_rows[:, None]
        while bad.any():
            out[bad] = self._draw(int(bad.sum()))
            bad = out == positive_rows[:, None]
        return out


def sample_negatives(sampler: NegativeSampler, positive_ad_id: str, k: int) -> list[str]:
    if k == 0:
        return []
    pos = sampler.row.get(positive_ad_id, -1)
    return [sampler.ad_ids[i] for i in sampler.sample_rows(np.array([pos]), k)[0]]
