"""Ranking and calibration metrics plus the candidate-set evaluation protocol."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .sampling import NegativeSampler

PROB_CLAMP = 1e-6


class UndefinedMetricError(ValueError):
    pass


def _arrays(labels, scores):
    y = np.asarray(labels).astype(np.int64).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    if y.shape != s.shape:
        raise ValueError("labels and scores differ in length")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    return y, s


def auc(labels, scores) -> float:
    """ROC AUC via midranks: P(random positive outscores random negative), ties 1/2."""
    y, s = _arrays(labels, scores)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auc needs at least one positive and one negative")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _id_order(ids, n) -> np.ndarray:
    if ids is None:
        return np.arange(n)
    return np.unique(np.asarray(ids), return_inverse=True)[1].ravel()


def pr_auc(labels, scores, ids=None) -> float:
    """Average precision; ties in score are ordered by ascending ``ids`` (default: position)."""
    y, s = _arrays(labels, scores)
    if y.sum() == 0:
        raise UndefinedMetricError("pr_auc needs at least one positive")
    order = np.lexsort((_id_order(ids, len(y)), -s))
    hits = y[order]
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits == 1].mean())


@dataclass
class RankingSample:
    user_id: str
    positive_ad_id: str
    negative_ad_ids: list[str]
    scores: np.ndarray  # positive first, then negatives in order
    advertiser_ids: list[str] | None = None

    def positive_rank(self) -> int:
        """1-based rank of the positive; ties go to the smaller ad_id."""
        s = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(s)):
            raise ValueError("scores must be finite")
        p = s[0]
        rank = 1
        for ad_id, v in zip(self.negative_ad_ids, s[1:]):
            if v > p or (v == p and ad_id < self.positive_ad_id):
                rank += 1
        return rank


def mrr(samples: Sequence[RankingSample]) -> float:
    if not samples:
        raise UndefinedMetricError("mrr needs at least one sample")
    return float(np.mean([1.0 / s.positive_rank() for s in samples]))


def recall_at_k(samples: Sequence[RankingSample], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not samples:
        raise UndefinedMetricError("recall_at_k needs at least one sample")
    return float(np.mean([s.positive_rank() <= k for s in samples]))


def adv_auc(labels, scores, advertisers) -> float:
    """Row-count weighted mean of per-advertiser AUCs; single-class advertisers are skipped."""
    y, s = _arrays(labels, scores)
    adv = np.asarray(advertisers).ravel()
    total = weight = 0.0
    for a in np.unique(adv):
        m = adv == a
        n_pos = y[m].sum()
        if n_pos == 0 or n_pos == m.sum():
            continue
        total += m.sum() * auc(y[m], s[m])
        weight += m.sum()
    if weight == 0:
        raise UndefinedMetricError("adv_auc: no advertiser has both classes")
    return float(total / weight)


def cross_entropy(labels, probs) -> float:
    y = np.asarray(labels, dtype=np.float64).ravel()
    p = np.clip(np.asarray(probs, dtype=np.float64).ravel(), PROB_CLAMP, 1 - PROB_CLAMP)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def rig(labels, probs) -> float:
    """Relative information gain over the constant empirical-rate predictor."""
    y = np.asarray(labels, dtype=np.float64).ravel()
    if y.size == 0 or y.min() == y.max():
        raise UndefinedMetricError("rig needs both classes")
    base = cross_entropy(y, np.full_like(y, y.mean()))
    return (base - cross_entropy(y, probs)) / base


@dataclass
class MetricsReport:
    auc: float
    pr_auc: float
    mrr: float
    recall_at_1: float
    recall_at_3: float
    adv_auc: float
    rig: float
    samples: int = 0
    negatives: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)

    def append_csv(self, path, extra: dict | None = None) -> None:
        row = dict(extra or {})
        row.update(self.to_dict())
        new = not Path(path).exists() or Path(path).stat().st_size == 0
        with open(path, "a", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(row))
            if new:
                w.writeheader()
            w.writerow(row)


Scorer = Callable[[Sequence, np.ndarray], np.ndarray]


def ranking_samples(examples, candidates: np.ndarray, scores: np.ndarray, advertiser_of: dict | None = None):
    out = []
    for ex, cand, sc in zip(examples, candidates, scores):
        advs = [advertiser_of.get(a, "") for a in cand] if advertiser_of else None
        out.append(RankingSample(ex.user_id, cand[0], list(cand[1:]), np.asarray(sc), advs))
    return out


def metrics_from_grid(samples: Sequence[RankingSample]) -> MetricsReport:
    """All metrics for candidate grids: global ones pool every candidate."""
    n = len(samples)
    m = len(samples[0].negative_ad_ids) if n else 0
    scores = np.stack([s.scores for s in samples]).astype(np.float64)
    labels = np.zeros(scores.shape, dtype=np.int8)
    labels[:, 0] = 1
    ids = np.array([[s.positive_ad_id, *s.negative_ad_ids] for s in samples])
    tie_key = _id_order(ids, ids.size) * n + np.repeat(np.arange(n), m + 1)
    adv = float("nan")
    if samples[0].advertiser_ids is not None:
        try:
            adv = adv_auc(labels, scores, np.array([s.advertiser_ids for s in samples]))
        except UndefinedMetricError:
            pass
    probs = 0.5 * (1.0 + np.tanh(0.5 * scores))
    return MetricsReport(
        auc=auc(labels, scores),
        pr_auc=pr_auc(labels, scores, tie_key),
        mrr=mrr(samples),
        recall_at_1=recall_at_k(samples, 1),
        recall_at_3=recall_at_k(samples, 3),
        adv_auc=adv,
        rig=rig(labels, probs),
        samples=n,
        negatives=m,
    )


def evaluate_ranking(scorer: Scorer, examples: Sequence, packed: Sequence, ad_ids: Sequence[str], probs,
                     m: int = 20, seed: int = 0, advertiser_of: dict | None = None) -> MetricsReport:
    """Candidate-set protocol: each positive ranked against ``m`` sampled negatives.

    ``ad_ids``/``probs`` give the background distribution the negatives are
    drawn from (never the example's positive). ``scorer(packed, grid)``
    returns scores for an ``(n, m+1)`` grid of ad ids whose column 0 holds
    the positives.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if not examples:
        raise UndefinedMetricError("no evaluation examples")
    sampler = NegativeSampler(ad_ids, probs, seed=seed)
    pos = np.array([sampler.row.get(e.positive_ad_id, -1) for e in examples])
    if (pos < 0).any():
        raise ValueError("evaluation positive not in the ad catalog")
    grid_rows = np.concatenate([pos[:, None], sampler.sample_rows(pos, m)], axis=1)
    grid = np.asarray(sampler.ad_ids, dtype=object)[grid_rows]
    scores = np.asarray(scorer(packed, grid), dtype=np.float64)
    return metrics_from_grid(ranking_samples(examples, grid, scores, advertiser_of))


def harmonic(n: int) -> float:
    return math.fsum(1.0 / i for i in range(1, n + 1))
