import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcsbn.metrics import (MetricsReport, RankingSample, UndefinedMetricError, adv_auc, auc, cross_entropy,
                           evaluate_ranking, harmonic, metrics_from_grid, mrr, pr_auc, recall_at_k, rig)

# ---------------------------------------------------------------- brute-force oracles


def brute_auc(y, s):
    pos = [v for v, l in zip(s, y) if l]
    neg = [v for v, l in zip(s, y) if not l]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def brute_ap(y, s, ids):
    order = sorted(range(len(y)), key=lambda i: (-s[i], ids[i]))
    hits, total = 0, 0.0
    for r, i in enumerate(order, 1):
        if y[i]:
            hits += 1
            total += hits / r
    return total / hits


def brute_rank(pos_id, pos_score, negs):
    return 1 + sum(1 for a, v in negs if v > pos_score or (v == pos_score and a < pos_id))


def brute_adv(y, s, adv):
    num = den = 0.0
    for a in set(adv):
        idx = [i for i, g in enumerate(adv) if g == a]
        ys = [y[i] for i in idx]
        if 0 < sum(ys) < len(ys):
            num += len(idx) * brute_auc(ys, [s[i] for i in idx])
            den += len(idx)
    return num / den


def brute_rig(y, p):
    clamp = [min(max(q, 1e-6), 1 - 1e-6) for q in p]
    rate = sum(y) / len(y)

    def ce(qs):
        return -sum(l * math.log(q) + (1 - l) * math.log(1 - q) for l, q in zip(y, qs)) / len(y)

    base = ce([rate] * len(y))
    return (base - ce(clamp)) / base


def _instance(rng, n):
    y = rng.integers(0, 2, n)
    y[0], y[1] = 1, 0
    # a coarse grid makes ties common
    s = rng.integers(-4, 5, n).astype(float) / 2
    return y.tolist(), s.tolist()


# ---------------------------------------------------------------- examples


def test_auc_examples():
    assert auc([1, 1, 0, 0], [3, 2, 1, 0]) == 1.0
    assert auc([1, 0, 1, 0], [1, 1, 1, 1]) == 0.5
    y, s = [1, 0, 1, 0, 0, 1], [0.9, 0.8, 0.3, 0.3, 0.1, 0.5]
    assert auc(y, s) == pytest.approx(brute_auc(y, s), abs=1e-12)
    with pytest.raises(UndefinedMetricError):
        auc([1, 1], [0.1, 0.2])


def test_pr_auc_examples():
    assert pr_auc([1, 1, 0], [3, 2, 1]) == 1.0
    for n in (2, 5, 9):
        assert pr_auc([0] * (n - 1) + [1], list(range(n, 0, -1))) == pytest.approx(1 / n)
    with pytest.raises(UndefinedMetricError):
        pr_auc([0, 0], [1, 2])


def _sample(rank_of_positive, size=5):
    scores = np.arange(size, 0, -1, dtype=float)
    order = [scores[rank_of_positive - 1]] + [v for i, v in enumerate(scores) if i != rank_of_positive - 1]
    return RankingSample("u", "p", [f"n{i}" for i in range(size - 1)], np.array(order))


def test_mrr_and_recall_examples():
    assert mrr([_sample(1), _sample(1)]) == 1.0
    assert mrr([_sample(3)]) == pytest.approx(1 / 3)
    assert recall_at_k([_sample(2)], 1) == 0.0
    assert recall_at_k([_sample(5)], 5) == 1.0
    mixed = [_sample(r) for r in (1, 2, 4, 5, 3)]
    assert mrr(mixed) == pytest.approx((1 + 1 / 2 + 1 / 4 + 1 / 5 + 1 / 3) / 5)
    assert recall_at_k(mixed, 3) == pytest.approx(3 / 5)
    with pytest.raises(ValueError):
        recall_at_k(mixed, 0)


def test_positive_rank_tie_break_by_ad_id():
    s = RankingSample("u", "m", ["a", "z"], np.array([1.0, 1.0, 1.0]))
    assert s.positive_rank() == 2


def test_adv_auc_closed_form_weighting():
    # advertiser A: 2 rows, perfectly ranked; advertiser B: 6 rows, all tied
    y = [1, 0, 1, 0, 1, 0, 1, 0]
    s = [2, 1, 0, 0, 0, 0, 0, 0]
    adv = ["A", "A", "B", "B", "B", "B", "B", "B"]
    assert adv_auc(y, s, adv) == 0.625
    assert adv_auc(y, s, ["X"] * 8) == auc(y, s)
    with pytest.raises(UndefinedMetricError):
        adv_auc([1, 0], [1, 0], ["A", "B"])


def test_rig_examples():
    y = [1, 0, 0, 1, 0, 0, 0, 1]
    assert abs(rig(y, [3 / 8] * 8)) < 1e-12
    assert rig(y, y) == pytest.approx(1.0, abs=1e-4)
    p = [0.9, 0.2, 0.4, 0.6, 0.1, 0.3, 0.5, 0.7]
    assert rig(y, p) == pytest.approx(brute_rig(y, p), abs=1e-12)
    with pytest.raises(UndefinedMetricError):
        rig([1, 1], [0.5, 0.5])
    assert cross_entropy([1], [0.0]) == pytest.approx(-math.log(1e-6))


# ---------------------------------------------------------------- random instances against the oracles


def test_metrics_match_brute_force_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 21))
        y, s = _instance(rng, n)
        ids = rng.permutation(n).tolist()
        assert abs(auc(y, s) - brute_auc(y, s)) < 1e-9
        assert abs(pr_auc(y, s, ids) - brute_ap(y, s, ids)) < 1e-9
        adv = rng.choice(list("ABCDE"), n).tolist()
        try:
            want = brute_adv(y, s, adv)
        except ZeroDivisionError:
            with pytest.raises(UndefinedMetricError):
                adv_auc(y, s, adv)
        else:
            assert abs(adv_auc(y, s, adv) - want) < 1e-9
        p = rng.random(n).tolist()
        assert abs(rig(y, p) - brute_rig(y, p)) < 1e-9


def test_ranked_metrics_match_enumeration():
    rng = np.random.default_rng(1)
    for _ in range(100):
        samples, ranks = [], []
        for _ in range(int(rng.integers(1, 6))):
            m = int(rng.integers(1, 8))
            ids = [f"a{j:02d}" for j in rng.permutation(20)[: m + 1]]
            sc = rng.integers(0, 4, m + 1).astype(float)
            samples.append(RankingSample("u", ids[0], ids[1:], sc))
            ranks.append(brute_rank(ids[0], sc[0], list(zip(ids[1:], sc[1:]))))
        assert abs(mrr(samples) - np.mean([1 / r for r in ranks])) < 1e-9
        for k in (1, 3):
            assert abs(recall_at_k(samples, k) - np.mean([r <= k for r in ranks])) < 1e-9


# ---------------------------------------------------------------- invariants


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), a=st.floats(0.1, 10), b=st.floats(-5, 5))
def test_monotone_transform_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 21))
    y, s = _instance(rng, n)
    s = np.array(s)
    for f in (lambda x: a * x + b, lambda x: np.exp(x / 4), np.arctan):
        t = f(s)
        assert auc(y, t) == auc(y, s)
        assert pr_auc(y, t) == pr_auc(y, s)
        adv = ["A", "B"] * (n // 2) + ["A"] * (n % 2)
        try:
            assert adv_auc(y, t, adv) == adv_auc(y, s, adv)
        except UndefinedMetricError:
            pass
    if n >= 4:
        negs = ["a", "z", "q"]
        assert mrr([RankingSample("u", "p", negs, s[:4])]) == mrr([RankingSample("u", "p", negs, np.arctan(s[:4]))])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_recall_monotone_and_bounded_by_mrr(seed):
    rng = np.random.default_rng(seed)
    samples = [RankingSample("u", "p", [f"n{i}" for i in range(6)], rng.normal(size=7)) for _ in range(5)]
    r = [recall_at_k(samples, k) for k in range(1, 8)]
    assert r == sorted(r) and r[-1] == 1.0
    assert r[0] <= mrr(samples) <= 1


# ---------------------------------------------------------------- evaluation protocol


def _examples(n, ads, rng):
    return [SimpleNamespace(user_id=f"u{i}", positive_ad_id=ads[int(rng.integers(len(ads)))]) for i in range(n)]


def test_evaluate_ranking_oracle_and_determinism():
    rng = np.random.default_rng(2)
    ads = [f"ad{i}" for i in range(30)]
    ex = _examples(200, ads, rng)

    def oracle(packed, grid):
        out = np.zeros(grid.shape)
        out[:, 0] = 1.0
        return out

    advertiser_of = {a: f"v{int(a[2:]) % 3}" for a in ads}
    rep = evaluate_ranking(oracle, ex, [None] * len(ex), ads, np.ones(30), m=5, seed=1, advertiser_of=advertiser_of)
    assert rep.adv_auc == 1.0
    assert rep.auc == rep.mrr == rep.recall_at_1 == 1.0
    again = evaluate_ranking(oracle, ex, [None] * len(ex), ads, np.ones(30), m=5, seed=1,
                             advertiser_of=advertiser_of)
    assert again.to_json() == rep.to_json()
    with pytest.raises(ValueError):
        evaluate_ranking(oracle, ex, [None] * len(ex), ads, np.ones(30), m=0)


def test_random_ranker_calibration():
    rng = np.random.default_rng(3)
    ads = [f"ad{i}" for i in range(50)]
    ex = _examples(4000, ads, rng)
    noise = np.random.default_rng(4)
    rep = evaluate_ranking(lambda packed, grid: noise.random(grid.shape), ex, [None] * len(ex), ads,
                           np.ones(50), m=9, seed=5)
    assert abs(rep.mrr - harmonic(10) / 10) < 0.02
    assert abs(rep.auc - 0.5) < 0.02


def test_report_serialization(tmp_path):
    samples = [_sample(1), _sample(2)]
    rep = metrics_from_grid(samples)
    assert isinstance(rep, MetricsReport) and rep.samples == 2 and rep.negatives == 4
    assert set(rep.to_dict()) >= {"auc", "pr_auc", "mrr", "recall_at_1", "recall_at_3", "adv_auc", "rig"}
    path = tmp_path / "r.csv"
    rep.append_csv(path, {"variant": "x"})
    rep.append_csv(path, {"variant": "y"})
    lines = path.read_text().splitlines()
    assert lines[0].startswith("variant,auc") and len(lines) == 3
