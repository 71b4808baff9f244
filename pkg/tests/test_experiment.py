import math

import pytest

from mcsbn.experiment import ABLATION_VARIANTS, ablation_budget, check_ordering, evaluate_variant, prepare
from mcsbn.synthetic import SyntheticConfig

GOOD = {"mcsbn": 0.95, "seq-avg": 0.94, "seq-max": 0.945, "seq-hid": 0.94, "pool-max": 0.93, "pool-last": 0.92}


def test_ordering_accepts_the_expected_pattern():
    check = check_ordering(GOOD)
    assert check.passed and len(check.checks) == 4


def test_slack_only_covers_mcsbn_versus_best_seq():
    near_tie = dict(GOOD, mcsbn=0.941)  # 0.004 below seq-max
    assert check_ordering(near_tie).passed
    assert not check_ordering(dict(GOOD, mcsbn=0.939)).passed
    # pool-max above the best seq variant by less than the slack still fails
    assert not check_ordering(dict(GOOD, **{"pool-max": 0.947})).passed
    assert not check_ordering(dict(GOOD, **{"pool-last": 0.935})).passed


def test_min_gap_to_pool_last():
    tight = dict(GOOD, **{"pool-last": 0.935, "pool-max": 0.936})
    check = check_ordering(tight)
    assert not check.passed
    assert [ok for _, ok in check.checks] == [True, True, True, False]
    assert check_ordering(tight, min_gap=0.01).passed


def test_budget_is_shared_and_overridable():
    cfg = ablation_budget(max_steps=5)
    assert cfg.max_steps == 5 and cfg.d == ablation_budget().d


@pytest.fixture(scope="module")
def tiny_prep():
    cfg = ablation_budget(d=8, batch_size=32, max_steps=4, eval_every=2, word_dim=4, attention_hidden=4)
    synth = SyntheticConfig(num_users=120, num_ads=30, num_topics=3, days=6, seed=1)
    return prepare(synth, cfg), cfg


@pytest.mark.parametrize("variant", ABLATION_VARIANTS + ("bow",))
def test_every_variant_runs_end_to_end(tiny_prep, variant):
    prep, cfg = tiny_prep
    res = evaluate_variant(variant, prep, cfg, m=5)
    assert 0.0 <= res.metrics.auc <= 1.0 and 0.0 < res.metrics.mrr <= 1.0
    row = res.row()
    assert row["variant"] == variant
    if variant in ("mcsbn", "pool-max", "pool-last"):
        assert math.isclose(sum(res.mean_attention), 1.0, rel_tol=1e-6)
    else:
        assert res.mean_attention is None
    assert (res.train_report is None) == (variant == "bow")
