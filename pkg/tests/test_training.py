import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from conftest import random_sequences
from mcsbn.featurize import SECONDS_PER_DAY, Event, Vocab
from mcsbn.model import ModelParams, load_checkpoint, save_checkpoint
from mcsbn.nncore import grad_check
from mcsbn.sampling import NegativeSampler, sample_negatives
from mcsbn.training import (IdfTable, TrainConfig, TrainingExample, bow_tfidf_score, build_examples, build_idf,
                            full_loss, ns_loss, split_by_user, train)
from mcsbn.user_encoder import pack_sequence

T0 = 19_600 * SECONDS_PER_DAY


def test_ns_loss_at_zero_scores():
    for k in (1, 3, 10):
        r = ns_loss(np.zeros(4), np.ones(4), np.ones((k, 4)))
        assert r.loss == pytest.approx((k + 1) * math.log(2), rel=1e-12)


def test_ns_loss_limit_and_nonnegativity():
    u = np.array([1.0, 0.0])
    assert ns_loss(u * 200, np.array([1.0, 0.0]), -np.array([[1.0, 0.0]] * 3)).loss < 1e-80
    rng = np.random.default_rng(0)
    for _ in range(50):
        assert ns_loss(rng.normal(size=3), rng.normal(size=3), rng.normal(size=(4, 3))).loss >= 0


def test_ns_loss_gradients_finite_difference():
    rng = np.random.default_rng(1)
    u, a, negs = rng.normal(size=5), rng.normal(size=5), rng.normal(size=(3, 5))
    r = ns_loss(u, a, negs)

    def closure():
        q = ns_loss(u, a, negs)
        return q.loss, {"u": q.d_user, "a": q.d_positive, "n": q.d_negatives}

    errs = grad_check(closure, {"u": u, "a": a, "n": negs})
    assert max(errs.values()) < 1e-6
    assert r.d_negatives.shape == negs.shape


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), eps=st.floats(1e-3, 1.0))
def test_ns_loss_monotone_in_scores(seed, eps):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=4)
    u /= np.linalg.norm(u)
    a, negs = rng.normal(size=4), rng.normal(size=(3, 4))
    base = ns_loss(u, a, negs).loss
    assert ns_loss(u, a + eps * u, negs).loss < base
    lowered = negs.copy()
    lowered[1] -= eps * u
    assert ns_loss(u, a, lowered).loss < base


def test_ns_loss_errors():
    with pytest.raises(ValueError):
        ns_loss(np.ones(2), np.ones(2), np.zeros((0, 2)))
    with pytest.raises(FloatingPointError):
        ns_loss(np.array([np.inf, 0]), np.ones(2), np.ones((1, 2)))


# ---------------------------------------------------------------- sampling


def test_sampler_two_ads_always_other():
    s = NegativeSampler.uniform(["a", "b"], seed=0)
    assert set(sample_negatives(s, "a", 50)) == {"b"}
    assert sample_negatives(s, "a", 0) == []


def test_sampler_frequency_chi_square():
    ids = ["a", "b", "c", "d", "e"]
    counts = {"a": 1, "b": 2, "c": 3, "d": 4, "e": 10}
    s = NegativeSampler.frequency(ids, [a for a, n in counts.items() for _ in range(n)], seed=3)
    draws = s.sample_rows(np.full(100_000, -1), 1).ravel()
    observed = np.bincount(draws, minlength=5)
    expected = 100_000 * np.array([counts[a] for a in ids]) / 20
    assert chisquare(observed, expected).pvalue > 0.01


def test_sampler_excludes_positive_and_rejects_tiny_support():
    s = NegativeSampler(["a", "b", "c"], [1, 1, 1], seed=1)
    rows = s.sample_rows(np.array([0, 1, 2] * 100), 5)
    assert not (rows == np.array([0, 1, 2] * 100)[:, None]).any()
    with pytest.raises(ValueError):
        NegativeSampler(["a", "b"], [1, 0])
    with pytest.raises(ValueError):
        NegativeSampler(["a", "b"], [1, -1])


# ---------------------------------------------------------------- examples


def _vocab():
    return Vocab(["<UNK>", "red", "shoes", "blue", "hats"])


def test_build_examples_withholding():
    ev = [Event("u", T0 - 3599, "query", "red shoes"), Event("u", T0 - 7200, "page", "blue hats"),
          Event("u", T0 - 20 * SECONDS_PER_DAY, "page", "red")]
    rows = [{"user_id": "u", "ad_id": "x", "ts": T0, "label": 1, "advertiser_id": "v"},
            {"user_id": "u", "ad_id": "x", "ts": T0, "label": 0},
            {"user_id": "u", "ts": T0},
            None]
    ex, rep = build_examples(rows, ev, _vocab(), TrainConfig(delta_seconds=3600))
    assert len(ex) == 1 and rep.malformed == 2 and rep.skipped_unlabeled == 1
    page, query, clicks = ex[0].channels
    assert len(query) == 0 and len(clicks) == 0
    assert [s.indices for s in page.sessions] == [(3, 4)]


def test_build_examples_empty_history_still_emitted():
    ev = [Event("u", T0 - 10, "query", "red")]
    ex, _ = build_examples([{"user_id": "u", "ad_id": "x", "ts": T0, "label": 1}], ev, _vocab(), TrainConfig())
    assert len(ex) == 1 and all(len(c) == 0 for c in ex[0].channels)


def test_synthetic_examples_satisfy_withholding_invariant():
    from mcsbn.featurize import build_vocab
    from mcsbn.synthetic import SyntheticConfig, gen_synthetic
    data = gen_synthetic(SyntheticConfig(num_users=60, num_ads=40, num_topics=4, days=6, seed=2))
    events = [Event(**e) for e in data.events]
    vocab = build_vocab([e.text for e in events], 1)
    cfg = TrainConfig(delta_seconds=3600)
    ex, rep = build_examples(data.interactions, events, vocab, cfg)
    assert rep.examples == sum(r["label"] == 1 for r in data.interactions)
    by_user = {}
    for e in events:
        by_user.setdefault(e.user_id, []).append(e)
    for x in ex:
        hi_day = (x.anchor_ts - cfg.delta_seconds) // SECONDS_PER_DAY
        for ch in x.channels:
            for s in ch.sessions:
                assert s.day_index <= hi_day
        # every session day has at least one event strictly before anchor - delta
        for ch in x.channels:
            for s in ch.sessions:
                assert any(e.channel == ch.channel and e.ts // SECONDS_PER_DAY == s.day_index
                           and e.ts < x.anchor_ts - cfg.delta_seconds for e in by_user[x.user_id])


def test_example_dict_roundtrip():
    rng = np.random.default_rng(0)
    ex = TrainingExample("u", T0, random_sequences(rng, 9), "ad1")
    assert TrainingExample.from_dict(ex.to_dict()) == ex


def test_split_by_user_disjoint():
    exs = [TrainingExample(f"u{i % 40}", T0, (), "a") for i in range(200)]
    tr, va = split_by_user(exs, 0.1, 0)
    assert {e.user_id for e in tr}.isdisjoint({e.user_id for e in va})
    assert len({e.user_id for e in va}) == 4


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(val_fraction=0.5)
    with pytest.raises(ValueError):
        TrainConfig(d=7)
    with pytest.raises(ValueError):
        TrainConfig(sampler="hard")
    assert TrainConfig.from_dict(TrainConfig(d=8).to_dict()) == TrainConfig(d=8)


# ---------------------------------------------------------------- full loss and training


def test_full_loss_gradients_tiny_instance(tiny_model):
    rng = np.random.default_rng(2)
    p = tiny_model()
    for name, a in p.tensors().items():
        if a.ndim == 1:
            a[:] = rng.normal(0, 0.3, a.shape)
    packed = [[pack_sequence(s) for s in random_sequences(rng, 10, max_sessions=3, p_empty=0)] for _ in range(3)]
    ads = [[1, 2, 3], [4, 5], [6], [7, 8, 9, 0]]
    pos = np.array([0, 1, 2])
    neg = np.array([[1, 3], [2, 3], [0, 3]])

    def closure():
        return full_loss(p, packed, ads, pos, neg)

    tensors = p.tensors()
    tensors.pop("user.att.b1")
    errs = grad_check(closure, tensors)
    assert max(errs.values()) < 1e-4, errs


def _separable_task(n_users=10, n_ads=5, seed=0):
    """Two topics with disjoint words; users of topic t always convert on ad t.

    The remaining ads carry unrelated words, so every candidate grid is
    separable by topic.
    """
    rng = np.random.default_rng(seed)
    from mcsbn.featurize import ChannelSequence, Session, CHANNELS
    words = {0: [1, 2, 3], 1: [4, 5, 6]}
    ad_tokens = {"ad0": [1, 2, 7], "ad1": [4, 5, 8]}
    ad_tokens.update({f"ad{i}": [9 + i % 3, 11] for i in range(2, n_ads)})
    examples = []
    for u in range(n_users):
        t = u % 2
        for r in range(8):
            chans = tuple(ChannelSequence(c, (Session(100 + r, tuple(sorted(rng.choice(words[t], 2, replace=False)))),))
                          for c in CHANNELS)
            examples.append(TrainingExample(f"u{u}", T0 + r, chans, f"ad{t}"))
    return examples, ad_tokens


def test_train_zero_steps_returns_init():
    ex, ads = _separable_task()
    cfg = TrainConfig(d=8, batch_size=16, max_steps=0, negatives=2, val_fraction=0.2, attention_hidden=4, word_dim=4)
    p, rep = train(ex, ads, 12, cfg)
    init = ModelParams.init("mcsbn", 12, 8, np.random.default_rng([0, 2]), 4, 4)
    assert p.fingerprint() == init.fingerprint()
    assert rep.steps == 0 and len(rep.val_auc) == 1


def test_train_separable_task_learns_and_is_deterministic(tmp_path):
    ex, ads = _separable_task()
    # full batch: only the sampled negatives add noise to the loss curve
    cfg = TrainConfig(d=8, batch_size=64, max_steps=100, negatives=2, val_fraction=0.2, eval_every=25,
                      lr=0.01, attention_hidden=4, word_dim=4, sampler="uniform", patience=50)
    p, rep = train(ex, ads, 12, cfg)
    assert rep.train_examples == 64
    blocks = np.asarray(rep.losses[:50]).reshape(5, 10).mean(axis=1)
    assert np.all(np.diff(blocks) < 0)
    assert np.mean(np.diff(rep.losses[:50]) < 0) > 0.9
    assert rep.val_auc[-1][1] > 0.9
    p2, rep2 = train(ex, ads, 12, cfg)
    assert p2.fingerprint() == p.fingerprint() and rep2.losses == rep.losses
    save_checkpoint(tmp_path / "a.ckpt", {"variant": "mcsbn"}, p.tensors())
    save_checkpoint(tmp_path / "b.ckpt", {"variant": "mcsbn"}, p2.tensors())
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert load_checkpoint(tmp_path / "a.ckpt").model().fingerprint() == p.fingerprint()


def test_train_aborts_on_divergence(monkeypatch):
    import mcsbn.training as tr
    real = tr.full_loss
    calls = []

    def flaky(*args):
        calls.append(1)
        loss, grads = real(*args)
        return (float("nan") if len(calls) == 4 else loss), grads

    monkeypatch.setattr(tr, "full_loss", flaky)
    ex, ads = _separable_task()
    cfg = TrainConfig(d=8, batch_size=16, max_steps=40, negatives=2, val_fraction=0.2, attention_hidden=4, word_dim=4)
    with pytest.raises(tr.TrainingDiverged, match="step 4"):
        train(ex, ads, 12, cfg)


# ---------------------------------------------------------------- bag of words


def test_bow_identical_and_disjoint():
    idf = build_idf([["a", "b"], ["b", "c"], ["d"]])
    assert bow_tfidf_score("a b c", "a b c", idf) == pytest.approx(1.0)
    assert bow_tfidf_score("a b", "c d", idf) == 0.0
    assert bow_tfidf_score("", "a", idf) == 0.0


def test_bow_hand_computation():
    idf = IdfTable(n_docs=3, df={"x": 2, "y": 1, "z": 0})
    w = {t: math.log(4 / (idf.df.get(t, 0) + 1)) + 1 for t in "xyz"}
    u = {"x": 2 * w["x"], "y": w["y"]}
    a = {"x": w["x"], "z": w["z"]}
    want = u["x"] * a["x"] / (math.sqrt(sum(v * v for v in u.values())) * math.sqrt(sum(v * v for v in a.values())))
    assert bow_tfidf_score(["x", "x", "y"], ["x", "z"], idf) == pytest.approx(want, rel=1e-12)
    assert idf.idf("y") == pytest.approx(math.log(2) + 1)
