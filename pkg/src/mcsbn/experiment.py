"""In-memory experiment pipeline: synthetic data to per-variant metrics.

Mirrors the CLI stages (vocab, examples, user split, train, eval) without
the intermediate files, for the ablation and attention scripts.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .featurize import Event, Vocab, build_vocab
from .metrics import MetricsReport, evaluate_ranking
from .model import BowScorer, ModelScorer
from .synthetic import SyntheticConfig, gen_synthetic
from .training import TrainConfig, TrainingExample, TrainReport, build_examples, build_idf, idf_vector, split_by_user, train

log = logging.getLogger(__name__)

SEQ_VARIANTS = ("seq-avg", "seq-max", "seq-hid")
ABLATION_VARIANTS = ("mcsbn", *SEQ_VARIANTS, "pool-max", "pool-last")
TIE_SLACK = 0.005
MIN_GAP = 0.02


@dataclass
class Prepared:
    vocab: Vocab
    train: list[TrainingExample]
    test: list[TrainingExample]
    ad_tokens: dict[str, list[int]]
    advertiser_of: dict[str, str]
    seconds: float = 0.0


def prepare(synth: SyntheticConfig, cfg: TrainConfig, test_fraction: float = 0.1,
            min_frequency: int = 3) -> Prepared:
    t0 = time.perf_counter()
    data = gen_synthetic(synth)
    events = [Event(**e) for e in data.events]
    vocab = build_vocab([e.text for e in events] + [a["text"] for a in data.ads], min_frequency)
    examples, _ = build_examples(data.interactions, events, vocab, cfg)
    train_part, test_part = split_by_user(examples, test_fraction, cfg.seed + 1000)
    ad_tokens = {a["ad_id"]: vocab.encode(a["text"]) for a in data.ads}
    ad_tokens = {a: t for a, t in ad_tokens.items() if t}
    advertiser_of = {a["ad_id"]: a["advertiser_id"] for a in data.ads}
    return Prepared(vocab, train_part, test_part, ad_tokens, advertiser_of, time.perf_counter() - t0)


def bow_idf(examples, ad_tokens: dict, vocab_size: int) -> np.ndarray:
    """idf over training user documents plus ad texts."""
    docs = [np.concatenate([p[0] for p in e.packed()]).tolist() for e in examples]
    docs += list(ad_tokens.values())
    return idf_vector(build_idf(docs), vocab_size)


@dataclass
class VariantResult:
    variant: str
    metrics: MetricsReport
    seconds: float
    train_report: TrainReport | None = None
    mean_attention: list[float] | None = None

    def row(self) -> dict:
        out = {"variant": self.variant, **self.metrics.to_dict(), "seconds": round(self.seconds, 1)}
        if self.train_report is not None:
            out["steps"] = self.train_report.steps
            out["best_val_auc"] = self.train_report.best_auc
        return out


def evaluate_variant(variant: str, prep: Prepared, cfg: TrainConfig, m: int = 20, seed: int = 0) -> VariantResult:
    t0 = time.perf_counter()
    report = None
    attention = None
    test = [e for e in prep.test if e.positive_ad_id in prep.ad_tokens]
    packed = [e.packed() for e in test]
    if variant == "bow":
        scorer = BowScorer(bow_idf(prep.train, prep.ad_tokens, len(prep.vocab)), prep.ad_tokens)
    else:
        params, report = train(prep.train, prep.ad_tokens, len(prep.vocab), cfg, variant=variant)
        scorer = ModelScorer(params, prep.ad_tokens)
        if variant in ("mcsbn", "pool-last", "pool-max"):
            attention = scorer.attention(packed).mean(axis=0).tolist()
    ad_ids = sorted(prep.ad_tokens)
    metrics = evaluate_ranking(scorer, test, packed, ad_ids, np.ones(len(ad_ids)), m=m, seed=seed,
                               advertiser_of=prep.advertiser_of)
    res = VariantResult(variant, metrics, time.perf_counter() - t0, report, attention)
    log.info("%s auc %.4f mrr %.4f (%.0fs)", variant, metrics.auc, metrics.mrr, res.seconds)
    return res


@dataclass
class OrderingCheck:
    passed: bool
    checks: list[tuple[str, bool]] = field(default_factory=list)


def check_ordering(auc: dict[str, float], slack: float = TIE_SLACK, min_gap: float = MIN_GAP) -> OrderingCheck:
    """MC-SBN >= max(Seq) >= Pool-Max >= Pool-Last, MC-SBN - Pool-Last >= min_gap.

    ``slack`` only relaxes the comparison between MC-SBN and the best Seq
    variant, where near-ties are expected.
    """
    best_seq = max(auc[v] for v in SEQ_VARIANTS)
    checks = [
        (f"mcsbn {auc['mcsbn']:.4f} >= max(seq) {best_seq:.4f} - {slack}", auc["mcsbn"] >= best_seq - slack),
        (f"max(seq) {best_seq:.4f} >= pool-max {auc['pool-max']:.4f}", best_seq >= auc["pool-max"]),
        (f"pool-max {auc['pool-max']:.4f} >= pool-last {auc['pool-last']:.4f}", auc["pool-max"] >= auc["pool-last"]),
        (f"mcsbn - pool-last = {auc['mcsbn'] - auc['pool-last']:.4f} >= {min_gap}",
         auc["mcsbn"] - auc["pool-last"] >= min_gap),
    ]
    return OrderingCheck(all(ok for _, ok in checks), checks)


def ablation_budget(**overrides) -> TrainConfig:
    """The shared training budget for the variant comparison."""
    base = dict(d=128, batch_size=512, max_steps=600, eval_every=60, patience=5, negatives=10, lr=3e-3)
    base.update(overrides)
    return TrainConfig(**base)


def channel_probe_config(seed: int = 0) -> SyntheticConfig:
    """Pages informative, queries and ad clicks mostly noise."""
    return SyntheticConfig(num_users=3000, num_ads=600, num_topics=20, seed=seed,
                           fidelity={"page": 0.9, "query": 0.1, "ad_click": 0.1}, fidelity_spread=0.0)
