"""Seeded topic-model generator for event logs, an ad catalog and interactions.

Every topic owns disjoint word sets for pages, queries and ad text (the
clicked-ads channel draws from the ad-text words). A user follows 1-3
topics; one of them is active each day and drifts slowly. Each event word
comes from the active topic with the channel's fidelity, otherwise it is a
noise word drawn from the channel's whole word list. Positives are ads of
the topic active when they happen.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .featurize import CHANNELS, SECONDS_PER_DAY, write_jsonl

START_TS = 1_700_006_400  # 2023-11-15T00:00:00Z
_PREFIX = {"page": "p", "query": "q", "ad_click": "a"}


class InfeasibleConfig(ValueError):
    pass


@dataclass
class SyntheticConfig:
    num_users: int = 10_000
    num_ads: int = 2_000
    num_topics: int = 20
    days: int = 14
    seed: int = 0
    words_per_topic: int = 30
    filler_words: int = 100
    event_rate: dict = field(default_factory=lambda: {"page": 1.5, "query": 0.8, "ad_click": 0.4})
    fidelity: dict = field(default_factory=lambda: {"page": 0.4, "query": 0.3, "ad_click": 0.4})
    fidelity_spread: float = 0.3
    topic_switch_prob: float = 0.05
    max_user_topics: int = 3
    positives_per_user: int = 2
    clicks_per_user: int = 1
    ads_per_advertiser: int = 10
    vocab_budget: int = 100_000
    start_ts: int = START_TS

    def __post_init__(self):
        for name in ("num_users", "num_ads", "num_topics", "days", "words_per_topic", "max_user_topics",
                     "ads_per_advertiser"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.filler_words < 0 or self.positives_per_user < 0 or self.clicks_per_user < 0:
            raise ValueError("counts must be nonnegative")
        for c in CHANNELS:
            if not 0.0 <= self.fidelity[c] <= 1.0:
                raise ValueError(f"fidelity[{c}] must be in [0, 1]")
            if self.event_rate[c] < 0:
                raise ValueError(f"event_rate[{c}] must be nonnegative")
        for name in ("fidelity_spread", "topic_switch_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.start_ts % SECONDS_PER_DAY:
            raise ValueError("start_ts must be a UTC midnight")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticData:
    events: list[dict]
    ads: list[dict]
    interactions: list[dict]
    user_topics: dict[str, list[int]]
    ad_topic: dict[str, int]


def _words(prefix: str, topic: int, n: int) -> list[str]:
    return [f"{prefix}{topic}w{i}" for i in range(n)]


def gen_synthetic(config: SyntheticConfig) -> SyntheticData:
    c = config
    vocab_needed = c.num_topics * c.words_per_topic * 3 + c.filler_words * 3
    if vocab_needed > c.vocab_budget:
        raise InfeasibleConfig(f"needs {vocab_needed} distinct words, budget is {c.vocab_budget}")
    if c.num_ads < c.num_topics:
        raise InfeasibleConfig("need at least one ad per topic")
    if c.max_user_topics > c.num_topics:
        raise InfeasibleConfig("max_user_topics exceeds num_topics")
    rng = np.random.default_rng(c.seed)

    topic_words = {ch: [_words(_PREFIX[ch], t, c.words_per_topic) for t in range(c.num_topics)] for ch in ("page", "query")}
    topic_words["ad_click"] = [_words("a", t, c.words_per_topic) for t in range(c.num_topics)]
    noise_pool = {
        ch: [w for ws in topic_words[ch] for w in ws] + [f"{_PREFIX[ch]}n{i}" for i in range(c.filler_words)]
        for ch in CHANNELS
    }

    # ads: round-robin topics, Zipf-like popularity within a topic
    ad_topic = {}
    ads = []
    for i in range(c.num_ads):
        t = i % c.num_topics
        ad_id = f"ad{i:05d}"
        ad_topic[ad_id] = t
        n_words = int(rng.integers(4, 11))
        text = " ".join(rng.choice(topic_words["ad_click"][t], size=n_words))
        ads.append({"ad_id": ad_id, "text": text, "advertiser_id": f"adv{t:03d}_{(i // c.num_topics) // c.ads_per_advertiser:03d}"})
    by_topic = [[a["ad_id"] for a in ads if ad_topic[a["ad_id"]] == t] for t in range(c.num_topics)]
    popularity = [1.0 / np.arange(1, len(ids) + 1) for ids in by_topic]
    popularity = [p / p.sum() for p in popularity]
    ad_advertiser = {a["ad_id"]: a["advertiser_id"] for a in ads}

    lengths = {"page": (3, 7), "query": (1, 4), "ad_click": (4, 9)}
    events, interactions, user_topics = [], [], {}
    for u in range(c.num_users):
        uid = f"u{u:06d}"
        n_topics = int(rng.integers(1, c.max_user_topics + 1))
        topics = [int(t) for t in rng.choice(c.num_topics, size=n_topics, replace=False)]
        user_topics[uid] = topics
        active = np.empty(c.days, dtype=np.int64)
        active[0] = topics[int(rng.integers(n_topics))]
        for day in range(1, c.days):
            if n_topics > 1 and rng.random() < c.topic_switch_prob:
                active[day] = rng.choice([t for t in topics if t != active[day - 1]])
            else:
                active[day] = active[day - 1]
        for ch in CHANNELS:
            fid = float(np.clip(c.fidelity[ch] + rng.uniform(-c.fidelity_spread, c.fidelity_spread), 0.0, 1.0))
            rate = c.event_rate[ch] * float(rng.lognormal(0.0, 0.5))
            counts = rng.poisson(rate, size=c.days)
            lo, hi = lengths[ch]
            pool = noise_pool[ch]
            for day in range(c.days):
                for _ in range(counts[day]):
                    ts = c.start_ts + day * SECONDS_PER_DAY + int(rng.integers(SECONDS_PER_DAY))
                    n = int(rng.integers(lo, hi))
                    own = rng.random(n) < fid
                    topic_pick = rng.integers(c.words_per_topic, size=n)
                    noise_pick = rng.integers(len(pool), size=n)
                    words = [topic_words[ch][active[day]][topic_pick[j]] if own[j] else pool[noise_pick[j]]
                             for j in range(n)]
                    events.append({"user_id": uid, "ts": ts, "channel": ch, "text": " ".join(words)})
        half = c.days // 2
        for _ in range(c.positives_per_user):
            day = int(rng.integers(half, c.days))
            ts = c.start_ts + day * SECONDS_PER_DAY + int(rng.integers(SECONDS_PER_DAY))
            t = int(active[day])
            ad_id = by_topic[t][int(rng.choice(len(by_topic[t]), p=popularity[t]))]
            interactions.append({"user_id": uid, "ad_id": ad_id, "ts": ts, "label": 1,
                                 "advertiser_id": ad_advertiser[ad_id]})
        for _ in range(c.clicks_per_user):
            ts = c.start_ts + int(rng.integers(c.days * SECONDS_PER_DAY))
            ad_id = ads[int(rng.integers(c.num_ads))]["ad_id"]
            interactions.append({"user_id": uid, "ad_id": ad_id, "ts": ts, "label": 0,
                                 "advertiser_id": ad_advertiser[ad_id]})

    events.sort(key=lambda e: (e["ts"], e["user_id"], e["channel"], e["text"]))
    interactions.sort(key=lambda r: (r["ts"], r["user_id"], r["ad_id"], r["label"]))
    return SyntheticData(events, ads, interactions, user_topics, ad_topic)


def write_synthetic(config: SyntheticConfig, out_dir) -> SyntheticData:
    """Generate and write events.jsonl, ads.jsonl, interactions.jsonl and manifest.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = gen_synthetic(config)
    write_jsonl(out / "events.jsonl", data.events)
    write_jsonl(out / "ads.jsonl", data.ads)
    write_jsonl(out / "interactions.jsonl", data.interactions)
    (out / "manifest.json").write_text(json.dumps({"seed": config.seed, "config": config.to_dict()},
                                                  sort_keys=True, indent=2) + "\n")
    return data
