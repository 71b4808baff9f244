"""Example construction, negative sampling, the negative-sampling loss and
the mini-batch Adam training loop with AUC-based early stopping."""
from __future__ import annotations

import bisect
import logging
import math
import time
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import ad_encoder, user_encoder
from .featurize import CHANNELS, SECONDS_PER_DAY, ChannelSequence, Event, Session, Vocab, iter_jsonl, tokenize
from .metrics import auc
from .model import ModelParams, ModelScorer
from .nncore import AdamState, adam_update, sigmoid
from .sampling import NegativeSampler
from .user_encoder import Packed, build_user_batch, pack_sequence

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    d: int = 128
    batch_size: int = 512
    max_steps: int = 100_000
    negatives: int = 10
    delta_seconds: int = 3600
    lookback_days: int = 14
    max_sessions: int = 14
    patience: int = 5
    eval_every: int = 500
    val_fraction: float = 0.05
    val_negatives: int = 20
    lr: float = 1e-3
    attention_hidden: int = 64
    word_dim: int = 64
    max_ad_tokens: int = 64
    sampler: str = "frequency"
    seed: int = 0

    def __post_init__(self):
        for name in ("d", "batch_size", "negatives", "lookback_days", "max_sessions", "patience", "eval_every",
                     "val_negatives", "attention_hidden", "word_dim", "max_ad_tokens"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_steps < 0 or self.delta_seconds < 0:
            raise ValueError("max_steps and delta_seconds must be >= 0")
        if not 0 < self.val_fraction < 0.5:
            raise ValueError("val_fraction must be in (0, 0.5)")
        if self.sampler not in ("frequency", "uniform"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.d % 2:
            raise ValueError("d must be even (bi-GRU halves)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class Interaction:
    user_id: str
    ad_id: str
    ts: int
    label: int
    advertiser_id: str = ""


def interaction_from_dict(row: dict) -> Interaction:
    ts, label = row["ts"], row["label"]
    if isinstance(ts, bool) or not isinstance(ts, (int, float)) or ts <= 0:
        raise ValueError("bad ts")
    if label not in (0, 1):
        raise ValueError("bad label")
    return Interaction(str(row["user_id"]), str(row["ad_id"]), int(ts), int(label), str(row.get("advertiser_id", "")))


def read_interactions(path) -> tuple[list[dict | None], int]:
    """Raw interaction rows; unparsable lines come back as None."""
    rows = [row for _, row in iter_jsonl(path)]
    return rows, sum(r is None for r in rows)


@dataclass(frozen=True)
class TrainingExample:
    user_id: str
    anchor_ts: int
    channels: tuple[ChannelSequence, ...]
    positive_ad_id: str

    def packed(self) -> list[Packed]:
        return [pack_sequence(s) for s in self.channels]

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "anchor_ts": self.anchor_ts,
            "positive_ad_id": self.positive_ad_id,
            "channels": {s.channel: [[x.day_index, list(x.indices)] for x in s.sessions] for s in self.channels},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingExample":
        chans = tuple(
            ChannelSequence(c, tuple(Session(int(day), tuple(ix)) for day, ix in d["channels"].get(c, [])))
            for c in CHANNELS
        )
        return cls(str(d["user_id"]), int(d["anchor_ts"]), chans, str(d["positive_ad_id"]))


@dataclass
class BuildReport:
    rows: int = 0
    positives: int = 0
    examples: int = 0
    malformed: int = 0
    skipped_unlabeled: int = 0


class _UserHistory:
    """One user's events, tokenized once and sorted per channel."""

    def __init__(self):
        self.ts = [[] for _ in CHANNELS]
        self.ix = [[] for _ in CHANNELS]

    def sessions(self, k: int, lo: float, hi: float, max_sessions: int) -> ChannelSequence:
        ts = self.ts[k]
        a = bisect.bisect_left(ts, lo)
        b = bisect.bisect_left(ts, hi)
        days: dict[int, set[int]] = {}
        for i in range(a, b):
            days.setdefault(ts[i] // SECONDS_PER_DAY, set()).update(self.ix[k][i])
        sessions = tuple(Session(day, tuple(sorted(s))) for day, s in sorted(days.items()))
        return ChannelSequence(CHANNELS[k], sessions[-max_sessions:])


def index_histories(events: Iterable[Event], vocab: Vocab) -> dict[str, _UserHistory]:
    cache: dict[str, tuple[int, ...]] = {}
    raw = defaultdict(list)
    for e in events:
        raw[e.user_id].append(e)
    out = {}
    ch_index = {c: i for i, c in enumerate(CHANNELS)}
    for uid, evs in raw.items():
        hist = _UserHistory()
        for e in sorted(evs, key=lambda e: (e.ts, e.channel, e.text)):
            ix = cache.get(e.text)
            if ix is None:
                ix = cache[e.text] = tuple(vocab.encode(e.text))
            k = ch_index[e.channel]
            hist.ts[k].append(e.ts)
            hist.ix[k].append(ix)
        out[uid] = hist
    return out


def build_examples(interactions: Iterable[dict | Interaction | None], events: Iterable[Event], vocab: Vocab,
                   config: TrainConfig) -> tuple[list[TrainingExample], BuildReport]:
    """One example per positive interaction, history clipped to
    ``[anchor - lookback, anchor - delta)`` and segmented into daily sessions."""
    report = BuildReport()
    histories = index_histories(events, vocab)
    empty = _UserHistory()
    out = []
    for row in interactions:
        report.rows += 1
        if not isinstance(row, Interaction):
            try:
                row = interaction_from_dict(row)
            except (TypeError, KeyError, ValueError):
                report.malformed += 1
                continue
        if row.label != 1:
            report.skipped_unlabeled += 1
            continue
        report.positives += 1
        hist = histories.get(row.user_id, empty)
        lo = row.ts - config.lookback_days * SECONDS_PER_DAY
        hi = row.ts - config.delta_seconds
        chans = tuple(hist.sessions(k, lo, hi, config.max_sessions) for k in range(len(CHANNELS)))
        out.append(TrainingExample(row.user_id, row.ts, chans, row.ad_id))
    report.examples = len(out)
    return out, report


# --------------------------------------------------------------------------
# Loss
# --------------------------------------------------------------------------


@dataclass
class NsLoss:
    loss: float
    d_user: np.ndarray
    d_positive: np.ndarray
    d_negatives: np.ndarray


def ns_loss(user_vec: np.ndarray, positive_ad_vec: np.ndarray, negative_ad_vecs: np.ndarray) -> NsLoss:
    """-log sigma(S+) - sum_i log sigma(-S-_i) with S the dot product."""
    u = np.asarray(user_vec, dtype=np.float64)
    a = np.asarray(positive_ad_vec, dtype=np.float64)
    negs = np.atleast_2d(np.asarray(negative_ad_vecs, dtype=np.float64))
    if negs.shape[0] < 1:
        raise ValueError("ns_loss needs at least one negative")
    s_pos = float(u @ a)
    s_neg = negs @ u
    if not (np.isfinite(s_pos) and np.all(np.isfinite(s_neg))):
        raise FloatingPointError("ns_loss: non-finite scores")
    loss = float(np.logaddexp(0.0, -s_pos) + np.logaddexp(0.0, s_neg).sum())
    g_pos = -sigmoid(-s_pos)
    g_neg = sigmoid(s_neg)
    return NsLoss(loss, g_pos * a + g_neg @ negs, g_pos * u, g_neg[:, None] * u[None, :])


def ns_loss_batch(h_u: np.ndarray, ads: np.ndarray, pos: np.ndarray, neg: np.ndarray):
    """Mean loss over a batch; ``pos`` (B,) and ``neg`` (B, k) index rows of ``ads``.

    Returns ``(loss, d_h_u, d_ads)``.
    """
    B = h_u.shape[0]
    A_pos = ads[pos]
    A_neg = ads[neg]
    s_pos = np.einsum("bd,bd->b", h_u, A_pos)
    s_neg = np.einsum("bd,bkd->bk", h_u, A_neg)
    loss = float((np.logaddexp(0.0, -s_pos.astype(np.float64)).sum()
                  + np.logaddexp(0.0, s_neg.astype(np.float64)).sum()) / B)
    g_pos = (-sigmoid(-s_pos) / B).astype(h_u.dtype)
    g_neg = (sigmoid(s_neg) / B).astype(h_u.dtype)
    d_u = g_pos[:, None] * A_pos + np.einsum("bk,bkd->bd", g_neg, A_neg)
    d_ads = np.zeros_like(ads)
    np.add.at(d_ads, pos, g_pos[:, None] * h_u)
    np.add.at(d_ads, neg.reshape(-1), (g_neg[:, :, None] * h_u[:, None, :]).reshape(-1, h_u.shape[1]))
    return loss, d_u, d_ads


def full_loss(params: ModelParams, packed: Sequence[Sequence[Packed]], ad_token_lists: Sequence[Sequence[int]],
              pos: np.ndarray, neg: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and gradients of every tensor for one batch (used by training and grad checks)."""
    batch = build_user_batch(packed, params.vocab_size, dtype=params.ad.word_embeddings.dtype)
    h_u, ucache = user_encoder.forward_batch(params.user, batch)
    h_a, acache = ad_encoder.forward_batch(params.ad, ad_token_lists)
    loss, d_u, d_a = ns_loss_batch(h_u, h_a, pos, neg)
    grads = user_encoder.backward_batch(params.user, batch, ucache, d_u)
    grads.update(ad_encoder.backward_batch(params.ad, acache, d_a))
    return loss, grads


def batch_loss(params: ModelParams, packed: Sequence[Sequence[Packed]], ad_token_lists: Sequence[Sequence[int]],
               pos: np.ndarray, neg: np.ndarray) -> float:
    """Forward-only ``full_loss`` (no caches, no gradients)."""
    batch = build_user_batch(packed, params.vocab_size, dtype=params.ad.word_embeddings.dtype)
    h_u = user_encoder.forward_batch(params.user, batch, train=False)
    h_a = ad_encoder.forward_batch(params.ad, ad_token_lists, train=False)
    return ns_loss_batch(h_u, h_a, pos, neg)[0]


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainReport:
    variant: str
    steps: int = 0
    losses: list[float] = field(default_factory=list)
    val_auc: list[tuple[int, float]] = field(default_factory=list)
    best_step: int = 0
    best_auc: float = float("nan")
    stopped_early: bool = False
    train_examples: int = 0
    val_examples: int = 0
    seconds: float = 0.0


def split_by_user(examples: Sequence[TrainingExample], fraction: float, seed: int):
    users = sorted({e.user_id for e in examples})
    rng = np.random.default_rng([seed, 1])
    n_val = max(1, int(round(fraction * len(users)))) if len(users) > 1 else 0
    val_users = set(np.asarray(users, dtype=object)[rng.permutation(len(users))[:n_val]])
    train = [e for e in examples if e.user_id not in val_users]
    val = [e for e in examples if e.user_id in val_users]
    return train, val


def candidate_auc(scores: np.ndarray) -> float:
    """Pooled AUC over a candidate grid whose column 0 is the positive."""
    labels = np.zeros(scores.shape, dtype=np.int8)
    labels[:, 0] = 1
    return auc(labels.ravel(), scores.ravel())


def train(examples: Sequence[TrainingExample], ad_tokens: dict[str, list[int]], vocab_size: int,
          config: TrainConfig, variant: str = "mcsbn",
          progress: Callable[[int, float], None] | None = None) -> tuple[ModelParams, TrainReport]:
    """Mini-batch Adam on the negative-sampling loss with early stopping.

    ``ad_tokens`` maps every catalog ad to its (nonempty) token indices.
    Returns the parameters of the best validation checkpoint.
    """
    if not examples:
        raise ValueError("train: no examples")
    t0 = time.perf_counter()
    ad_tokens = {a: list(t)[: config.max_ad_tokens] for a, t in ad_tokens.items() if len(t)}
    examples = [e for e in examples if e.positive_ad_id in ad_tokens]
    train_ex, val_ex = split_by_user(examples, config.val_fraction, config.seed)
    if not train_ex:
        raise ValueError("train: no training examples after the validation split")
    ad_ids = sorted(ad_tokens)
    ad_row = {a: i for i, a in enumerate(ad_ids)}
    token_lists = [ad_tokens[a] for a in ad_ids]

    params = ModelParams.init(variant, vocab_size, config.d, np.random.default_rng([config.seed, 2]),
                              config.attention_hidden, config.word_dim)
    if config.sampler == "frequency":
        sampler = NegativeSampler.frequency(ad_ids, (e.positive_ad_id for e in train_ex), seed=config.seed * 7 + 3)
    else:
        sampler = NegativeSampler.uniform(ad_ids, seed=config.seed * 7 + 3)
    val_sampler = NegativeSampler(ad_ids, sampler.probs, seed=config.seed * 7 + 5)

    packed = [e.packed() for e in train_ex]
    pos_rows = np.array([ad_row[e.positive_ad_id] for e in train_ex])
    val_packed = [e.packed() for e in val_ex]
    val_pos = np.array([ad_row[e.positive_ad_id] for e in val_ex], dtype=np.int64)
    val_grid = np.concatenate([val_pos[:, None], val_sampler.sample_rows(val_pos, config.val_negatives)], axis=1) \
        if val_ex else None

    def validate() -> float:
        if val_grid is None:
            return float("nan")
        scorer = ModelScorer(params, dict(zip(ad_ids, token_lists)))
        cands = np.asarray(ad_ids, dtype=object)[val_grid]
        return candidate_auc(scorer(val_packed, cands))

    report = TrainReport(variant, train_examples=len(train_ex), val_examples=len(val_ex))
    best = params.copy()
    report.best_auc = validate()
    report.val_auc.append((0, report.best_auc))
    stale = 0
    tensors = params.tensors()
    adam = AdamState(lr=config.lr)
    batch_rng = np.random.default_rng([config.seed, 4])
    order = batch_rng.permutation(len(train_ex))
    cursor = 0
    for step in range(1, config.max_steps + 1):
        if cursor + config.batch_size > len(order):
            order = batch_rng.permutation(len(train_ex))
            cursor = 0
        idx = order[cursor : cursor + config.batch_size]
        cursor += config.batch_size
        pos = pos_rows[idx]
        neg = sampler.sample_rows(pos, config.negatives)
        uniq, inverse = np.unique(np.concatenate([pos, neg.ravel()]), return_inverse=True)
        loss, grads = full_loss(params, [packed[i] for i in idx], [token_lists[i] for i in uniq],
                                inverse[: len(idx)], inverse[len(idx):].reshape(neg.shape))
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step} (last finite losses: {report.losses[-3:]})")
        adam_update(adam, tensors, grads)
        report.losses.append(loss)
        report.steps = step
        if progress is not None:
            progress(step, loss)
        if step % config.eval_every == 0 or step == config.max_steps:
            score = validate()
            report.val_auc.append((step, score))
            log.info("step %d loss %.4f val_auc %.4f", step, loss, score)
            if not score <= report.best_auc:  # also true when best is nan
                report.best_auc, report.best_step = score, step
                best = params.copy()
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    report.stopped_early = True
                    break
    report.seconds = time.perf_counter() - t0
    return best, report


# --------------------------------------------------------------------------
# Word-based baseline
# --------------------------------------------------------------------------


@dataclass
class IdfTable:
    n_docs: int
    df: dict

    def idf(self, term) -> float:
        return math.log((self.n_docs + 1) / (self.df.get(term, 0) + 1)) + 1.0


def build_idf(documents: Iterable[Iterable]) -> IdfTable:
    df = Counter()
    n = 0
    for doc in documents:
        df.update(set(doc))
        n += 1
    return IdfTable(n, dict(df))


def bow_tfidf_score(user_terms: Iterable, ad_terms: Iterable, idf: IdfTable) -> float:
    """Cosine similarity of raw-count tf-idf vectors; accepts strings (tokenized) or term lists."""
    if isinstance(user_terms, str):
        user_terms = tokenize(user_terms)
    if isinstance(ad_terms, str):
        ad_terms = tokenize(ad_terms)
    u = {t: c * idf.idf(t) for t, c in Counter(user_terms).items()}
    a = {t: c * idf.idf(t) for t, c in Counter(ad_terms).items()}
    nu = math.sqrt(sum(v * v for v in u.values()))
    na = math.sqrt(sum(v * v for v in a.values()))
    if nu == 0 or na == 0:
        return 0.0
    return sum(v * a[t] for t, v in u.items() if t in a) / (nu * na)


def idf_vector(table: IdfTable, vocab_size: int) -> np.ndarray:
    return np.array([table.idf(i) for i in range(vocab_size)])
