"""Bi-directional GRU ad encoder, dot-product scoring and the ad-vector cache."""
from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nncore import GruParams, ShapeError, gru_backward, gru_forward, gru_step_projected, input_projections

WORD_DIM = 64
MAX_AD_TOKENS = 64


class InvalidAdError(ValueError):
    pass


@dataclass
class AdEncoderParams:
    word_embeddings: np.ndarray  # (V, d_w)
    forward_gru: GruParams
    backward_gru: GruParams

    def __post_init__(self):
        d_w = self.word_embeddings.shape[1]
        for g in (self.forward_gru, self.backward_gru):
            if g.input_size != d_w:
                raise ShapeError(f"ad GRU input {g.input_size} != word dim {d_w}")
        if self.forward_gru.hidden_size != self.backward_gru.hidden_size:
            raise ShapeError("forward and backward GRUs must share hidden size")

    @property
    def dim(self) -> int:
        return 2 * self.forward_gru.hidden_size

    @property
    def vocab_size(self) -> int:
        return self.word_embeddings.shape[0]

    @classmethod
    def init(cls, vocab_size: int, d: int, rng: np.random.Generator, word_dim: int = WORD_DIM, dtype=np.float32):
        if d % 2:
            raise ValueError("ad vector dimension must be even")
        emb = rng.uniform(-0.1, 0.1, size=(vocab_size, word_dim)).astype(dtype)
        return cls(emb, GruParams.init(word_dim, d // 2, rng, dtype), GruParams.init(word_dim, d // 2, rng, dtype))

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"ad.emb": self.word_embeddings}
        out.update({f"ad.fwd.{n}": a for n, a in self.forward_gru.tensors().items()})
        out.update({f"ad.bwd.{n}": a for n, a in self.backward_gru.tensors().items()})
        return out

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray]) -> "AdEncoderParams":
        names = GruParams.__dataclass_fields__
        return cls(t["ad.emb"], GruParams(**{n: t[f"ad.fwd.{n}"] for n in names}),
                   GruParams(**{n: t[f"ad.bwd.{n}"] for n in names}))


def _check_tokens(tokens: Sequence[int], vocab_size: int, max_tokens: int) -> list[int]:
    tokens = list(tokens)[:max_tokens]
    if not tokens:
        raise InvalidAdError("ad has no tokens")
    if min(tokens) < 0 or max(tokens) >= vocab_size:
        raise InvalidAdError("ad token index out of range")
    return tokens


def _padded(token_lists: Sequence[Sequence[int]], reverse: bool):
    L = max(len(t) for t in token_lists)
    ids = np.zeros((len(token_lists), L), dtype=np.int64)
    mask = np.zeros((len(token_lists), L), dtype=np.float32)
    for i, t in enumerate(token_lists):
        seq = t[::-1] if reverse else t
        ids[i, : len(seq)] = seq
        mask[i, : len(seq)] = 1
    return ids, mask


def encode_ads(params: AdEncoderParams, token_lists: Sequence[Sequence[int]], max_tokens: int = MAX_AD_TOKENS) -> np.ndarray:
    """Encode many ads; row i is bitwise identical to ``encode_ad(token_lists[i])``."""
    lists = [_check_tokens(t, params.vocab_size, max_tokens) for t in token_lists]
    # each distinct token is projected once; rows only step while they have tokens left
    vocab, flat = np.unique(np.concatenate([np.asarray(t, dtype=np.int64) for t in lists]), return_inverse=True)
    offsets = np.cumsum([0] + [len(t) for t in lists])
    local = [flat[offsets[i] : offsets[i + 1]] for i in range(len(lists))]
    x = params.word_embeddings[vocab]
    halves = []
    for gru, reverse in ((params.forward_gru, False), (params.backward_gru, True)):
        proj = input_projections(gru, x)
        ids, mask = _padded(local, reverse)
        h = np.zeros((len(lists), gru.hidden_size), dtype=gru.W_z.dtype)
        for t in range(ids.shape[1]):
            rows = np.flatnonzero(mask[:, t])
            col = ids[rows, t]
            h[rows] = gru_step_projected(gru, *(pr[col] for pr in proj), h[rows])
        halves.append(h)
    return np.concatenate(halves, axis=1)


def encode_ad(params: AdEncoderParams, token_indices: Sequence[int], max_tokens: int = MAX_AD_TOKENS) -> np.ndarray:
    """h_a = [forward GRU final state ; backward GRU final state]."""
    return encode_ads(params, [token_indices], max_tokens)[0]


def score(h_u: np.ndarray, h_a: np.ndarray) -> float:
    if np.shape(h_u) != np.shape(h_a):
        raise ShapeError(f"score: dimension mismatch {np.shape(h_u)} vs {np.shape(h_a)}")
    return float((np.asarray(h_u, dtype=np.float64) * np.asarray(h_a, dtype=np.float64)).sum())


def score_many(h_u: np.ndarray, ad_matrix: np.ndarray) -> np.ndarray:
    """Row-wise dot products in float64; row i equals ``score(h_u, ad_matrix[i])``."""
    return (np.asarray(ad_matrix, dtype=np.float64) * np.asarray(h_u, dtype=np.float64)).sum(axis=1)


@dataclass(frozen=True)
class AdVector:
    ad_id: str
    h_a: np.ndarray


class AdCache:
    """Bounded LRU map ad_id -> AdVector, tagged with a model version.

    Reads are lock-free; inserts and evictions take a lock (single writer).
    """

    def __init__(self, capacity: int = 100_000, model_version: str = ""):
        if capacity < 1:
            raise ValueError("cache capacity must be >= 1")
        self.capacity = capacity
        self.model_version = model_version
        self._entries: OrderedDict[str, AdVector] = OrderedDict()
        self._lock = threading.Lock()
        self.encoder_calls = 0

    def __len__(self):
        return len(self._entries)

    def __contains__(self, ad_id):
        return ad_id in self._entries

    def set_model_version(self, version: str) -> None:
        with self._lock:
            if version != self.model_version:
                self._entries.clear()
                self.model_version = version

    def get(self, ad_id: str) -> AdVector | None:
        v = self._entries.get(ad_id)
        if v is not None:
            try:
                self._entries.move_to_end(ad_id)
            except KeyError:
                pass
        return v

    def put(self, vec: AdVector) -> None:
        with self._lock:
            self._entries[vec.ad_id] = vec
            self._entries.move_to_end(vec.ad_id)
            while len(self._entries) > self.capacity:
                self._entries.popitem(last=False)


def cached_encode(cache: AdCache, params: AdEncoderParams, ad_id: str, tokens: Sequence[int],
                  model_version: str | None = None) -> AdVector:
    if model_version is not None:
        cache.set_model_version(model_version)
    hit = cache.get(ad_id)
    if hit is not None:
        return hit
    cache.encoder_calls += 1
    vec = AdVector(ad_id, encode_ad(params, tokens))
    cache.put(vec)
    return vec


def cached_encode_many(cache: AdCache, params: AdEncoderParams, items: Sequence[tuple[str, Sequence[int]]],
                       model_version: str | None = None) -> list[AdVector]:
    """Batch form of ``cached_encode``; misses are encoded together."""
    if model_version is not None:
        cache.set_model_version(model_version)
    out: list[AdVector | None] = [cache.get(ad_id) for ad_id, _ in items]
    miss = {}
    for i, (ad_id, tokens) in enumerate(items):
        if out[i] is None and ad_id not in miss:
            miss[ad_id] = tokens
    if miss:
        cache.encoder_calls += len(miss)
        H = encode_ads(params, list(miss.values()))
        fresh = {ad_id: AdVector(ad_id, H[j]) for j, ad_id in enumerate(miss)}
        for vec in fresh.values():
            cache.put(vec)
        out = [o if o is not None else fresh[items[i][0]] for i, o in enumerate(out)]
    return out


# --------------------------------------------------------------------------
# Batched training path
# --------------------------------------------------------------------------


def forward_batch(params: AdEncoderParams, token_lists: Sequence[Sequence[int]], train: bool = True):
    """Encode a batch of (already truncated, nonempty) token lists for training."""
    halves, caches = [], []
    for gru, reverse in ((params.forward_gru, False), (params.backward_gru, True)):
        ids, mask = _padded(token_lists, reverse)
        x = params.word_embeddings[ids.reshape(-1)]
        h, c = gru_forward(gru, x, mask.astype(gru.W_z.dtype))
        halves.append(h)
        caches.append((ids, c))
    h_a = np.concatenate(halves, axis=1)
    return (h_a, caches) if train else h_a


def backward_batch(params: AdEncoderParams, caches, dh_a: np.ndarray) -> dict[str, np.ndarray]:
    half = params.forward_gru.hidden_size
    d_emb = np.zeros_like(params.word_embeddings)
    grads = {}
    for (ids, c), gru, name, sl in ((caches[0], params.forward_gru, "fwd", slice(0, half)),
                                     (caches[1], params.backward_gru, "bwd", slice(half, 2 * half))):
        g, dx, _ = gru_backward(gru, c, dh_a[:, sl], need_input_grad=True)
        np.add.at(d_emb, ids.reshape(-1), dx)
        grads.update({f"ad.{name}.{n}": a for n, a in g.tensors().items()})
    grads["ad.emb"] = d_emb
    return grads
