"""Full model parameters, the checkpoint file format, and batch scorers."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import ad_encoder, user_encoder
from .ad_encoder import AdEncoderParams
from .user_encoder import VARIANTS, Packed, UserEncoderParams, build_user_batch

CKPT_MAGIC = b"MCSBCKPT"
CKPT_VERSION = 1
ALL_VARIANTS = VARIANTS + ("bow",)


class CheckpointError(ValueError):
    pass


@dataclass
class ModelParams:
    user: UserEncoderParams
    ad: AdEncoderParams

    @property
    def variant(self) -> str:
        return self.user.variant

    @property
    def dim(self) -> int:
        return self.user.dim

    @property
    def vocab_size(self) -> int:
        return self.ad.vocab_size

    @classmethod
    def init(cls, variant: str, vocab_size: int, d: int, rng: np.random.Generator,
             attention_hidden: int = user_encoder.ATTENTION_HIDDEN, word_dim: int = ad_encoder.WORD_DIM,
             dtype=np.float32) -> "ModelParams":
        user = UserEncoderParams.init(variant, vocab_size, d, rng, attention_hidden, dtype)
        ad = AdEncoderParams.init(vocab_size, d, rng, word_dim, dtype)
        return cls(user, ad)

    def tensors(self) -> dict[str, np.ndarray]:
        """Named views of every trainable array (shared memory, not copies)."""
        out = self.user.tensors()
        out.update(self.ad.tensors())
        return out

    @classmethod
    def from_tensors(cls, variant: str, tensors: dict[str, np.ndarray]) -> "ModelParams":
        return cls(UserEncoderParams.from_tensors(variant, tensors), AdEncoderParams.from_tensors(tensors))

    def copy(self) -> "ModelParams":
        return ModelParams.from_tensors(self.variant, {n: a.copy() for n, a in self.tensors().items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams.from_tensors(self.variant, {n: a.astype(dtype) for n, a in self.tensors().items()})

    def fingerprint(self) -> str:
        return tensor_fingerprint(self.variant, self.tensors())


def tensor_fingerprint(variant: str, tensors: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256(variant.encode())
    for name in sorted(tensors):
        a = np.ascontiguousarray(tensors[name], dtype="<f4")
        h.update(name.encode())
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# Checkpoint IO
# --------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]

    @property
    def variant(self) -> str:
        return self.config.get("variant", "mcsbn")

    def model(self) -> ModelParams:
        if self.variant == "bow":
            raise CheckpointError("bow checkpoints hold an idf table, not neural weights")
        return ModelParams.from_tensors(self.variant, self.tensors)

    @property
    def model_version(self) -> str:
        return tensor_fingerprint(self.variant, self.tensors)


def save_checkpoint(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    parts = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION)]
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<I", len(cfg)))
    parts.append(cfg)
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        a = np.ascontiguousarray(tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<HB", len(nb), a.ndim))
        parts.append(nb)
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()

    def need(pos, n, what):
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated {what} at byte offset {pos} (file has {len(buf)} bytes)")

    need(0, 10, "header")
    if buf[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic at byte offset 0")
    (version,) = struct.unpack_from("<H", buf, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} at byte offset 8")
    pos = 10
    need(pos, 4, "config length")
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    need(pos, n, "config")
    try:
        config = json.loads(buf[pos : pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable config at byte offset {pos}: {e}") from None
    pos += n
    need(pos, 4, "tensor count")
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors = {}
    for i in range(count):
        start = pos
        need(pos, 3, f"tensor record #{i} header")
        name_len, ndim = struct.unpack_from("<HB", buf, pos)
        pos += 3
        need(pos, name_len + 4 * ndim, f"tensor record #{i} name/shape")
        name = buf[pos : pos + name_len].decode("utf-8", errors="replace")
        pos += name_len
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        need(pos, nbytes, f"tensor record #{i} '{name}' (starts at byte offset {start}) data")
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes at byte offset {pos}")
    return Checkpoint(config, tensors)


# --------------------------------------------------------------------------
# Batch scoring
# --------------------------------------------------------------------------


def user_vectors(params: ModelParams, packed: Sequence[Sequence[Packed]], batch_size: int = 1024) -> np.ndarray:
    """User vectors for packed examples via the batched (training) forward."""
    out = np.zeros((len(packed), params.dim), dtype=np.float32)
    for s in range(0, len(packed), batch_size):
        batch = build_user_batch(packed[s : s + batch_size], params.vocab_size)
        out[s : s + batch_size] = user_encoder.forward_batch(params.user, batch, train=False)
    return out


def ad_vectors(params: ModelParams, token_lists: Sequence[Sequence[int]], batch_size: int = 1024) -> np.ndarray:
    out = np.zeros((len(token_lists), params.dim), dtype=np.float32)
    for s in range(0, len(token_lists), batch_size):
        out[s : s + batch_size] = ad_encoder.forward_batch(params.ad, token_lists[s : s + batch_size], train=False)
    return out


class ModelScorer:
    """Scores ``(n, m)`` candidate ad-id grids for n packed examples."""

    def __init__(self, params: ModelParams, ad_tokens: dict[str, list[int]]):
        self.params = params
        self.ad_ids = sorted(ad_tokens)
        self.ad_row = {a: i for i, a in enumerate(self.ad_ids)}
        self.ad_matrix = ad_vectors(params, [ad_tokens[a] for a in self.ad_ids])

    def user_matrix(self, packed) -> np.ndarray:
        return user_vectors(self.params, packed)

    def __call__(self, packed, candidates: np.ndarray) -> np.ndarray:
        U = self.user_matrix(packed).astype(np.float64)
        rows = np.vectorize(self.ad_row.__getitem__, otypes=[np.int64])(candidates)
        A = self.ad_matrix.astype(np.float64)[rows]
        return np.einsum("nd,nmd->nm", U, A)

    def attention(self, packed) -> np.ndarray:
        """Per-example attention weights ``(n, K)`` (attention variants only)."""
        out = []
        for s in range(0, len(packed), 1024):
            batch = build_user_batch(packed[s : s + 1024], self.params.vocab_size)
            _, cache = user_encoder.forward_batch(self.params.user, batch, train=True)
            out.append(cache["alpha"])
        return np.concatenate(out)


class BowScorer:
    """tf-idf cosine between the user's history terms and the ad's terms."""

    def __init__(self, idf: np.ndarray, ad_tokens: dict[str, list[int]]):
        self.idf = np.asarray(idf, dtype=np.float64)
        self.ad_ids = sorted(ad_tokens)
        self.ad_row = {a: i for i, a in enumerate(self.ad_ids)}
        self.ad_matrix = _tfidf_rows([ad_tokens[a] for a in self.ad_ids], self.idf)

    def __call__(self, packed, candidates: np.ndarray) -> np.ndarray:
        docs = [np.concatenate([p[k][0] for k in range(len(p))]) for p in packed]
        U = _tfidf_rows(docs, self.idf)
        rows = np.vectorize(self.ad_row.__getitem__, otypes=[np.int64])(candidates)
        out = np.zeros(candidates.shape)
        for i in range(candidates.shape[0]):
            out[i] = np.asarray((self.ad_matrix[rows[i]] @ U[i].T).todense()).ravel()
        return out


def _tfidf_rows(docs: Sequence[Sequence[int]], idf: np.ndarray) -> sp.csr_matrix:
    """L2-normalised tf-idf rows; empty documents give all-zero rows."""
    V = len(idf)
    counts = sp.csr_matrix(
        (np.ones(sum(len(d) for d in docs)),
         np.concatenate([np.asarray(d, dtype=np.int64) for d in docs]) if docs else np.zeros(0, np.int64),
         np.concatenate([[0], np.cumsum([len(d) for d in docs])]).astype(np.int64)),
        shape=(len(docs), V),
    )
    counts.sum_duplicates()
    w = counts.multiply(idf[None, :]).tocsr()
    norms = np.sqrt(np.asarray(w.multiply(w).sum(axis=1)).ravel())
    norms[norms == 0] = 1.0
    return sp.csr_matrix(sp.diags(1.0 / norms) @ w)
