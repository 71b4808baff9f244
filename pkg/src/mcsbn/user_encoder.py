"""Multi-channel user encoder: per-channel GRUs over daily sessions, pooled
by a small attention network, plus the ablation variants and the
incremental (streaming) form of the channel states."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .featurize import CHANNELS, ChannelSequence
from .nncore import (
    FfnParams,
    GruParams,
    ShapeError,
    ffn_backward,
    ffn_forward,
    ffn_forward_train,
    gru_backward,
    gru_forward,
    gru_step_projected,
    gru_step_rows,
    multi_hot,
    sparse_projections,
    stacked_input_weights,
)

K = len(CHANNELS)
VARIANTS = ("mcsbn", "pool-last", "pool-max", "seq-max", "seq-avg", "seq-hid")
GRU_VARIANTS = ("mcsbn", "seq-max", "seq-avg", "seq-hid")
ATTENTION_VARIANTS = ("mcsbn", "pool-last", "pool-max")
ATTENTION_HIDDEN = 64


class LateEventError(ValueError):
    """An event is older than the channel's watermark day."""


@dataclass
class UserEncoderParams:
    variant: str
    channel_grus: list[GruParams] | None = None
    session_nets: list[FfnParams] | None = None
    attention: FfnParams | None = None
    combiner: FfnParams | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant in GRU_VARIANTS and (self.channel_grus is None or len(self.channel_grus) != K):
            raise ValueError(f"{self.variant} needs {K} channel GRUs")
        if self.variant in ("pool-last", "pool-max") and (self.session_nets is None or len(self.session_nets) != K):
            raise ValueError(f"{self.variant} needs {K} session networks")
        if self.variant in ATTENTION_VARIANTS and self.attention is None:
            raise ValueError(f"{self.variant} needs an attention network")
        if self.variant == "seq-hid" and self.combiner is None:
            raise ValueError("seq-hid needs a combiner layer")

    @property
    def dim(self) -> int:
        if self.channel_grus is not None:
            return self.channel_grus[0].hidden_size
        return self.session_nets[0].output_size

    @property
    def vocab_size(self) -> int:
        if self.channel_grus is not None:
            return self.channel_grus[0].input_size
        return self.session_nets[0].input_size

    @classmethod
    def init(cls, variant: str, vocab_size: int, d: int, rng: np.random.Generator,
             attention_hidden: int = ATTENTION_HIDDEN, dtype=np.float32) -> "UserEncoderParams":
        kw = {}
        if variant in GRU_VARIANTS:
            kw["channel_grus"] = [GruParams.init(vocab_size, d, rng, dtype) for _ in CHANNELS]
        elif variant in ("pool-last", "pool-max"):
            kw["session_nets"] = [FfnParams.init([vocab_size, d, d], ["tanh", "tanh"], rng, dtype) for _ in CHANNELS]
        else:
            raise ValueError(f"unknown variant {variant!r}")
        if variant in ATTENTION_VARIANTS:
            kw["attention"] = FfnParams.init([d, attention_hidden, 1], ["tanh", "identity"], rng, dtype)
        if variant == "seq-hid":
            kw["combiner"] = FfnParams.init([K * d, d], ["identity"], rng, dtype)
        return cls(variant, **kw)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for k, ch in enumerate(CHANNELS):
            if self.channel_grus is not None:
                out.update({f"user.gru.{ch}.{n}": a for n, a in self.channel_grus[k].tensors().items()})
            if self.session_nets is not None:
                out.update({f"user.session.{ch}.{n}": a for n, a in self.session_nets[k].tensors().items()})
        if self.attention is not None:
            out.update({f"user.att.{n}": a for n, a in self.attention.tensors().items()})
        if self.combiner is not None:
            out.update({f"user.hid.{n}": a for n, a in self.combiner.tensors().items()})
        return out

    @classmethod
    def from_tensors(cls, variant: str, t: dict[str, np.ndarray]) -> "UserEncoderParams":
        def ffn(prefix, acts):
            return FfnParams([t[f"{prefix}.W{i}"] for i in range(len(acts))],
                             [t[f"{prefix}.b{i}"] for i in range(len(acts))], list(acts))

        kw = {}
        if variant in GRU_VARIANTS:
            kw["channel_grus"] = [GruParams(**{n: t[f"user.gru.{ch}.{n}"] for n in GruParams.__dataclass_fields__})
                                  for ch in CHANNELS]
        else:
            kw["session_nets"] = [ffn(f"user.session.{ch}", ["tanh", "tanh"]) for ch in CHANNELS]
        if variant in ATTENTION_VARIANTS:
            kw["attention"] = ffn("user.att", ["tanh", "identity"])
        if variant == "seq-hid":
            kw["combiner"] = ffn("user.hid", ["identity"])
        return cls(variant, **kw)


@dataclass
class UserVector:
    h_u: np.ndarray
    alphas: np.ndarray | None = None


# --------------------------------------------------------------------------
# Single-user reference path
# --------------------------------------------------------------------------


def encode_channel(gru: GruParams, seq: ChannelSequence) -> np.ndarray:
    """Fold the GRU over the channel's sessions from a zero state."""
    h = np.zeros((1, gru.hidden_size), dtype=gru.W_z.dtype)
    for s in seq.sessions:
        h = gru_step_rows(gru, multi_hot([s.indices], gru.input_size, gru.W_z.dtype), h)
    return h[0]


def softmax(g: np.ndarray) -> np.ndarray:
    e = np.exp(g - np.max(g))
    return e / e.sum()


def attention_weights(att: FfnParams, channel_states: np.ndarray) -> np.ndarray:
    """Softmax over the attention network's scalar score of each channel state."""
    states = np.asarray(channel_states)
    if states.ndim != 2 or states.shape[0] < 1:
        raise ShapeError("attention_weights expects a (K, d) array with K >= 1")
    return softmax(ffn_forward(att, states.astype(att.weights[0].dtype))[:, 0])


def pool_user(channel_states: np.ndarray, alphas: np.ndarray) -> UserVector:
    states = np.asarray(channel_states)
    alphas = np.asarray(alphas)
    h_u = np.zeros(states.shape[1], dtype=states.dtype)
    for a, h in zip(alphas, states):
        h_u = h_u + a * h
    return UserVector(h_u.astype(states.dtype), alphas)


def _session_embedding(net: FfnParams, seq: ChannelSequence, how: str) -> np.ndarray:
    d = net.output_size
    if not seq.sessions:
        return np.zeros(d, dtype=net.weights[0].dtype)
    sessions = seq.sessions[-1:] if how == "last" else seq.sessions
    emb = ffn_forward(net, multi_hot([s.indices for s in sessions], net.input_size, net.weights[0].dtype))
    return emb.max(axis=0)


def channel_states(params: UserEncoderParams, seqs: Sequence[ChannelSequence]) -> np.ndarray:
    """Per-channel representations ``(K, d)`` for the given variant."""
    if len(seqs) != K:
        raise ShapeError(f"expected {K} channel sequences, got {len(seqs)}")
    if params.variant in GRU_VARIANTS:
        return np.stack([encode_channel(g, s) for g, s in zip(params.channel_grus, seqs)])
    how = "last" if params.variant == "pool-last" else "max"
    return np.stack([_session_embedding(n, s, how) for n, s in zip(params.session_nets, seqs)])


def combine_channels(params: UserEncoderParams, states: np.ndarray) -> UserVector:
    """Aggregate ``(K, d)`` channel states into the user vector."""
    v = params.variant
    if v in ATTENTION_VARIANTS:
        return pool_user(states, attention_weights(params.attention, states))
    if v == "seq-avg":
        return pool_user(states, np.full(K, 1.0 / K, dtype=states.dtype))
    if v == "seq-max":
        return UserVector(states.max(axis=0))
    return UserVector(ffn_forward(params.combiner, states.reshape(-1)))


def encode_user(params: UserEncoderParams, seqs: Sequence[ChannelSequence]) -> UserVector:
    """Channel GRUs, then attention weights, then the weighted sum."""
    if params.variant != "mcsbn":
        raise ValueError(f"encode_user expects mcsbn params, got {params.variant}; use encode_user_variant")
    states = channel_states(params, seqs)
    return pool_user(states, attention_weights(params.attention, states))


def encode_user_variant(variant: str, params: UserEncoderParams, seqs: Sequence[ChannelSequence]) -> UserVector:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if params.variant != variant:
        raise ValueError(f"params were built for {params.variant}, not {variant}")
    return combine_channels(params, channel_states(params, seqs))


# --------------------------------------------------------------------------
# Incremental state
# --------------------------------------------------------------------------

STATE_MAGIC = b"MCSB"
STATE_VERSION = 1
NO_DAY = -1


@dataclass
class UserState:
    """Committed GRU state per channel plus the still-open day.

    ``watermark_day[k]`` is the day of the open session of channel k (the
    latest day ingested); events from earlier days are late. ``NO_DAY``
    means the channel has seen nothing yet.
    """

    h: np.ndarray
    open_sessions: list[tuple[int, ...]] = field(default_factory=list)
    watermark_day: list[int] = field(default_factory=list)

    @classmethod
    def fresh(cls, d: int, n_channels: int = K, dtype=np.float32) -> "UserState":
        return cls(np.zeros((n_channels, d), dtype=dtype), [() for _ in range(n_channels)], [NO_DAY] * n_channels)

    def copy(self) -> "UserState":
        return UserState(self.h.copy(), list(self.open_sessions), list(self.watermark_day))

    def __eq__(self, other):
        return (isinstance(other, UserState) and np.array_equal(self.h, other.h)
                and self.open_sessions == other.open_sessions and self.watermark_day == other.watermark_day)


@dataclass
class UpdatePlan:
    commits: list[list[tuple[int, ...]]]
    open_sessions: list[tuple[int, ...]]
    watermark_day: list[int]
    late: int = 0
    applied: int = 0


def plan_update(state: UserState, new_events: Iterable[tuple[int, int, Sequence[int]]], on_late: str = "raise") -> UpdatePlan:
    """Work out which sessions get committed, without running the GRU.

    ``new_events`` holds ``(channel_index, day, indices)`` in time order.
    """
    open_sets = [set(s) for s in state.open_sessions]
    wm = list(state.watermark_day)
    commits: list[list[tuple[int, ...]]] = [[] for _ in wm]
    late = applied = 0
    for k, day, indices in new_events:
        if day < wm[k]:
            if on_late == "raise":
                raise LateEventError(f"channel {CHANNELS[k]}: event day {day} precedes watermark day {wm[k]}")
            late += 1
            continue
        if day > wm[k]:
            if open_sets[k]:
                commits[k].append(tuple(sorted(open_sets[k])))
            open_sets[k] = set()
            wm[k] = day
        open_sets[k].update(indices)
        applied += 1
    return UpdatePlan(commits, [tuple(sorted(s)) for s in open_sets], wm, late, applied)


def run_commits(grus: Sequence[GruParams], states: list[np.ndarray], commits: list[list[list[tuple[int, ...]]]]) -> None:
    """Apply planned commits for many users, one GRU step per round.

    ``states[u]`` is user u's ``(K, d)`` array, updated in place;
    ``commits[u][k]`` is the ordered list of sessions to commit. Rows are
    batched across users, which is safe because the inference GRU step is
    row-independent.
    """
    for k, gru in enumerate(grus):
        rounds = max((len(c[k]) for c in commits), default=0)
        w_stack = stacked_input_weights(gru) if rounds else None
        for r in range(rounds):
            users = [u for u, c in enumerate(commits) if len(c[k]) > r]
            x = multi_hot([commits[u][k][r] for u in users], gru.input_size, gru.W_z.dtype)
            h = np.stack([states[u][k] for u in users])
            h = gru_step_projected(gru, *sparse_projections(x, w_stack), h)
            for i, u in enumerate(users):
                states[u][k] = h[i]


def incremental_update(params: UserEncoderParams, state: UserState,
                       new_events: Iterable[tuple[int, int, Sequence[int]]]) -> UserState:
    """Fold new ``(channel_index, day, indices)`` events into a copy of ``state``."""
    if params.variant not in GRU_VARIANTS:
        raise ValueError(f"{params.variant} has no recurrent state to update")
    plan = plan_update(state, new_events)
    h = state.h.copy()
    run_commits(params.channel_grus, [h], [plan.commits])
    return UserState(h, plan.open_sessions, plan.watermark_day)


def provisional_states(params: UserEncoderParams, state: UserState) -> np.ndarray:
    """Committed states with the open day applied as a non-persisted step."""
    h = state.h.copy()
    for k, gru in enumerate(params.channel_grus):
        if state.open_sessions[k]:
            x = multi_hot([state.open_sessions[k]], gru.input_size, gru.W_z.dtype)
            h[k] = gru_step_rows(gru, x, h[k][None, :])[0]
    return h


def read_vector(params: UserEncoderParams, state: UserState) -> UserVector:
    if params.variant not in GRU_VARIANTS:
        raise ValueError(f"{params.variant} has no recurrent state to read")
    return combine_channels(params, provisional_states(params, state))


def _varint(n: int) -> bytes:
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


_SMALL_VARINTS = [_varint(i) for i in range(1 << 14)]


def _read_varint(buf: bytes, pos: int) -> tuple[int, int]:
    shift = n = 0
    while True:
        if pos >= len(buf):
            raise ValueError("truncated varint")
        b = buf[pos]
        pos += 1
        n |= (b & 0x7F) << shift
        if not b & 0x80:
            return n, pos
        shift += 7
        if shift > 63:
            raise ValueError("varint too long")


def serialize_state(state: UserState) -> bytes:
    n_ch, d = state.h.shape
    parts = [STATE_MAGIC, struct.pack("<HHI", STATE_VERSION, n_ch, d)]
    for k in range(n_ch):
        parts.append(state.h[k].astype("<f4").tobytes())
        parts.append(_varint(len(state.open_sessions[k])))
        parts.extend(_SMALL_VARINTS[i] if i < 16384 else _varint(i) for i in state.open_sessions[k])
        parts.append(struct.pack("<q", state.watermark_day[k]))
    return b"".join(parts)


def deserialize_state(buf: bytes, n_channels: int | None = None, d: int | None = None) -> UserState:
    if buf[:4] != STATE_MAGIC:
        raise ValueError("user state: bad magic")
    if len(buf) < 12:
        raise ValueError("user state: truncated header")
    version, n_ch, dim = struct.unpack_from("<HHI", buf, 4)
    if version != STATE_VERSION:
        raise ValueError(f"user state: unsupported version {version}")
    if (n_channels is not None and n_ch != n_channels) or (d is not None and dim != d):
        raise ValueError(f"user state: dims ({n_ch}, {dim}) do not match model ({n_channels}, {d})")
    pos = 12
    h = np.zeros((n_ch, dim), dtype=np.float32)
    opens, wms = [], []
    for k in range(n_ch):
        end = pos + 4 * dim
        if end > len(buf):
            raise ValueError("user state: truncated hidden vector")
        h[k] = np.frombuffer(buf[pos:end], dtype="<f4")
        pos = end
        count, pos = _read_varint(buf, pos)
        idx = []
        for _ in range(count):
            i, pos = _read_varint(buf, pos)
            idx.append(i)
        opens.append(tuple(idx))
        if pos + 8 > len(buf):
            raise ValueError("user state: truncated watermark")
        wms.append(struct.unpack_from("<q", buf, pos)[0])
        pos += 8
    if pos != len(buf):
        raise ValueError("user state: trailing bytes")
    if not np.all(np.isfinite(h)):
        raise ValueError("user state: non-finite hidden values")
    return UserState(h, opens, wms)


# --------------------------------------------------------------------------
# Batched training path
# --------------------------------------------------------------------------

Packed = tuple[np.ndarray, np.ndarray]  # (concatenated indices, per-session lengths)


def pack_sequence(seq: ChannelSequence) -> Packed:
    lengths = np.fromiter((len(s.indices) for s in seq.sessions), dtype=np.int64, count=len(seq.sessions))
    if lengths.sum():
        idx = np.concatenate([np.asarray(s.indices, dtype=np.int32) for s in seq.sessions])
    else:
        idx = np.zeros(0, dtype=np.int32)
    return idx, lengths


@dataclass
class UserBatch:
    x: list          # per channel CSR (B*T, V), batch-major rows
    mask: list       # per channel (B, T)
    last: list       # per channel CSR (B, V): most recent session
    has_any: list    # per channel (B,) 1.0 if the channel has sessions
    size: int
    steps: int


def build_user_batch(packed: Sequence[Sequence[Packed]], vocab_size: int, dtype=np.float32) -> UserBatch:
    """Assemble padded multi-hot inputs from packed per-channel sessions."""
    B = len(packed)
    T = max(1, max((len(p[k][1]) for p in packed for k in range(K)), default=1))
    xs, masks, lasts, anys = [], [], [], []
    for k in range(K):
        row_len = np.zeros(B * T, dtype=np.int64)
        mask = np.zeros((B, T), dtype=dtype)
        last_len = np.zeros(B, dtype=np.int64)
        idx_parts, last_parts = [], []
        for b, p in enumerate(packed):
            idx, lengths = p[k]
            n = len(lengths)
            if n:
                row_len[b * T : b * T + n] = lengths
                mask[b, :n] = 1
                idx_parts.append(idx)
                last_len[b] = lengths[-1]
                last_parts.append(idx[len(idx) - lengths[-1]:])
        xs.append(_csr(row_len, idx_parts, vocab_size, dtype))
        lasts.append(_csr(last_len, last_parts, vocab_size, dtype))
        masks.append(mask)
        anys.append(mask[:, 0].copy())
    return UserBatch(xs, masks, lasts, anys, B, T)


def _csr(row_len, parts, width, dtype):
    indptr = np.zeros(len(row_len) + 1, dtype=np.int64)
    np.cumsum(row_len, out=indptr[1:])
    idx = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int32)
    return sp.csr_matrix((np.ones(len(idx), dtype=dtype), idx, indptr), shape=(len(row_len), width))


def _softmax_rows(g: np.ndarray) -> np.ndarray:
    e = np.exp(g - g.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def forward_batch(params: UserEncoderParams, batch: UserBatch, train: bool = True):
    """Batched user vectors ``(B, d)``; with ``train`` also returns a cache."""
    B, d = batch.size, params.dim
    cache = {"channels": []}
    H = []
    for k in range(K):
        if params.variant in GRU_VARIANTS:
            h, c = gru_forward(params.channel_grus[k], batch.x[k], batch.mask[k])
        elif params.variant == "pool-last":
            e, c = ffn_forward_train(params.session_nets[k], batch.last[k])
            h = e * batch.has_any[k][:, None]
        else:
            e, fc = ffn_forward_train(params.session_nets[k], batch.x[k])
            e = e.reshape(B, batch.steps, d)
            masked = np.where(batch.mask[k][:, :, None] > 0, e, -np.inf)
            arg = masked.argmax(axis=1)
            h = np.take_along_axis(e, arg[:, None, :], axis=1)[:, 0] * batch.has_any[k][:, None]
            c = (fc, arg)
        H.append(h)
        cache["channels"].append(c)
    H = np.stack(H)  # (K, B, d)
    cache["H"] = H
    v = params.variant
    if v in ATTENTION_VARIANTS:
        g, ac = ffn_forward_train(params.attention, H.reshape(K * B, d))
        alpha = _softmax_rows(g.reshape(K, B).T)  # (B, K)
        h_u = np.einsum("bk,kbd->bd", alpha, H)
        cache.update(att=ac, alpha=alpha)
    elif v == "seq-avg":
        h_u = H.mean(axis=0)
    elif v == "seq-max":
        arg = H.argmax(axis=0)
        h_u = np.take_along_axis(H, arg[None], axis=0)[0]
        cache["arg"] = arg
    else:
        cat = H.transpose(1, 0, 2).reshape(B, K * d)
        h_u, hc = ffn_forward_train(params.combiner, cat)
        cache["hid"] = hc
    return (h_u, cache) if train else h_u


def backward_batch(params: UserEncoderParams, batch: UserBatch, cache, dh_u: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of all user-encoder tensors given ``dL/dh_u``."""
    H = cache["H"]
    B, d = batch.size, params.dim
    grads: dict[str, np.ndarray] = {}
    v = params.variant
    if v in ATTENTION_VARIANTS:
        alpha = cache["alpha"]
        dH = alpha.T[:, :, None] * dh_u[None]
        dalpha = np.einsum("bd,kbd->bk", dh_u, H)
        dg = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
        ag, dH_att = ffn_backward(params.attention, cache["att"], dg.T.reshape(K * B, 1))
        dH = dH + dH_att.reshape(K, B, d)
        grads.update({f"user.att.{n}": a for n, a in ag.tensors().items()})
    elif v == "seq-avg":
        dH = np.broadcast_to(dh_u / K, (K, B, d)).copy()
    elif v == "seq-max":
        dH = np.zeros_like(H)
        np.put_along_axis(dH, cache["arg"][None], dh_u[None], axis=0)
    else:
        hg, dcat = ffn_backward(params.combiner, cache["hid"], dh_u)
        dH = dcat.reshape(B, K, d).transpose(1, 0, 2)
        grads.update({f"user.hid.{n}": a for n, a in hg.tensors().items()})
    for k, ch in enumerate(CHANNELS):
        c = cache["channels"][k]
        if v in GRU_VARIANTS:
            gg, _, _ = gru_backward(params.channel_grus[k], c, dH[k])
            grads.update({f"user.gru.{ch}.{n}": a for n, a in gg.tensors().items()})
        elif v == "pool-last":
            fg, _ = ffn_backward(params.session_nets[k], c, dH[k] * batch.has_any[k][:, None])
            grads.update({f"user.session.{ch}.{n}": a for n, a in fg.tensors().items()})
        else:
            fc, arg = c
            de = np.zeros((B, batch.steps, d), dtype=dH.dtype)
            np.put_along_axis(de, arg[:, None, :], (dH[k] * batch.has_any[k][:, None])[:, None, :], axis=1)
            fg, _ = ffn_backward(params.session_nets[k], fc, de.reshape(B * batch.steps, d))
            grads.update({f"user.session.{ch}.{n}": a for n, a in fg.tensors().items()})
    return grads
