"""Persistent user-state store, the batch updater, candidate scoring and feature export."""
from __future__ import annotations

import json
import os
import struct
import threading
import zlib
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .ad_encoder import AdCache, InvalidAdError, cached_encode_many, encode_ad, score_many
from .featurize import CHANNELS, SECONDS_PER_DAY, Event, Vocab
from .model import ModelParams
from .user_encoder import (GRU_VARIANTS, K, UserState, UserVector, deserialize_state, plan_update, read_vector,
                           run_commits, serialize_state)

STORE_MAGIC = b"MCSBSTOR"
STORE_VERSION = 1
_HEADER = STORE_MAGIC + struct.pack("<H", STORE_VERSION)
_META_KEY = b"\x00meta"
_COMMIT_KEY = b"\x00commit"
_CHANNEL_INDEX = {c: i for i, c in enumerate(CHANNELS)}


class StoreError(RuntimeError):
    pass


class CorruptRecordError(StoreError):
    pass


class InjectedFault(RuntimeError):
    """Raised by a fault hook to simulate an I/O failure mid-batch."""


def _frame(key: bytes, value: bytes) -> bytes:
    body = struct.pack("<I", len(key)) + key + struct.pack("<I", len(value)) + value
    return body + struct.pack("<I", zlib.crc32(body))


def _scan(buf: bytes, start: int):
    """Yield ``(offset, end, key, value)`` for each intact record; stops at the first bad one."""
    pos = start
    while pos + 4 <= len(buf):
        (klen,) = struct.unpack_from("<I", buf, pos)
        vpos = pos + 4 + klen
        if vpos + 4 > len(buf):
            return
        (vlen,) = struct.unpack_from("<I", buf, vpos)
        end = vpos + 4 + vlen
        if end + 4 > len(buf):
            return
        (crc,) = struct.unpack_from("<I", buf, end)
        if zlib.crc32(buf[pos:end]) != crc:
            return
        yield pos, end + 4, buf[pos + 4 : vpos], buf[vpos + 4 : end]
        pos = end + 4


class VectorStore:
    """Single-file log-structured map user_id -> serialized UserState.

    Every batch is written as a run of records closed by a commit marker.
    A batch that fails is truncated away, and on open anything after the
    last commit marker is discarded, so the file always reflects whole
    batches. ``fault_hook(n)`` is called after the n-th record of a batch
    is written; tests use it to raise or kill the process.
    """

    def __init__(self, path, fsync: bool = False):
        self.path = Path(path)
        self.fsync = fsync
        self.fault_hook: Callable[[int], None] | None = None
        self._lock = threading.Lock()
        self._states: dict[str, bytes] = {}
        self.meta = {"model_version": "", "channels": K, "dim": 0, "watermark": 0, "commits": 0}
        self.recovered_bytes = 0
        if not self.path.exists() or self.path.stat().st_size == 0:
            self.path.write_bytes(_HEADER + _frame(_META_KEY, self._meta_bytes()) + _frame(_COMMIT_KEY, b"0"))
        self._load()

    def _meta_bytes(self, meta: dict | None = None) -> bytes:
        return json.dumps(meta or self.meta, sort_keys=True, separators=(",", ":")).encode()

    def _load(self) -> None:
        buf = self.path.read_bytes()
        if buf[: len(STORE_MAGIC)] != STORE_MAGIC:
            raise CorruptRecordError(f"{self.path}: bad store magic at byte offset 0")
        if len(buf) < len(_HEADER):
            raise CorruptRecordError(f"{self.path}: truncated header at byte offset {len(STORE_MAGIC)}")
        (version,) = struct.unpack_from("<H", buf, len(STORE_MAGIC))
        if version != STORE_VERSION:
            raise CorruptRecordError(f"{self.path}: unsupported store version {version} at byte offset 8")
        committed_end = len(_HEADER)
        states: dict[str, bytes] = {}
        pending: dict[str, bytes] = {}
        meta = None
        pending_meta = None
        for _, end, key, value in _scan(buf, len(_HEADER)):
            if key == _COMMIT_KEY:
                states.update(pending)
                pending = {}
                if pending_meta is not None:
                    meta = pending_meta
                    pending_meta = None
                committed_end = end
            elif key == _META_KEY:
                pending_meta = json.loads(value)
            else:
                pending[key.decode("utf-8")] = value
        if meta is None:
            raise CorruptRecordError(f"{self.path}: no committed metadata record after byte offset {len(_HEADER)}")
        if committed_end < len(buf):
            self.recovered_bytes = len(buf) - committed_end
            with open(self.path, "r+b") as f:
                f.truncate(committed_end)
        self._states = states
        self.meta = meta
        self._end = committed_end

    # -- reads ------------------------------------------------------------

    def __len__(self):
        return len(self._states)

    def __contains__(self, user_id):
        return user_id in self._states

    def users(self) -> list[str]:
        return sorted(self._states)

    def get_raw(self, user_id: str) -> bytes | None:
        return self._states.get(user_id)

    def load_state(self, user_id: str) -> UserState | None:
        raw = self._states.get(user_id)
        if raw is None:
            return None
        try:
            return deserialize_state(raw, self.meta["channels"], self.meta["dim"] or None)
        except ValueError as e:
            raise CorruptRecordError(f"user {user_id!r}: {e}") from None

    @property
    def model_version(self) -> str:
        return self.meta["model_version"]

    @property
    def watermark(self) -> int:
        return self.meta["watermark"]

    def contents(self) -> dict:
        """Committed logical contents; two stores with equal contents are interchangeable."""
        return {"meta": {k: v for k, v in self.meta.items() if k != "commits"}, "states": dict(self._states)}

    # -- writes -----------------------------------------------------------

    def check_model(self, model_version: str, dim: int) -> None:
        """Refuse a store written by another model; an empty tag accepts any."""
        if self.meta["model_version"] in ("", model_version) and self.meta["dim"] in (0, dim):
            return
        raise StoreError(f"store holds model {self.meta['model_version']} (d={self.meta['dim']}), "
                         f"not {model_version} (d={dim})")

    def write_batch(self, records: dict[str, bytes], meta_updates: dict) -> None:
        """Append ``records`` plus metadata as one committed transaction."""
        with self._lock:
            meta = dict(self.meta)
            meta.update(meta_updates)
            meta["commits"] = self.meta["commits"] + 1
            start = self._end
            written = 0
            try:
                with open(self.path, "r+b") as f:
                    f.seek(start)
                    for user_id in sorted(records):
                        f.write(_frame(user_id.encode("utf-8"), records[user_id]))
                        written += 1
                        if self.fault_hook:
                            f.flush()
                            self.fault_hook(written)
                    f.write(_frame(_META_KEY, self._meta_bytes(meta)))
                    f.flush()
                    if self.fault_hook:
                        self.fault_hook(written + 1)
                    f.write(_frame(_COMMIT_KEY, str(meta["commits"]).encode()))
                    f.flush()
                    if self.fsync:
                        os.fsync(f.fileno())
                    end = f.tell()
            except BaseException:
                with open(self.path, "r+b") as f:
                    f.truncate(start)
                raise
            states = dict(self._states)
            states.update(records)
            self._states = states
            self.meta = meta
            self._end = end

    def compact(self) -> None:
        """Rewrite the file with one record per user and swap it in atomically."""
        with self._lock:
            tmp = self.path.with_name(self.path.name + ".compact")
            with open(tmp, "wb") as f:
                f.write(_HEADER)
                for user_id in sorted(self._states):
                    f.write(_frame(user_id.encode("utf-8"), self._states[user_id]))
                f.write(_frame(_META_KEY, self._meta_bytes()))
                f.write(_frame(_COMMIT_KEY, str(self.meta["commits"]).encode()))
                f.flush()
                if self.fsync:
                    os.fsync(f.fileno())
                self._end = f.tell()
            os.replace(tmp, self.path)


def store_summary(path) -> dict:
    store = VectorStore(path) if Path(path).exists() else None
    if store is None:
        raise FileNotFoundError(path)
    wms = []
    for u in store.users():
        st = store.load_state(u)
        wms.extend(w for w in st.watermark_day if w >= 0)
    return {
        "kind": "store",
        "version": STORE_VERSION,
        "model_version": store.model_version,
        "channels": store.meta["channels"],
        "dim": store.meta["dim"],
        "users": len(store),
        "watermark": store.watermark,
        "max_user_watermark_day": max(wms) if wms else None,
        "commits": store.meta["commits"],
        "bytes": store.path.stat().st_size,
    }


# --------------------------------------------------------------------------
# Batch updater
# --------------------------------------------------------------------------


@dataclass
class UpdateReport:
    users_touched: int = 0
    events_applied: int = 0
    sessions_committed: int = 0
    late_events: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _require_recurrent(params: ModelParams) -> None:
    if params.variant not in GRU_VARIANTS:
        raise ValueError(f"variant {params.variant} keeps no recurrent state; serving needs one of {GRU_VARIANTS}")


def apply_event_batch(store: VectorStore, params: ModelParams, vocab: Vocab, events: Iterable[Event],
                      model_version: str | None = None) -> UpdateReport:
    """Fold one batch of events into the store as a single transaction.

    Events are grouped per user and applied in timestamp order (stable for
    equal timestamps). Events from a day before the channel's open session
    are late: counted and dropped.
    """
    _require_recurrent(params)
    model_version = model_version or params.fingerprint()
    store.check_model(model_version, params.dim)
    per_user: dict[str, list[Event]] = defaultdict(list)
    for e in events:
        per_user[e.user_id].append(e)
    if not per_user:
        return UpdateReport()
    users = sorted(per_user)
    states, plans = [], []
    report = UpdateReport(users_touched=len(users))
    max_ts = store.watermark
    for u in users:
        evs = sorted(per_user[u], key=lambda e: e.ts)
        max_ts = max(max_ts, evs[-1].ts)
        state = store.load_state(u) or UserState.fresh(params.dim)
        plan = plan_update(state, [(_CHANNEL_INDEX[e.channel], e.ts // SECONDS_PER_DAY, vocab.encode(e.text))
                                   for e in evs], on_late="count")
        states.append(state.h.copy())
        plans.append(plan)
        report.events_applied += plan.applied
        report.late_events += plan.late
        report.sessions_committed += sum(len(c) for c in plan.commits)
    run_commits(params.user.channel_grus, states, [p.commits for p in plans])
    records = {u: serialize_state(UserState(h, p.open_sessions, p.watermark_day))
               for u, h, p in zip(users, states, plans)}
    store.write_batch(records, {"watermark": max_ts, "model_version": model_version, "dim": params.dim})
    return report


def get_user_vector(store: VectorStore, params: ModelParams, user_id: str) -> UserVector:
    """Current vector for ``user_id``; unknown users get the cold-start vector."""
    _require_recurrent(params)
    state = store.load_state(user_id)
    if state is None:
        state = UserState.fresh(params.dim)
    elif state.h.shape != (K, params.dim):
        raise CorruptRecordError(f"user {user_id!r}: state shape {state.h.shape} does not match model")
    return read_vector(params.user, state)


def cold_start_vector(params: ModelParams) -> UserVector:
    return read_vector(params.user, UserState.fresh(params.dim))


# --------------------------------------------------------------------------
# Online scoring
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ScoredCandidate:
    ad_id: str
    score: float
    rank: int


@dataclass
class Ranking:
    """Scored candidates plus ``(ad_id, reason)`` for every skipped one."""

    candidates: list[ScoredCandidate]
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def __len__(self):
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    def __getitem__(self, i):
        return self.candidates[i]

    @property
    def diagnostic(self) -> str:
        if not self.skipped:
            return ""
        return f"{len(self.skipped)} invalid candidate(s): " + ", ".join(f"{a} ({r})" for a, r in self.skipped[:5])


def score_candidates(user_vector, candidates: Sequence[tuple[str, Sequence[int] | None]], cache: AdCache,
                     params: ModelParams, top_k: int, model_version: str | None = None) -> Ranking:
    """Rank ``(ad_id, token_indices)`` candidates by dot product with the user vector.

    Returns ``min(top_k, n_valid)`` entries, score descending, ties by
    ascending ad_id. Candidates with no usable tokens are skipped and listed.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    h_u = user_vector.h_u if isinstance(user_vector, UserVector) else np.asarray(user_vector)
    if model_version is not None:
        cache.set_model_version(model_version)
    valid, skipped = [], []
    V = params.vocab_size
    for ad_id, tokens in candidates:
        if tokens is None:
            skipped.append((ad_id, "unknown ad"))
        elif ad_id in cache:  # validated when it was encoded
            valid.append((ad_id, tokens))
        elif not len(tokens):
            skipped.append((ad_id, "no tokens"))
        elif min(tokens) < 0 or max(tokens) >= V:
            skipped.append((ad_id, "token out of range"))
        else:
            valid.append((ad_id, tokens))
    if not valid:
        return Ranking([], skipped)
    vecs = cached_encode_many(cache, params.ad, valid, model_version)
    s = score_many(h_u, np.stack([v.h_a for v in vecs]))
    ids = np.array([a for a, _ in valid])
    order = np.lexsort((ids, -s))[:top_k]
    return Ranking([ScoredCandidate(str(ids[i]), float(s[i]), r + 1) for r, i in enumerate(order)], skipped)


# --------------------------------------------------------------------------
# Feature export
# --------------------------------------------------------------------------


@dataclass
class FeatureRow:
    user_id: str
    ad_id: str
    h_u: np.ndarray
    h_a: np.ndarray
    s: float


@dataclass
class ExportReport:
    rows: int = 0
    missing_ads: int = 0


def export_features(store: VectorStore, params: ModelParams, pairs: Iterable[tuple[str, str]],
                    ad_tokens: dict[str, Sequence[int]], report: ExportReport | None = None):
    """Yield one FeatureRow per pair; pairs whose ad is missing or unencodable are counted and skipped."""
    report = report if report is not None else ExportReport()
    users: dict[str, np.ndarray] = {}
    ads: dict[str, np.ndarray] = {}
    for user_id, ad_id in pairs:
        if ad_id not in ads:
            tokens = ad_tokens.get(ad_id)
            if tokens is None:
                report.missing_ads += 1
                continue
            try:
                ads[ad_id] = encode_ad(params.ad, tokens)
            except InvalidAdError:
                report.missing_ads += 1
                continue
        if user_id not in users:
            users[user_id] = get_user_vector(store, params, user_id).h_u
        h_u, h_a = users[user_id], ads[ad_id]
        report.rows += 1
        yield FeatureRow(user_id, ad_id, h_u, h_a, float(score_many(h_u, h_a[None, :])[0]))


def feature_header(d: int) -> list[str]:
    return ["user_id", "ad_id"] + [f"u_{i}" for i in range(d)] + [f"a_{i}" for i in range(d)] + ["s"]


def write_features_csv(path, rows: Iterable[FeatureRow], d: int) -> int:
    """CSV with 9 significant digits per value; returns the row count."""
    n = 0
    with open(path, "w", newline="\n", encoding="utf-8") as f:
        f.write(",".join(feature_header(d)) + "\n")
        for r in rows:
            vals = np.concatenate([r.h_u, r.h_a]).astype(np.float64)
            f.write(f"{r.user_id},{r.ad_id}," + ",".join("%.9g" % v for v in vals) + ",%.9g\n" % r.s)
            n += 1
    return n
