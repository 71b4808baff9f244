"""Event logs -> vocabulary, daily sessions and multi-hot channel sequences."""
from __future__ import annotations

import hashlib
import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

CHANNELS = ("page", "query", "ad_click")
UNK = "<UNK>"
SECONDS_PER_DAY = 86400
MAX_SESSIONS = 14

_TOKEN_RE = re.compile(r"[^\W_]+")


@dataclass(frozen=True)
class Event:
    user_id: str
    ts: int
    channel: str
    text: str

    def __post_init__(self):
        if self.ts <= 0:
            raise ValueError(f"event ts must be positive, got {self.ts}")
        if self.channel not in CHANNELS:
            raise ValueError(f"unknown channel {self.channel!r}")

    @property
    def day(self) -> int:
        return self.ts // SECONDS_PER_DAY


@dataclass(frozen=True)
class Session:
    day_index: int
    indices: tuple[int, ...]


@dataclass(frozen=True)
class ChannelSequence:
    channel: str
    sessions: tuple[Session, ...] = ()

    def __len__(self):
        return len(self.sessions)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on anything that is not a letter or digit."""
    return _TOKEN_RE.findall(text.lower())


class _Index(dict):
    """Token -> index with unknown tokens mapping to 0 (not inserted)."""

    def __missing__(self, key):
        return 0


class Vocab:
    """Token -> index map with ``<UNK>`` pinned at index 0."""

    def __init__(self, tokens: Iterable[str], min_frequency: int = 1):
        tokens = list(tokens)
        if not tokens or tokens[0] != UNK:
            tokens = [UNK] + [t for t in tokens if t != UNK]
        self.tokens = tokens
        self.min_frequency = min_frequency
        self.index = _Index((t, i) for i, t in enumerate(tokens))
        if len(self.index) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def lookup(self, tokens: Iterable[str]) -> list[int]:
        return list(map(self.index.__getitem__, tokens))

    def encode(self, text: str) -> list[int]:
        return self.lookup(tokenize(text))

    def to_text(self) -> str:
        return "".join(t + "\n" for t in self.tokens)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if not lines or lines[0] != UNK:
            raise ValueError(f"{path}: vocabulary file must start with {UNK}")
        return cls(lines)


def build_vocab(texts: Iterable[str], min_frequency: int = 3) -> Vocab:
    """Keep tokens seen at least ``min_frequency`` times; order by count then token."""
    if min_frequency < 1:
        raise ValueError("min_frequency must be >= 1")
    counts = Counter()
    for text in texts:
        counts.update(tokenize(text))
    counts.pop(UNK.lower(), None)
    kept = sorted((t for t, c in counts.items() if c >= min_frequency), key=lambda t: (-counts[t], t))
    return Vocab([UNK] + kept, min_frequency=min_frequency)


def clip_history(events: Iterable[Event], anchor_ts: int, delta_seconds: int, lookback_days: float) -> list[Event]:
    """Keep events with ts in [anchor - lookback, anchor - delta)."""
    if delta_seconds < 0:
        raise ValueError("delta_seconds must be >= 0")
    lo = -math.inf if math.isinf(lookback_days) else anchor_ts - lookback_days * SECONDS_PER_DAY
    hi = anchor_ts - delta_seconds
    return [e for e in events if lo <= e.ts < hi]


def segment_sessions(
    events: Iterable[Event],
    vocab: Vocab,
    window: tuple[float, float] = (-math.inf, math.inf),
    max_sessions: int = MAX_SESSIONS,
    channel: str | None = None,
) -> ChannelSequence:
    """Group one user's single-channel events into UTC daily sessions.

    Each session is the set of vocabulary indices seen that day (presence,
    not counts). Empty days are omitted and only the most recent
    ``max_sessions`` sessions are kept.
    """
    t_start, t_end = window
    days: dict[int, set[int]] = {}
    for e in events:
        if channel is None:
            channel = e.channel
        elif e.channel != channel:
            raise ValueError(f"mixed channels in one sequence: {channel} and {e.channel}")
        if t_start <= e.ts < t_end:
            days.setdefault(e.day, set()).update(vocab.encode(e.text))
    sessions = tuple(Session(day, tuple(sorted(ix))) for day, ix in sorted(days.items()))
    if max_sessions is not None and len(sessions) > max_sessions:
        sessions = sessions[-max_sessions:]
    return ChannelSequence(channel or CHANNELS[0], sessions)


def channel_sequences(
    events: Iterable[Event],
    vocab: Vocab,
    window: tuple[float, float] = (-math.inf, math.inf),
    max_sessions: int = MAX_SESSIONS,
) -> tuple[ChannelSequence, ...]:
    """One ChannelSequence per channel (in ``CHANNELS`` order) for a single user."""
    by_channel: dict[str, list[Event]] = {c: [] for c in CHANNELS}
    for e in events:
        by_channel[e.channel].append(e)
    return tuple(segment_sessions(by_channel[c], vocab, window, max_sessions, channel=c) for c in CHANNELS)


# --------------------------------------------------------------------------
# JSONL IO
# --------------------------------------------------------------------------


def iter_jsonl(path) -> Iterator[tuple[int, dict | None]]:
    """Yield ``(line_number, obj)``; ``obj`` is None for unparsable lines."""
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                yield lineno, None
                continue
            yield lineno, obj if isinstance(obj, dict) else None


def event_from_dict(row: dict) -> Event:
    ts = row["ts"]
    if isinstance(ts, bool) or not isinstance(ts, (int, float)):
        raise ValueError("ts must be numeric")
    return Event(str(row["user_id"]), int(ts), row["channel"], str(row["text"]))


def event_to_dict(e: Event) -> dict:
    return {"user_id": e.user_id, "ts": e.ts, "channel": e.channel, "text": e.text}


def read_events(path) -> tuple[list[Event], int]:
    """Parse an event log; returns ``(events, malformed_count)``."""
    events, bad = [], 0
    for _, row in iter_jsonl(path):
        try:
            events.append(event_from_dict(row))
        except (TypeError, KeyError, ValueError):
            bad += 1
    return events, bad


def write_jsonl(path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False, separators=(",", ":")) + "\n")


@dataclass(frozen=True)
class Ad:
    ad_id: str
    text: str
    advertiser_id: str = ""


def read_ads(path) -> tuple[dict[str, Ad], int]:
    """Parse an ad catalog; returns ``({ad_id: Ad}, malformed_count)``."""
    ads, bad = {}, 0
    for _, row in iter_jsonl(path):
        try:
            ad = Ad(str(row["ad_id"]), str(row["text"]), str(row.get("advertiser_id", "")))
        except (TypeError, KeyError):
            bad += 1
            continue
        ads[ad.ad_id] = ad
    return ads, bad
