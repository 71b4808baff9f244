import sys

import numpy as np
import pytest

from mcsbn.featurize import CHANNELS, SECONDS_PER_DAY, ChannelSequence, Session
from mcsbn.model import ModelParams

DAY0 = 19_500


def random_sequences(rng, vocab_size, max_sessions=5, p_empty=0.2, start_day=DAY0):
    """Random per-channel session sequences for one user."""
    seqs = []
    for ch in CHANNELS:
        if rng.random() < p_empty:
            seqs.append(ChannelSequence(ch, ()))
            continue
        n = int(rng.integers(1, max_sessions + 1))
        days = np.sort(rng.choice(np.arange(start_day, start_day + 14), size=n, replace=False))
        sessions = []
        for day in days:
            k = int(rng.integers(1, min(vocab_size, 6) + 1))
            sessions.append(Session(int(day), tuple(sorted(rng.choice(vocab_size, size=k, replace=False).tolist()))))
        seqs.append(ChannelSequence(ch, tuple(sessions)))
    return tuple(seqs)


def sequences_to_events(seqs, rng):
    """``(channel_index, day, indices)`` events (possibly several per day) reproducing ``seqs``."""
    out = []
    for k, seq in enumerate(seqs):
        for s in seq.sessions:
            ix = list(s.indices)
            cut = int(rng.integers(0, len(ix) + 1))
            parts = [ix[:cut], ix[cut:]] if 0 < cut < len(ix) else [ix]
            for part in parts:
                out.append((k, s.day_index, tuple(part)))
    out.sort(key=lambda e: e[1])
    return out


def day_ts(day, second=0):
    return day * SECONDS_PER_DAY + second


@pytest.fixture
def tiny_model():
    def make(variant="mcsbn", V=10, d=4, seed=0, dtype=np.float64):
        p = ModelParams.init(variant, V, d, np.random.default_rng(seed), attention_hidden=5, word_dim=3)
        return p.astype(dtype)
    return make


def pytest_terminal_summary(terminalreporter):
    """Collect the acceptance verdicts in one block at the end of the run."""
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        passed, detail = results[n]
        terminalreporter.write_line(f"CRITERION {n} {'PASS' if passed else 'FAIL'}: {detail}")
