"""Transcript and timing quality: WER and its streaming variants, timestamp
scores, real-time factor.

Word-level inputs are sequences of strings; raw text goes through
:func:`tokenize` first.
"""

from __future__ import annotations

import string
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .errors import DomainError


def tokenize(text: str) -> list[str]:
    """Case-fold, split on whitespace, strip punctuation at word edges."""
    words = (w.strip(string.punctuation) for w in text.casefold().split())
    return [w for w in words if w]


def _words(x: str | Sequence[str]) -> list[str]:
    return tokenize(x) if isinstance(x, str) else [str(w).casefold() for w in x]


@dataclass(frozen=True)
class EditCounts:
    insertions: int = 0
    deletions: int = 0
    substitutions: int = 0
    correct: int = 0

    @property
    def errors(self) -> int:
        return self.insertions + self.deletions + self.substitutions

    @property
    def ref_len(self) -> int:
        return self.correct + self.deletions + self.substitutions

    @property
    def hyp_len(self) -> int:
        return self.correct + self.insertions + self.substitutions

    def __add__(self, other: EditCounts) -> EditCounts:
        return EditCounts(
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.substitutions + other.substitutions,
            self.correct + other.correct,
        )


def edit_counts(reference: Sequence[str], hypothesis: Sequence[str]) -> EditCounts:
    """Levenshtein alignment counts.

    Among minimum-cost alignments the one with the fewest insertions plus
    deletions wins (substitutions preferred). Since I - D is fixed by the
    lengths, this pins every count.
    """
    ref, hyp = list(reference), list(hypothesis)
    n, m = len(ref), len(hyp)
    # cell = (cost, indels, subs)
    prev = [(j, j, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, i, 0)]
        for j in range(1, m + 1):
            c, g, s = prev[j - 1]
            diag = (c, g, s) if ref[i - 1] == hyp[j - 1] else (c + 1, g, s + 1)
            c, g, s = prev[j]
            up = (c + 1, g + 1, s)
            c, g, s = cur[j - 1]
            left = (c + 1, g + 1, s)
            cur.append(min(diag, up, left, key=lambda t: (t[0], t[1])))
        prev = cur
    cost, indels, subs = prev[m]
    ins = (indels + (m - n)) // 2
    dels = indels - ins
    return EditCounts(ins, dels, subs, n - dels - subs)


def wer(reference: str | Sequence[str], hypothesis: str | Sequence[str]) -> float:
    ref, hyp = _words(reference), _words(hypothesis)
    if not ref:
        raise DomainError("WER needs a non-empty reference")
    c = edit_counts(ref, hyp)
    return c.errors / c.ref_len


@dataclass(frozen=True)
class StreamEvent:
    """Partial transcript visible at ``time_ms`` into the stream."""

    time_ms: int
    words: tuple[str, ...]


@dataclass(frozen=True)
class ReferenceAlignment:
    words: tuple[str, ...]
    end_ms: tuple[int, ...]

    def __post_init__(self):
        if len(self.words) != len(self.end_ms):
            raise DomainError("one end time per reference word")
        if any(b < a for a, b in zip(self.end_ms, self.end_ms[1:])):
            raise DomainError("reference end times must be nondecreasing")

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[str, int]]) -> ReferenceAlignment:
        return cls(tuple(str(w).casefold() for w, _ in pairs), tuple(int(t) for _, t in pairs))

    def due(self, time_ms: int) -> list[str]:
        return [w for w, t in zip(self.words, self.end_ms) if t <= time_ms]


def _ratio(total: EditCounts) -> float:
    # a reference prefix can be empty while the hypothesis is not; count
    # such surplus words against a denominator of at least one
    return total.errors / max(total.ref_len, 1)


def _events(timeline: Sequence[StreamEvent]) -> Sequence[StreamEvent]:
    if not timeline:
        raise DomainError("timeline has no events")
    return timeline


def rwer_counts(reference: Sequence[str], timeline: Sequence[StreamEvent]) -> EditCounts:
    ref = _words(reference)
    total = EditCounts()
    for ev in _events(timeline):
        hyp = _words(ev.words)
        total += edit_counts(ref[: min(len(hyp), len(ref))], hyp)
    return total


def rwer(reference: str | Sequence[str], timeline: Sequence[StreamEvent]) -> float:
    """Edit counts of each partial hypothesis against the equally long reference prefix, pooled."""
    return _ratio(rwer_counts(reference, timeline))


def arwer_counts(alignment: ReferenceAlignment, timeline: Sequence[StreamEvent]) -> EditCounts:
    total = EditCounts()
    for ev in _events(timeline):
        total += edit_counts(alignment.due(ev.time_ms), _words(ev.words))
    return total


def arwer(alignment: ReferenceAlignment, timeline: Sequence[StreamEvent]) -> float:
    """Like :func:`rwer`, but the reference prefix is every word already spoken by the event time."""
    return _ratio(arwer_counts(alignment, timeline))


@dataclass(frozen=True)
class TimedWord:
    word: str
    start_ms: int
    end_ms: int


@dataclass(frozen=True)
class TimestampScores:
    precision: float
    recall: float
    sd_ms: float | None
    ed_ms: float | None
    matched: int
    hits: int


def timestamp_metrics(
    alignment: ReferenceAlignment,
    hypothesis: Sequence[TimedWord],
    threshold_ms: float,
    *,
    initial_ms: int = 600,
    stream_end_ms: int | None = None,
) -> TimestampScores:
    """Precision/recall of word timestamps plus mean start (SD) and end (ED) errors.

    Both sides use completion-time segments: reference word w spans from its
    own end time to the next word's end time (the last one to
    ``stream_end_ms``), matching how streaming stamps are produced. Words
    are matched one-to-one, greedily, in temporal order, by identical
    case-folded text. A match is a hit when its start error is within
    ``threshold_ms``. Reference words ending at or before ``initial_ms``
    are excluded, as are unmatched hypothesis words starting by then.
    """
    if threshold_ms <= 0:
        raise DomainError("threshold must be positive")
    n = len(alignment.words)
    last = stream_end_ms if stream_end_ms is not None else (alignment.end_ms[-1] if n else 0)
    ref = [
        TimedWord(alignment.words[i], alignment.end_ms[i], alignment.end_ms[i + 1] if i + 1 < n else max(last, alignment.end_ms[i]))
        for i in range(n)
        if alignment.end_ms[i] > initial_ms
    ]
    hyp = sorted(hypothesis, key=lambda h: h.start_ms)
    start_err: list[float] = []
    end_err: list[float] = []
    hits = 0
    counted_hyp = 0
    j = 0
    for h in hyp:
        word = h.word.casefold()
        match = next((r for r in range(j, len(ref)) if ref[r].word == word), None)
        if match is None:
            counted_hyp += h.start_ms > initial_ms
            continue
        counted_hyp += 1
        j = match + 1
        se = abs(h.start_ms - ref[match].start_ms)
        start_err.append(se)
        end_err.append(abs(h.end_ms - ref[match].end_ms))
        hits += se <= threshold_ms
    return TimestampScores(
        precision=hits / counted_hyp if counted_hyp else 0.0,
        recall=hits / len(ref) if ref else 0.0,
        sd_ms=float(np.mean(start_err)) if start_err else None,
        ed_ms=float(np.mean(end_err)) if end_err else None,
        matched=len(start_err),
        hits=hits,
    )


@dataclass
class RuntimeStats:
    chunk_seconds: list[float]  # processing time per chunk
    audio_seconds: float  # audio represented by one chunk

    def __post_init__(self):
        if self.audio_seconds <= 0:
            raise DomainError("chunk audio duration must be positive")
        if any(t < 0 for t in self.chunk_seconds):
            raise DomainError("processing times are nonnegative")

    def rtf(self) -> list[float]:
        return [t / self.audio_seconds for t in self.chunk_seconds]


def rtf_stats(stats: RuntimeStats) -> dict[str, float]:
    """Mean real-time factor and mean per-chunk latency in seconds."""
    if not stats.chunk_seconds:
        return {"rtf": 0.0, "latency_s": 0.0}
    return {"rtf": float(np.mean(stats.rtf())), "latency_s": float(np.mean(stats.chunk_seconds))}
