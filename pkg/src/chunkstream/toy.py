"""Synthetic aligned utterances for tests and the ``gen-toy`` command.

Each word is one token, heard as a short burst of a word-specific direction
that ends at the word's end time; everything else is low-level noise. A
word is therefore visible exactly once it has ended, which is the condition
the prefix targets train on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .finetune import AlignedUtterance, TimedToken
from .masking import FRAME_MS
from .model import DTYPE, ModelConfig


def word_text(token: int) -> str:
    return f"w{token}"


def text_token(word: str) -> int:
    return int(word.casefold().lstrip("w"))


@dataclass(frozen=True)
class ToySpec:
    frames: int = 150
    words: int = 3
    marker_frames: int = 5
    marker_gain: float = 6.0  # well above the positional encoding so bursts stand out
    noise: float = 0.1
    min_first_end: int = 20  # no word may end inside a short initial chunk
    tail: int = 25  # trailing silence after the last word
    # word ends snap up to multiples of this many frames; the chunk length
    # makes every chunk boundary see either none or all of a word
    end_quantum: int = 1


def word_vectors(config: ModelConfig, seed: int) -> np.ndarray:
    """One unit-norm direction per vocabulary entry (EOT/SOT rows unused)."""
    rng = np.random.default_rng([seed, 0x70])
    v = rng.standard_normal((config.vocab, config.d))
    return (v / np.linalg.norm(v, axis=1, keepdims=True)).astype(DTYPE)


def make_utterance(
    config: ModelConfig,
    uid: str,
    seed: int,
    toy: ToySpec = ToySpec(),
    vectors: np.ndarray | None = None,
    tokens: list[int] | None = None,
) -> AlignedUtterance:
    rng = np.random.default_rng([seed, 0x71])
    vectors = word_vectors(config, 0) if vectors is None else vectors
    if tokens is None:
        tokens = [int(t) for t in rng.integers(2, config.vocab, size=toy.words)]
    n = len(tokens)
    # word end frames: spread over the utterance with jitter, strictly increasing
    last = max(toy.min_first_end, toy.frames - toy.tail)
    slots = np.linspace(toy.min_first_end, last, n) if n > 1 else np.array([toy.frames // 2])
    jitter = rng.integers(-3, 4, size=n)
    ends = np.clip(np.round(slots).astype(int) + jitter, toy.min_first_end, toy.frames)
    ends = np.maximum.accumulate(ends + np.arange(n)) - np.arange(n)
    q = toy.end_quantum
    for i in range(n):
        if i:
            ends[i] = max(ends[i], ends[i - 1] + toy.marker_frames + 2)
        ends[i] = -(-ends[i] // q) * q
    ends = np.minimum(ends, toy.frames)

    x = (toy.noise * rng.standard_normal((toy.frames, config.d))).astype(DTYPE)
    for tok, e in zip(tokens, ends):
        x[max(0, e - toy.marker_frames) : e] += toy.marker_gain * vectors[tok]
    timed = tuple(TimedToken(t, int(e) * FRAME_MS) for t, e in zip(tokens, ends))
    words = tuple((word_text(t), int(e) * FRAME_MS) for t, e in zip(tokens, ends))
    return AlignedUtterance(uid, x, timed, words)


def make_dataset(config: ModelConfig, count: int, seed: int, toy: ToySpec = ToySpec()) -> list[AlignedUtterance]:
    vectors = word_vectors(config, seed)
    return [make_utterance(config, f"utt{i:04d}", seed * 100003 + i, toy, vectors) for i in range(count)]
