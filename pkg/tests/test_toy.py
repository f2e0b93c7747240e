from __future__ import annotations

import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from chunkstream.masking import FRAME_MS
from chunkstream.model import ModelConfig
from chunkstream.toy import ToySpec, make_dataset, make_utterance, text_token, word_text, word_vectors

CFG = ModelConfig()


@given(st.integers(0, 10_000), st.sampled_from([1, 2, 5]), st.integers(1, 4))
def test_ends_increase_fit_and_snap(seed, quantum, words):
    toy = ToySpec(words=words, end_quantum=quantum)
    utt = make_utterance(CFG, "u", seed, toy)
    ends = [t.end_ms // FRAME_MS for t in utt.tokens]
    assert len(ends) == words
    assert all(b > a for a, b in zip(ends, ends[1:]))
    assert ends[0] >= toy.min_first_end and ends[-1] <= toy.frames
    assert all(e % quantum == 0 for e in ends if e < toy.frames)


def test_word_is_heard_only_in_its_burst():
    toy = ToySpec()
    utt = make_utterance(CFG, "u", 1, toy)
    v = word_vectors(CFG, 0)
    energy = np.abs(utt.features @ v[[t.id for t in utt.tokens]].T)
    silent = np.ones(utt.frames, bool)
    for j, tok in enumerate(utt.tokens):
        e = tok.end_ms // FRAME_MS
        assert energy[e - toy.marker_frames : e, j].min() > 4.0
        silent[e - toy.marker_frames : e] = False
    assert energy[silent].max() < 1.0


def test_dataset_is_seeded_and_words_roundtrip():
    a = make_dataset(CFG, 2, 3)
    b = make_dataset(CFG, 2, 3)
    assert all(np.array_equal(x.features, y.features) and x.tokens == y.tokens for x, y in zip(a, b))
    assert [w for w, _ in a[0].words] == [word_text(t.id) for t in a[0].tokens]
    assert text_token(word_text(17)) == 17 and text_token("W5") == 5
