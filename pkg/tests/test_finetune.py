from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chunkstream.errors import DomainError, NumericError, TrainingError
from chunkstream.finetune import (
    AlignedUtterance,
    TimedToken,
    TrainConfig,
    ce_loss,
    clip_gradient,
    fd_gradient,
    fd_gradient_lora,
    finetune_run,
    prefix_targets,
    training_schedule,
)
from chunkstream.masking import MaskSpec
from chunkstream.model import (
    EOT,
    SOT,
    ModelConfig,
    apply_lora,
    cross_projections,
    decoder_logits,
    encode_full_masked,
    init_lora,
    init_weights,
    lora_from_vector,
    lora_to_vector,
)

CFG = ModelConfig(d=8, layers_enc=1, layers_dec=1, vocab=6, t_max=64, seed=7)
SPEC = MaskSpec(2, 4)


def utterance(frames=20, tokens=((3, 200), (4, 320)), seed=0, d=8):
    x = np.random.default_rng(seed).standard_normal((frames, d)).astype(np.float32)
    return AlignedUtterance("u", x, tuple(TimedToken(t, e) for t, e in tokens))


def test_prefix_targets():
    utt = utterance(frames=30, tokens=((3, 200), (4, 500)))
    assert prefix_targets(utt, 15) == [3, EOT]
    assert prefix_targets(utt, 30) == [3, 4, EOT]
    assert prefix_targets(utt, 5) == [EOT]


def test_utterance_validation():
    with pytest.raises(DomainError):
        utterance(tokens=((3, 300), (4, 200)))
    with pytest.raises(DomainError):
        utterance(frames=10, tokens=((3, 300),))


def test_uniform_logits_give_log_vocab():
    cfg = ModelConfig(d=8, layers_enc=1, layers_dec=1, vocab=4, t_max=64)
    w = init_weights(cfg)
    w = w.replace(out_proj=np.zeros_like(w["out_proj"]))
    assert ce_loss(w, None, utterance(tokens=((2, 200), (3, 320))), 16, SPEC) == pytest.approx(math.log(4), abs=1e-12)


def test_loss_matches_independent_ce():
    w = init_weights(CFG)
    utt = utterance()
    point = 18
    targets = prefix_targets(utt, point)
    z = encode_full_masked(w, utt.features[:point], SPEC)
    ks, vs = cross_projections(w, z)
    logits = decoder_logits(w, [SOT] + targets[:-1], ks, vs).astype(np.float64)
    nll = []
    for row, t in zip(logits, targets):
        m = max(row)
        lse = m + math.log(math.fsum(math.exp(v - m) for v in row))
        nll.append(lse - row[t])
    assert ce_loss(w, None, utt, point, SPEC) == pytest.approx(math.fsum(nll) / len(nll), abs=1e-6)


def test_loss_ignores_future_frames_and_checks_point():
    w = init_weights(CFG)
    utt = utterance()
    other = AlignedUtterance("v", utt.features.copy(), utt.tokens)
    other.features[12:] += 3.0
    assert ce_loss(w, None, utt, 12, SPEC) == ce_loss(w, None, other, 12, SPEC)
    with pytest.raises(DomainError):
        ce_loss(w, None, utt, 21, SPEC)


def test_fd_gradient_analytic():
    assert fd_gradient(lambda p: float(p[0] ** 2), np.array([3.0]), 1e-3)[0] == pytest.approx(6.0, abs=1e-4)
    assert np.array_equal(fd_gradient(lambda p: 5.0, np.ones(4), 1e-3), np.zeros(4))
    w = np.random.default_rng(0).standard_normal(10)
    g = fd_gradient(lambda p: float(np.sum(p**2)), w, 1e-3)
    assert np.allclose(g, 2 * w, rtol=1e-3)
    with pytest.raises(NumericError):
        fd_gradient(lambda p: float("nan"), np.ones(2), 1e-3)
    with pytest.raises(DomainError):
        fd_gradient(lambda p: 0.0, np.ones(2), 0.0)


@given(st.integers(0, 1000), st.integers(1, 2))
def test_batched_fd_matches_generic(seed, rank):
    w = init_weights(CFG)
    utt = utterance(seed=seed)
    ad = init_lora(CFG, rank, ["enc.0.wq", "dec.0.ca_wv"], seed=seed)
    vec = lora_to_vector(ad) + np.random.default_rng(seed).standard_normal(lora_to_vector(ad).size) * 0.1
    ad = lora_from_vector(ad, vec)
    point = 16

    def loss(p):
        return ce_loss(w, lora_from_vector(ad, p), utt, point, SPEC)

    generic = fd_gradient(loss, lora_to_vector(ad), 1e-2)
    batched = fd_gradient_lora(w, ad, utt, point, SPEC, 1e-2)
    assert np.abs(generic - batched).max() <= 1e-3


def test_lr_zero_keeps_adapters_and_base():
    w = init_weights(CFG)
    digest = w.digest()
    ad = init_lora(CFG, 2, seed=3)
    utt = utterance()
    cfg = TrainConfig(SPEC, f_hat=0.01, lr=0.0, epochs=3)
    res = finetune_run(w, ad, [utt], cfg)
    assert len(res.trace) == 3
    # nothing moves, so every recorded loss is the untrained loss at its point
    assert all(r.loss == ce_loss(w, ad, utt, r.point_frame, SPEC) for r in res.trace)
    for n in ad:
        assert np.array_equal(res.adapters[n].a, ad[n].a) and np.array_equal(res.adapters[n].b, ad[n].b)
    assert w.digest() == digest


def test_untrained_start_reproduces_base_loss():
    w = init_weights(CFG)
    utt = utterance()
    cfg = TrainConfig(SPEC, lr=0.1, max_steps=1)
    res = finetune_run(w, init_lora(CFG, 2), [utt], cfg)
    assert res.trace[0].loss == ce_loss(w, None, utt, res.trace[0].point_frame, SPEC)


def test_empty_adapter_set_is_a_noop():
    w = init_weights(CFG)
    res = finetune_run(w, {}, [utterance()], TrainConfig(SPEC, lr=0.1, max_steps=2))
    assert res.adapters == {} and len(res.trace) == 2


def test_trace_length_accounting():
    w = init_weights(CFG)
    utts = [utterance(frames=20), utterance(frames=12, tokens=((3, 100),))]
    cfg = TrainConfig(SPEC, f_hat=0.5, lr=0.0, epochs=2)
    expected = sum(max(1, math.floor(0.5 * n + 0.5)) for n in (9, 5)) * 2
    res = finetune_run(w, {}, utts, cfg)
    assert len(res.trace) == expected == len(list(training_schedule(utts, cfg)))


def test_two_token_overfit_halves_loss():
    w = init_weights(CFG)
    utt = utterance(frames=12, tokens=((3, 120), (4, 240)))
    cfg = TrainConfig(SPEC, lr=0.1, epochs=50, max_steps=50)
    ad = init_lora(CFG, 2, seed=1)
    res = finetune_run(w, ad, [utt], cfg)
    points = sorted({r.point_frame for r in res.trace})
    before = np.mean([ce_loss(w, ad, utt, p, SPEC) for p in points])
    after = np.mean([ce_loss(w, res.adapters, utt, p, SPEC) for p in points])
    assert after < 0.5 * before


def test_divergence_reports_step():
    w = init_weights(CFG)
    ad = init_lora(CFG, 2)
    with pytest.raises(TrainingError) as info:
        finetune_run(w, ad, [utterance()], TrainConfig(SPEC, lr=1e30, max_steps=5))
    assert info.value.step >= 0


def test_config_validation():
    with pytest.raises(DomainError):
        TrainConfig(SPEC, fd_epsilon=0)
    with pytest.raises(DomainError):
        TrainConfig(SPEC, f_hat=1.5)
    with pytest.raises(DomainError):
        TrainConfig(SPEC, clip_norm=0.0)


def test_clip_gradient():
    g = np.array([3.0, 4.0])
    assert np.allclose(clip_gradient(g, 1.0), [0.6, 0.8])
    assert clip_gradient(g, 5.0) is g
    assert clip_gradient(g, None) is g
