from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from chunkstream.errors import CapacityError, ChunkingError, DomainError, ShapeError, StateError, UsageError
from chunkstream.masking import MaskSpec
from chunkstream.model import (
    EOT,
    SOT,
    DecoderSession,
    EncoderCache,
    LoraAdapter,
    ModelConfig,
    apply_lora,
    decoder_step,
    encode_full_masked,
    encode_noncausal,
    encode_stream,
    extend_cross_cache,
    init_lora,
    init_weights,
    lora_from_vector,
    lora_to_vector,
    sa_output_delta,
    session_from_encoding,
    tensor_shapes,
    value_norm_bound,
)
from chunkstream.opcount import OpCounter

CFG = ModelConfig(d=8, layers_enc=2, layers_dec=2, vocab=7, t_max=64, seed=3)


def feats(n, d=8, seed=0):
    return np.random.default_rng(seed).standard_normal((n, d)).astype(np.float32)


def test_init_deterministic_and_bounded():
    a, b = init_weights(CFG), init_weights(CFG)
    assert a.digest() == b.digest()
    assert init_weights(ModelConfig(d=8, vocab=7, seed=4)).digest() != a.digest()
    for name, shape in tensor_shapes(CFG).items():
        t = a[name]
        assert t.shape == shape and t.dtype == np.float32
        assert np.isfinite(t).all() and np.abs(t).max() <= 4 / np.sqrt(CFG.d) + 1e-7


def test_config_validation():
    with pytest.raises(UsageError):
        ModelConfig(d=1)
    with pytest.raises(UsageError):
        ModelConfig(vocab=2)
    with pytest.raises(UsageError):
        ModelConfig(t_max=4).check_spec(MaskSpec(4, 8))


def test_encoders_match_float64_reference():
    w = init_weights(CFG)
    x = feats(12)
    spec = MaskSpec(2, 4)
    assert np.abs(encode_noncausal(w, x) - oracles.encoder(w, x)).max() <= 1e-4
    assert np.abs(encode_full_masked(w, x, spec) - oracles.encoder(w, x, spec)).max() <= 1e-4


def test_single_frame_and_degenerate_mask():
    w = init_weights(CFG)
    x = feats(1)
    assert np.array_equal(encode_noncausal(w, x), encode_full_masked(w, x, MaskSpec(1, 1)))
    x = feats(6)
    assert np.array_equal(encode_noncausal(w, x), encode_full_masked(w, x, MaskSpec(6, 6)))


def test_noncausal_prefix_diverges():
    w = init_weights(CFG)
    x = feats(8, seed=1)
    assert np.abs(encode_noncausal(w, x)[:4] - encode_noncausal(w, x[:4])).max() > 1e-3


def test_permutation_equivariance_without_positions():
    cfg = ModelConfig(d=8, vocab=7, t_max=64, seed=5, positional=False)
    w = init_weights(cfg)
    x = feats(6, seed=2)
    perm = np.array([3, 0, 5, 1, 4, 2])
    assert np.abs(encode_noncausal(w, x)[perm] - encode_noncausal(w, x[perm])).max() <= 1e-5


@given(st.integers(0, 10_000), st.sampled_from([1, 2, 3]), st.integers(1, 3), st.integers(1, 5))
def test_stream_equals_masked_pass(seed, tau, mult, k):
    w = init_weights(ModelConfig(d=8, layers_enc=2, vocab=5, t_max=64, seed=seed))
    spec = MaskSpec(tau, tau * mult)
    n = spec.tau0 + (k - 1) * tau
    x = feats(n, seed=seed)
    cache = EncoderCache.empty(w.config, spec)
    rows = [encode_stream(cache, w, x[: spec.tau0])]
    for a in range(spec.tau0, n, tau):
        rows.append(encode_stream(cache, w, x[a : a + tau]))
    full = encode_full_masked(w, x, spec)
    assert np.abs(np.concatenate(rows) - full).max() <= 1e-5
    assert all(c.shape[0] == n for c in cache.keys)
    # prefix property against a truncated re-encode
    for m in range(1, k + 1):
        b = spec.boundary(m)
        assert np.abs(full[:b] - encode_full_masked(w, x[:b], spec)).max() <= 1e-5


def test_masked_tail_independence():
    w = init_weights(CFG)
    spec = MaskSpec(2, 4)
    x = feats(10)
    y = x.copy()
    y[6:] += 5
    assert np.array_equal(encode_full_masked(w, x, spec)[:6], encode_full_masked(w, y, spec)[:6])


def test_stream_errors():
    w = init_weights(ModelConfig(d=8, vocab=5, t_max=8))
    spec = MaskSpec(2, 4)
    cache = EncoderCache.empty(w.config, spec)
    with pytest.raises(ChunkingError):
        encode_stream(cache, w, feats(2))
    encode_stream(cache, w, feats(4))
    encode_stream(cache, w, feats(2))
    encode_stream(cache, w, feats(2))
    with pytest.raises(CapacityError):
        encode_stream(cache, w, feats(2))
    with pytest.raises(ChunkingError):
        encode_full_masked(w, feats(5), spec)
    with pytest.raises(ShapeError):
        encode_noncausal(w, feats(3, d=4))


def test_decoder_matches_reference_and_normalizes():
    w = init_weights(CFG)
    z = encode_full_masked(w, feats(8), MaskSpec(2, 4))
    s = session_from_encoding(w, z)
    for toks in ([SOT], [SOT, 3], [SOT, 3, 4, 2]):
        lp = decoder_step(s, w, toks)
        assert lp.shape == (CFG.vocab,)
        assert abs(np.logaddexp.reduce(lp)) <= 1e-5
        assert np.abs(lp - oracles.decoder_logprobs(w, toks, z)).max() <= 1e-4
        assert np.array_equal(lp, decoder_step(s, w, toks))


def test_decoder_errors():
    w = init_weights(CFG)
    with pytest.raises(StateError):
        decoder_step(DecoderSession.empty(CFG), w, [SOT])
    s = session_from_encoding(w, encode_noncausal(w, feats(4)))
    with pytest.raises(DomainError):
        decoder_step(s, w, [])
    with pytest.raises(DomainError):
        decoder_step(s, w, [EOT])
    with pytest.raises(DomainError):
        decoder_step(s, w, [SOT, 99])


def test_more_audio_changes_distribution():
    w = init_weights(CFG)
    spec = MaskSpec(2, 4)
    z = encode_full_masked(w, feats(8), spec)
    a = decoder_step(session_from_encoding(w, z[:4]), w, [SOT, 2])
    b = decoder_step(session_from_encoding(w, z), w, [SOT, 2])
    assert np.linalg.norm(a - b) > 0


def test_cross_cache_extension_matches_rebuild():
    w = init_weights(CFG)
    spec = MaskSpec(2, 4)
    z = encode_full_masked(w, feats(10), spec)
    s = DecoderSession.empty(CFG)
    extend_cross_cache(s, w, z[:4])
    assert extend_cross_cache(s, w, z[:0]).encoder_frames_seen == 4
    for a in range(4, 10, 2):
        extend_cross_cache(s, w, z[a : a + 2])
        assert s.cross_k[0].shape[0] == s.encoder_frames_seen == a + 2
    ref = session_from_encoding(w, z)
    assert np.abs(decoder_step(s, w, [SOT, 5, 2]) - decoder_step(ref, w, [SOT, 5, 2])).max() <= 1e-6


def test_self_cache_is_approximate():
    w = init_weights(CFG)
    spec = MaskSpec(2, 4)
    z = encode_full_masked(w, feats(8), spec)
    s = session_from_encoding(w, z[:4], self_cache=True)
    first = decoder_step(s, w, [SOT, 3, 4])
    assert np.abs(first - decoder_step(session_from_encoding(w, z[:4]), w, [SOT, 3, 4])).max() <= 1e-5
    extend_cross_cache(s, w, z[4:])
    stale = decoder_step(s, w, [SOT, 3, 4])
    exact = decoder_step(session_from_encoding(w, z), w, [SOT, 3, 4])
    assert np.abs(stale - exact).max() > 0


def test_delta_bound_and_masked_zero():
    w = init_weights(CFG)
    spec = MaskSpec(2, 4)
    u = feats(8, seed=9)
    for i in range(1, 5):
        delta = sa_output_delta(w, u, 2, spec, i)
        assert 0 < delta <= 2 * value_norm_bound(w, u, 6)
        assert sa_output_delta(w, u, 2, spec, i, masked=True) == 0.0
    same = np.tile(u[:1], (8, 1))
    assert sa_output_delta(w, same, 2, spec, 1) <= 1e-6
    with pytest.raises(DomainError):
        sa_output_delta(w, u, 4, spec, 1)


def test_lora_inert_and_exact():
    w = init_weights(CFG)
    ad = init_lora(CFG, 2, seed=1)
    eff = apply_lora(w, ad)
    for name in ad:
        assert np.array_equal(eff[name], w[name])
    x = feats(8)
    spec = MaskSpec(2, 4)
    assert np.array_equal(encode_full_masked(eff, x, spec), encode_full_masked(w, x, spec))
    rng = np.random.default_rng(0)
    a = rng.standard_normal((8, 8)).astype(np.float32)
    b = rng.standard_normal((8, 8)).astype(np.float32)
    full = apply_lora(w, {"enc.0.wq": LoraAdapter(a, b, 0.5)})
    assert np.abs(full["enc.0.wq"] - (w["enc.0.wq"] + 0.5 * a @ b)).max() <= 1e-5
    assert w.digest() == init_weights(CFG).digest()
    with pytest.raises(ShapeError):
        apply_lora(w, {"enc.0.wq": LoraAdapter(a[:4], b, 1.0)})
    with pytest.raises(UsageError):
        init_lora(CFG, 9)


def test_lora_vector_roundtrip():
    ad = init_lora(CFG, 3, seed=2)
    vec = lora_to_vector(ad)
    back = lora_from_vector(ad, vec)
    for n in ad:
        assert np.array_equal(back[n].a, ad[n].a) and np.array_equal(back[n].b, ad[n].b)
    batched = lora_from_vector(ad, np.stack([vec, vec + 1]))
    assert batched["enc.0.wq"].a.shape == (2, 8, 3)
    with pytest.raises(ShapeError):
        lora_from_vector(ad, vec[:-1])


def test_projection_counts():
    w = init_weights(ModelConfig(d=8, layers_enc=1, vocab=5))
    c = OpCounter()
    encode_noncausal(w, feats(4), counter=c)
    assert c.macs["projection"] == 3 * 4 * 8 * 8
    assert c.macs["dot_product"] == 16 * 8
