"""Toy encoder-decoder transformer with streaming encoder and cached decoder.

Layers are single-head, pre-norm, with a one-matrix GELU feed-forward:

    encoder:  u <- u + SA(LN(u));  u <- u + gelu(LN(u) W + b);  Z = LN(u_L)
    decoder:  u <- u + SA_causal(LN(u));  u <- u + CA(LN(u), Z);
              u <- u + gelu(LN(u) W + b);  logits = u_L W_out

All weight-consuming functions broadcast over leading batch axes of the
weight tensors, which is how the finite-difference trainer evaluates many
perturbed adapter settings at once.
"""

from __future__ import annotations

import hashlib
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .core import DTYPE, AttentionMask, as_matrix, gelu, layer_norm, log_softmax, masked_attention
from .errors import CapacityError, ChunkingError, DomainError, ShapeError, StateError, UsageError
from .masking import MaskSpec, mask_for_frames
from .opcount import OpCounter

EOT = 0
SOT = 1


@dataclass(frozen=True)
class ModelConfig:
    d: int = 16
    layers_enc: int = 2
    layers_dec: int = 2
    vocab: int = 32
    t_max: int = 1500
    seed: int = 0
    max_tokens: int = 64
    positional: bool = True

    def __post_init__(self):
        if self.d < 2:
            raise UsageError("d must be >= 2")
        if self.vocab < 3:
            raise UsageError("vocab must hold EOT, SOT and at least one word")
        if self.layers_enc < 1 or self.layers_dec < 1:
            raise UsageError("need at least one encoder and one decoder layer")
        if self.t_max < 1 or self.max_tokens < 2:
            raise UsageError("t_max and max_tokens must be positive")

    def check_spec(self, spec: MaskSpec) -> None:
        if self.t_max < spec.tau0:
            raise UsageError(f"t_max={self.t_max} cannot hold tau0={spec.tau0}")


def encoder_names(layer: int) -> list[str]:
    p = f"enc.{layer}."
    return [p + "wq", p + "wk", p + "wv", p + "ff_w", p + "ff_b"]


def decoder_names(layer: int) -> list[str]:
    p = f"dec.{layer}."
    return [p + s for s in ("sa_wq", "sa_wk", "sa_wv", "ca_wq", "ca_wk", "ca_wv", "ff_w", "ff_b")]


def tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    d = config.d
    shapes: dict[str, tuple[int, int]] = {}
    for l in range(config.layers_enc):
        for name in encoder_names(l):
            shapes[name] = (1, d) if name.endswith("ff_b") else (d, d)
    for l in range(config.layers_dec):
        for name in decoder_names(l):
            shapes[name] = (1, d) if name.endswith("ff_b") else (d, d)
    shapes["tok_emb"] = (config.vocab, d)
    shapes["out_proj"] = (d, config.vocab)
    return shapes


@dataclass
class ModelWeights:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def replace(self, **updates: np.ndarray) -> ModelWeights:
        return ModelWeights(self.config, {**self.tensors, **updates})

    def digest(self) -> str:
        """SHA-256 over names, shapes and raw bytes, in name order."""
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            t = np.ascontiguousarray(self.tensors[name])
            h.update(name.encode())
            h.update(str(t.shape).encode())
            h.update(t.tobytes())
        return h.hexdigest()


def _clipped_normal(rng: np.random.Generator, shape: tuple[int, ...], scale: float) -> np.ndarray:
    return (np.clip(rng.standard_normal(shape), -4.0, 4.0) * scale).astype(DTYPE)


def init_weights(config: ModelConfig) -> ModelWeights:
    """Seeded weights: standard normals clipped to [-4, 4], scaled by 1/sqrt(d).

    Generator is numpy's PCG64 (``default_rng(seed)``); tensors are drawn in
    the order of :func:`tensor_shapes`.
    """
    rng = np.random.default_rng(config.seed)
    scale = 1.0 / np.sqrt(config.d)
    tensors = {name: _clipped_normal(rng, shape, scale) for name, shape in tensor_shapes(config).items()}
    return ModelWeights(config, tensors)


def sinusoid(n: int, d: int, offset: int = 0) -> np.ndarray:
    pos = np.arange(offset, offset + n, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = pos / (10000.0 ** (2 * i / d))
    pe = np.zeros((n, d), dtype=np.float64)
    pe[:, 0 : 2 * (d // 2) : 2] = np.sin(angle)
    pe[:, 1 : 2 * (d // 2) : 2] = np.cos(angle)
    return pe.astype(DTYPE)


# ---------------------------------------------------------------------------
# LoRA


@dataclass
class LoraAdapter:
    a: np.ndarray  # d x r
    b: np.ndarray  # r x d
    scale: float = 1.0

    @property
    def rank(self) -> int:
        return self.a.shape[-1]

    def delta(self) -> np.ndarray:
        return (DTYPE(self.scale) * np.matmul(self.a, self.b, dtype=DTYPE)).astype(DTYPE)


def default_lora_targets(config: ModelConfig) -> list[str]:
    names = []
    for l in range(config.layers_enc):
        names += [f"enc.{l}.wq", f"enc.{l}.wk", f"enc.{l}.wv"]
    for l in range(config.layers_dec):
        names += [f"dec.{l}.{p}w{x}" for p in ("sa_", "ca_") for x in "qkv"]
    return names


def init_lora(
    config: ModelConfig,
    rank: int,
    targets: Iterable[str] | None = None,
    seed: int = 0,
    scale: float = 1.0,
) -> dict[str, LoraAdapter]:
    """A drawn like the base weights, B zero: the adapters start inert."""
    if not 1 <= rank <= config.d:
        raise UsageError(f"LoRA rank must be in [1, {config.d}], got {rank}")
    rng = np.random.default_rng(seed)
    targets = default_lora_targets(config) if targets is None else list(targets)
    d = config.d
    return {
        name: LoraAdapter(_clipped_normal(rng, (d, rank), 1.0 / np.sqrt(d)), np.zeros((rank, d), DTYPE), scale)
        for name in targets
    }


def apply_lora(weights: ModelWeights, adapters: Mapping[str, LoraAdapter]) -> ModelWeights:
    """Effective weights ``W + scale * A @ B``; the base tensors are not touched."""
    updates = {}
    for name, ad in adapters.items():
        if name not in weights.tensors:
            raise ShapeError(f"no base tensor named {name!r}")
        base = weights.tensors[name]
        if ad.a.shape[-2] != base.shape[0] or ad.b.shape[-1] != base.shape[1] or ad.a.shape[-1] != ad.b.shape[-2]:
            raise ShapeError(f"adapter for {name} has A{ad.a.shape}, B{ad.b.shape} vs W{base.shape}")
        updates[name] = (base + ad.delta()).astype(DTYPE)
    return weights.replace(**updates)


def lora_layout(adapters: Mapping[str, LoraAdapter]) -> list[tuple[str, str, tuple[int, int]]]:
    """Flat-parameter ordering: sorted adapter names, A before B."""
    return [(n, part, getattr(adapters[n], part).shape[-2:]) for n in sorted(adapters) for part in ("a", "b")]


def lora_to_vector(adapters: Mapping[str, LoraAdapter]) -> np.ndarray:
    parts = [getattr(adapters[n], p).reshape(-1) for n, p, _ in lora_layout(adapters)]
    return np.concatenate(parts).astype(np.float64) if parts else np.zeros(0)


def lora_from_vector(template: Mapping[str, LoraAdapter], vec: np.ndarray) -> dict[str, LoraAdapter]:
    """Inverse of :func:`lora_to_vector`; a 2-D ``vec`` yields batched adapters."""
    vec = np.asarray(vec)
    batch = vec.shape[:-1]
    layout = lora_layout(template)
    need = sum(s[0] * s[1] for _, _, s in layout)
    if vec.shape[-1] != need:
        raise ShapeError(f"parameter vector has {vec.shape[-1]} entries, layout needs {need}")
    out: dict[str, dict[str, np.ndarray]] = {}
    pos = 0
    for name, part, shape in layout:
        size = shape[0] * shape[1]
        chunk = vec[..., pos : pos + size].reshape(batch + shape).astype(DTYPE)
        out.setdefault(name, {})[part] = chunk
        pos += size
    return {n: LoraAdapter(p["a"], p["b"], template[n].scale) for n, p in out.items()}


# ---------------------------------------------------------------------------
# encoder


def _project(x: np.ndarray, w: np.ndarray, counter: OpCounter | None) -> np.ndarray:
    if counter is not None:
        rows = int(np.prod(np.broadcast_shapes(x.shape[:-1], w.shape[:-2] + (1,)), dtype=np.int64))
        counter.add("projection", rows * w.shape[-2] * w.shape[-1])
    return np.matmul(x, w, dtype=DTYPE)


def _encoder_layer(
    weights: ModelWeights,
    l: int,
    u: np.ndarray,
    mask: AttentionMask | None,
    counter: OpCounter | None,
) -> np.ndarray:
    p = f"enc.{l}."
    h = layer_norm(u)
    q = _project(h, weights[p + "wq"], counter)
    k = _project(h, weights[p + "wk"], counter)
    v = _project(h, weights[p + "wv"], counter)
    u = u + masked_attention(q, k, v, mask, counter=counter)
    return u + gelu(np.matmul(layer_norm(u), weights[p + "ff_w"], dtype=DTYPE) + weights[p + "ff_b"])


def _embed_frames(weights: ModelWeights, x: np.ndarray, offset: int = 0) -> np.ndarray:
    cfg = weights.config
    if x.shape[-1] != cfg.d:
        raise ShapeError(f"features have {x.shape[-1]} columns, model dim is {cfg.d}")
    if offset + x.shape[-2] > cfg.t_max:
        raise CapacityError(f"{offset + x.shape[-2]} frames exceed t_max={cfg.t_max}")
    x = np.asarray(x, dtype=DTYPE)
    if cfg.positional:
        x = x + sinusoid(x.shape[-2], cfg.d, offset)
    return x


def encode_noncausal(weights: ModelWeights, x: np.ndarray, *, counter: OpCounter | None = None) -> np.ndarray:
    """Bidirectional encoder: every frame attends to every frame."""
    u = _embed_frames(weights, x)
    for l in range(weights.config.layers_enc):
        u = _encoder_layer(weights, l, u, None, counter)
    return layer_norm(u)


def encode_full_masked(
    weights: ModelWeights,
    x: np.ndarray,
    spec: MaskSpec,
    *,
    counter: OpCounter | None = None,
) -> np.ndarray:
    """One-pass encoder under the blocked causal mask at every layer."""
    n = x.shape[-2]
    if not spec.is_boundary(n):
        raise ChunkingError(f"{n} frames is not a chunk boundary for {spec}")
    mask = mask_for_frames(n, spec)
    u = _embed_frames(weights, x)
    for l in range(weights.config.layers_enc):
        u = _encoder_layer(weights, l, u, mask, counter)
    return layer_norm(u)


@dataclass
class EncoderCache:
    spec: MaskSpec
    keys: list[np.ndarray]
    values: list[np.ndarray]
    frames_seen: int = 0

    @classmethod
    def empty(cls, config: ModelConfig, spec: MaskSpec) -> EncoderCache:
        config.check_spec(spec)
        z = np.zeros((0, config.d), DTYPE)
        return cls(spec, [z] * config.layers_enc, [z] * config.layers_enc)

    def expected_chunk(self) -> int:
        return self.spec.tau0 if self.frames_seen == 0 else self.spec.tau


def encode_stream(
    cache: EncoderCache,
    weights: ModelWeights,
    chunk: np.ndarray,
    *,
    counter: OpCounter | None = None,
) -> np.ndarray:
    """Encode one chunk against the cached keys/values; returns the new rows.

    Every query in the new chunk may attend every cached frame and every
    frame of its own chunk, so no mask is needed here; the result matches
    the masked one-pass encoder row for row.
    """
    n = chunk.shape[0]
    want = cache.expected_chunk()
    if n != want:
        raise ChunkingError(f"expected a chunk of {want} frames, got {n}")
    u = _embed_frames(weights, as_matrix(chunk, cols=weights.config.d), cache.frames_seen)
    for l in range(weights.config.layers_enc):
        p = f"enc.{l}."
        h = layer_norm(u)
        q = _project(h, weights[p + "wq"], counter)
        k = _project(h, weights[p + "wk"], counter)
        v = _project(h, weights[p + "wv"], counter)
        cache.keys[l] = np.concatenate([cache.keys[l], k])
        cache.values[l] = np.concatenate([cache.values[l], v])
        if counter is not None:
            counter.add_cache(k.nbytes + v.nbytes)
        u = u + masked_attention(q, cache.keys[l], cache.values[l], None, counter=counter)
        u = u + gelu(np.matmul(layer_norm(u), weights[p + "ff_w"], dtype=DTYPE) + weights[p + "ff_b"])
    cache.frames_seen += n
    return layer_norm(u)


# ---------------------------------------------------------------------------
# decoder


@dataclass
class DecoderSession:
    """Per-stream decoder state.

    ``cross_k``/``cross_v`` hold cross-attention projections of every encoder
    row seen so far. ``self_cache`` (when enabled) maps a token prefix to the
    per-layer self-attention key/value rows of its last position, frozen at
    the moment they were first computed; reusing them after more audio has
    arrived is the approximate cache.
    """

    cross_k: list[np.ndarray]
    cross_v: list[np.ndarray]
    encoder_frames_seen: int = 0
    self_cache: dict[tuple[int, ...], list[tuple[np.ndarray, np.ndarray]]] | None = None
    history: list[dict] = field(default_factory=list)

    @classmethod
    def empty(cls, config: ModelConfig, self_cache: bool = False) -> DecoderSession:
        z = np.zeros((0, config.d), DTYPE)
        return cls([z] * config.layers_dec, [z] * config.layers_dec, 0, {} if self_cache else None)

    @property
    def uses_self_cache(self) -> bool:
        return self.self_cache is not None


def extend_cross_cache(
    session: DecoderSession,
    weights: ModelWeights,
    new_rows: np.ndarray,
    *,
    counter: OpCounter | None = None,
) -> DecoderSession:
    """Project only the new encoder rows and append them to each layer's cache."""
    if new_rows.shape[0] == 0:
        return session
    for l in range(weights.config.layers_dec):
        p = f"dec.{l}."
        k = _project(new_rows, weights[p + "ca_wk"], counter)
        v = _project(new_rows, weights[p + "ca_wv"], counter)
        session.cross_k[l] = np.concatenate([session.cross_k[l], k])
        session.cross_v[l] = np.concatenate([session.cross_v[l], v])
        if counter is not None:
            counter.add_cache(k.nbytes + v.nbytes)
    session.encoder_frames_seen += new_rows.shape[0]
    return session


def session_from_encoding(weights: ModelWeights, z: np.ndarray, self_cache: bool = False) -> DecoderSession:
    return extend_cross_cache(DecoderSession.empty(weights.config, self_cache), weights, z)


def _token_inputs(weights: ModelWeights, tokens: Sequence[int], offset: int = 0) -> np.ndarray:
    cfg = weights.config
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab):
        raise DomainError(f"token id out of range [0, {cfg.vocab})")
    if offset + ids.size > cfg.max_tokens:
        raise CapacityError(f"{offset + ids.size} decoder positions exceed max_tokens={cfg.max_tokens}")
    emb = weights["tok_emb"][..., ids, :]
    return (emb + sinusoid(ids.size, cfg.d, offset)).astype(DTYPE)


def decoder_logits(
    weights: ModelWeights,
    tokens: Sequence[int],
    cross_k: Sequence[np.ndarray],
    cross_v: Sequence[np.ndarray],
) -> np.ndarray:
    """Teacher-forced logits for every position (no caching)."""
    n = len(tokens)
    causal = AttentionMask.causal(n)
    u = _token_inputs(weights, tokens)
    for l in range(weights.config.layers_dec):
        p = f"dec.{l}."
        h = layer_norm(u)
        q = np.matmul(h, weights[p + "sa_wq"], dtype=DTYPE)
        k = np.matmul(h, weights[p + "sa_wk"], dtype=DTYPE)
        v = np.matmul(h, weights[p + "sa_wv"], dtype=DTYPE)
        u = u + masked_attention(q, k, v, causal)
        qc = np.matmul(layer_norm(u), weights[p + "ca_wq"], dtype=DTYPE)
        u = u + masked_attention(qc, cross_k[l], cross_v[l], None)
        u = u + gelu(np.matmul(layer_norm(u), weights[p + "ff_w"], dtype=DTYPE) + weights[p + "ff_b"])
    return np.matmul(u, weights["out_proj"], dtype=DTYPE)


def cross_projections(weights: ModelWeights, z: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    ks, vs = [], []
    for l in range(weights.config.layers_dec):
        ks.append(np.matmul(z, weights[f"dec.{l}.ca_wk"], dtype=DTYPE))
        vs.append(np.matmul(z, weights[f"dec.{l}.ca_wv"], dtype=DTYPE))
    return ks, vs


def _decoder_step_cached(session: DecoderSession, weights: ModelWeights, tokens: tuple[int, ...]) -> np.ndarray:
    cache = session.self_cache
    assert cache is not None
    n = len(tokens)
    # longest prefix whose rows are cached, excluding the query position itself
    c = n - 1
    while c > 0 and tokens[:c] not in cache:
        c -= 1
    past_k = [[] for _ in range(weights.config.layers_dec)]
    past_v = [[] for _ in range(weights.config.layers_dec)]
    for pos in range(c):
        for l, (k, v) in enumerate(cache[tokens[: pos + 1]]):
            past_k[l].append(k)
            past_v[l].append(v)
    m = n - c
    u = _token_inputs(weights, tokens[c:], offset=c)
    new_rows: list[list[tuple[np.ndarray, np.ndarray]]] = [[] for _ in range(m)]
    causal = AttentionMask(np.tri(m, n, c, dtype=bool))
    for l in range(weights.config.layers_dec):
        p = f"dec.{l}."
        h = layer_norm(u)
        q = np.matmul(h, weights[p + "sa_wq"], dtype=DTYPE)
        k = np.matmul(h, weights[p + "sa_wk"], dtype=DTYPE)
        v = np.matmul(h, weights[p + "sa_wv"], dtype=DTYPE)
        for r in range(m):
            new_rows[r].append((k[r : r + 1], v[r : r + 1]))
        keys = np.concatenate(past_k[l] + [k]) if c else k
        vals = np.concatenate(past_v[l] + [v]) if c else v
        u = u + masked_attention(q, keys, vals, causal)
        qc = np.matmul(layer_norm(u), weights[p + "ca_wq"], dtype=DTYPE)
        u = u + masked_attention(qc, session.cross_k[l], session.cross_v[l], None)
        u = u + gelu(np.matmul(layer_norm(u), weights[p + "ff_w"], dtype=DTYPE) + weights[p + "ff_b"])
    for r in range(m):
        cache.setdefault(tokens[: c + r + 1], new_rows[r])
    return np.matmul(u[-1:], weights["out_proj"], dtype=DTYPE)[0]


def decoder_step(session: DecoderSession, weights: ModelWeights, tokens: Sequence[int]) -> np.ndarray:
    """Log-probabilities (float64) of the next token after ``tokens``.

    ``tokens`` is the full decoder input and must start with SOT.
    """
    if len(tokens) == 0:
        raise DomainError("decoder needs at least the begin-of-transcript token")
    if tokens[0] != SOT:
        raise DomainError("decoder input must start with SOT")
    if session.encoder_frames_seen == 0:
        raise StateError("decoder session has no encoder frames yet")
    if session.uses_self_cache:
        logits = _decoder_step_cached(session, weights, tuple(int(t) for t in tokens))
    else:
        logits = decoder_logits(weights, tokens, session.cross_k, session.cross_v)[-1]
    return log_softmax(logits)


# ---------------------------------------------------------------------------
# analysis helpers


def _plain_sa(weights: ModelWeights, u: np.ndarray, layer: int, mask: AttentionMask | None) -> tuple[np.ndarray, np.ndarray]:
    p = f"enc.{layer}."
    q = np.matmul(u, weights[p + "wq"], dtype=DTYPE)
    k = np.matmul(u, weights[p + "wk"], dtype=DTYPE)
    v = np.matmul(u, weights[p + "wv"], dtype=DTYPE)
    return masked_attention(q, k, v, mask), v


def sa_output_delta(
    weights: ModelWeights,
    u: np.ndarray,
    k: int,
    spec: MaskSpec,
    i: int,
    *,
    layer: int = 0,
    masked: bool = False,
) -> float:
    """L2 change of self-attention row ``i`` (1-based) when chunk k+1 is appended.

    Uses the plain projections Q = U W_Q, K = U W_K, V = U W_V of encoder
    layer ``layer``. With ``masked=True`` both passes use the blocked causal
    mask, and the change is identically zero.
    """
    short, full = k * spec.tau, (k + 1) * spec.tau
    if k < 1 or full > u.shape[0]:
        raise DomainError(f"need (k+1)*tau = {full} <= {u.shape[0]} rows with k >= 1")
    if not 1 <= i <= short:
        raise DomainError(f"row {i} outside 1..{short}")
    u = np.asarray(u, dtype=DTYPE)
    m_short = mask_for_frames(short, spec) if masked else None
    m_full = mask_for_frames(full, spec) if masked else None
    a, _ = _plain_sa(weights, u[:short], layer, m_short)
    b, _ = _plain_sa(weights, u[:full], layer, m_full)
    return float(np.linalg.norm(a[i - 1].astype(np.float64) - b[i - 1].astype(np.float64)))


def value_norm_bound(weights: ModelWeights, u: np.ndarray, rows: int, *, layer: int = 0) -> float:
    """Largest value-vector norm over the first ``rows`` rows of ``u``."""
    v = np.matmul(np.asarray(u[:rows], dtype=DTYPE), weights[f"enc.{layer}.wv"], dtype=DTYPE)
    return float(np.linalg.norm(v.astype(np.float64), axis=1).max())
