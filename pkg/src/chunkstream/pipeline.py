"""End-to-end stream simulation: chunk the features, encode with the cache,
decode, and record one timeline event per chunk."""

from __future__ import annotations

import time
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .decode import BeamStreamDecoder, GreedyStreamDecoder, ModelScorer, topk
from .errors import InsufficientInputError
from .masking import FRAME_MS, MaskSpec
from .metrics import RuntimeStats, TimedWord
from .model import EOT, EncoderCache, LoraAdapter, ModelWeights, apply_lora, encode_stream
from .opcount import OpCounter


@dataclass(frozen=True)
class DecodeOptions:
    mode: str = "greedy"  # or "beam"
    beam: int = 5
    n: int = 2
    self_cache: bool = False
    timing: bool = True
    dump_topk: int = 0  # 0 disables the per-chunk distribution dump


@dataclass
class StreamResult:
    timeline: list[dict]
    tokens: tuple[int, ...]
    text: str
    timestamps: list[TimedWord]
    runtime: RuntimeStats
    topk_dump: list[dict] = field(default_factory=list)
    counter: OpCounter = field(default_factory=OpCounter)


def stream_chunks(features: np.ndarray, spec: MaskSpec) -> list[np.ndarray]:
    """Split into the initial chunk and full chunks; a trailing partial chunk is dropped."""
    total = features.shape[0]
    if total < spec.tau0:
        raise InsufficientInputError(f"{total} frames cannot fill the initial chunk of {spec.tau0}")
    usable = spec.tau0 + (total - spec.tau0) // spec.tau * spec.tau
    sizes = spec.chunk_sizes(usable)
    bounds = np.cumsum([0] + sizes)
    return [features[a:b] for a, b in zip(bounds[:-1], bounds[1:])]


def render(tokens: Sequence[int], vocab: Sequence[str]) -> str:
    return " ".join(vocab[t] for t in tokens if t != EOT)


def stream_utterance(
    weights: ModelWeights,
    features: np.ndarray,
    spec: MaskSpec,
    vocab: Sequence[str],
    options: DecodeOptions = DecodeOptions(),
    adapters: dict[str, LoraAdapter] | None = None,
) -> StreamResult:
    eff = apply_lora(weights, adapters) if adapters else weights
    weights.config.check_spec(spec)
    counter = OpCounter()
    cache = EncoderCache.empty(eff.config, spec)
    scorer = ModelScorer(eff, self_cache=options.self_cache, counter=counter)
    if options.mode == "beam":
        decoder: GreedyStreamDecoder | BeamStreamDecoder = BeamStreamDecoder(scorer, options.beam, options.n)
    else:
        decoder = GreedyStreamDecoder(scorer, options.n)
    timeline: list[dict] = []
    dump: list[dict] = []
    seconds: list[float] = []
    for chunk in stream_chunks(features, spec):
        t0 = time.perf_counter()
        rows = encode_stream(cache, eff, chunk, counter=counter)
        ev = decoder.step(rows)
        elapsed = time.perf_counter() - t0 if options.timing else 0.0
        seconds.append(elapsed)
        timeline.append(
            {
                "k": ev.k,
                "time_ms": ev.time_ms,
                "tokens": list(ev.tokens),
                "text": render(ev.tokens, vocab),
                "latency_ms": round(elapsed * 1000.0, 3),
                "committed": list(ev.committed),
            }
        )
        if options.dump_topk:
            dump.extend(_topk_records(scorer, ev.k, ev.time_ms, ev.tokens, options.dump_topk))
    tokens = decoder.finish()
    stamps: list[TimedWord] = []
    if isinstance(decoder, GreedyStreamDecoder):
        stamps = [TimedWord(vocab[w.token], w.start_ms, w.end_ms) for w in decoder.timestamps()]
    return StreamResult(
        timeline,
        tokens,
        render(tokens, vocab),
        stamps,
        RuntimeStats(seconds, spec.tau_ms / 1000.0),
        dump,
        counter,
    )


def _topk_records(scorer: ModelScorer, k: int, time_ms: int, tokens: tuple[int, ...], top: int) -> list[dict]:
    out = []
    for pos in range(len(tokens) + 1):
        lp = scorer.logprobs(tuple(tokens[:pos]))
        idx = sorted(topk(lp, min(top, lp.size)), key=lambda i: (-lp[i], i))
        out.append(
            {
                "k": k,
                "time_ms": time_ms,
                "position": pos,
                "prefix": list(tokens[:pos]),
                "top": [[int(i), round(float(np.exp(lp[i])), 6)] for i in idx],
            }
        )
    return out


def stream_frames_ms(features: np.ndarray) -> int:
    return features.shape[0] * FRAME_MS
