"""Encoder cost comparison across three ways of serving a stream.

(a) ``cached``: streaming encoder with the key/value cache
(b) ``recompute``: masked encoder re-run from scratch on every prefix
(c) ``padded``: bidirectional encoder on the prefix zero-padded to T frames

MAC counts are exact and deterministic; wall clock is the median over trials.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .masking import MaskSpec
from .model import DTYPE, EncoderCache, ModelConfig, ModelWeights, encode_full_masked, encode_noncausal, encode_stream, init_weights
from .opcount import OpCounter

STRATEGIES = ("cached", "recompute", "padded")


def closed_form_dot_macs(t: int, spec: MaskSpec, d: int) -> int:
    """Dot-product MACs per layer for the cached encoder over ``t`` frames.

    The initial chunk is a dense tau0 x tau0 block; chunk m >= 1 then
    scores tau queries against tau0 + m*tau keys. With tau0 = tau this is
    T^2 d / 2 + T tau d / 2.
    """
    chunks = (t - spec.tau0) // spec.tau
    return spec.tau0 * spec.tau0 * d + sum(spec.tau * (spec.tau0 + m * spec.tau) * d for m in range(1, chunks + 1))


@dataclass
class BenchConfig:
    frames: int
    d: int
    tau: int
    tau0: int
    layers: int = 1
    trials: int = 5
    seed: int = 0
    timing: bool = True
    strategies: tuple[str, ...] = STRATEGIES

    def __post_init__(self):
        if self.tau0 > self.frames or (self.frames - self.tau0) % self.tau:
            raise UsageError(f"tau={self.tau} must divide T - tau0 = {self.frames - self.tau0}")
        unknown = set(self.strategies) - set(STRATEGIES)
        if unknown:
            raise UsageError(f"unknown strategies {sorted(unknown)}")

    @property
    def spec(self) -> MaskSpec:
        return MaskSpec(self.tau, self.tau0)


def _run(strategy: str, weights: ModelWeights, x: np.ndarray, spec: MaskSpec, counter: OpCounter | None) -> np.ndarray:
    t = x.shape[0]
    bounds = list(range(spec.tau0, t + 1, spec.tau))
    if strategy == "cached":
        cache = EncoderCache.empty(weights.config, spec)
        rows = [encode_stream(cache, weights, x[: spec.tau0], counter=counter)]
        for a in bounds[:-1]:
            rows.append(encode_stream(cache, weights, x[a : a + spec.tau], counter=counter))
        return np.concatenate(rows)
    if strategy == "recompute":
        out = None
        for b in bounds:
            out = encode_full_masked(weights, x[:b], spec, counter=counter)
        return out
    padded = np.zeros_like(x)
    out = None
    for b in bounds:
        padded[:b] = x[:b]
        out = encode_noncausal(weights, padded, counter=counter)[:b]
    return out


def run_bench(cfg: BenchConfig) -> dict:
    config = ModelConfig(d=cfg.d, layers_enc=cfg.layers, layers_dec=1, vocab=3, t_max=cfg.frames, seed=cfg.seed)
    weights = init_weights(config)
    x = np.random.default_rng([cfg.seed, 0xBE]).standard_normal((cfg.frames, cfg.d)).astype(DTYPE)
    spec = cfg.spec
    report: dict = {
        "T": cfg.frames,
        "d": cfg.d,
        "tau": cfg.tau,
        "tau0": cfg.tau0,
        "layers": cfg.layers,
        "trials": cfg.trials,
        "closed_form_dot_macs_per_layer": closed_form_dot_macs(cfg.frames, spec, cfg.d),
        "strategies": {},
    }
    outputs = {}
    for name in cfg.strategies:
        counter = OpCounter()
        outputs[name] = _run(name, weights, x, spec, counter)
        entry = {"macs": counter.as_dict(), "dot_macs_per_layer": counter.macs["dot_product"] // cfg.layers}
        if name == "cached":
            entry["cache_bytes"] = counter.cache_bytes
        if cfg.timing:
            times = []
            for _ in range(cfg.trials):
                t0 = time.perf_counter()
                _run(name, weights, x, spec, None)
                times.append(time.perf_counter() - t0)
            entry["median_s"] = statistics.median(times)
        report["strategies"][name] = entry
    if "cached" in outputs and "recompute" in outputs:
        report["cached_vs_recompute_max_abs"] = float(np.abs(outputs["cached"] - outputs["recompute"]).max())
    if "cached" in report["strategies"]:
        report["closed_form_match"] = report["strategies"]["cached"]["dot_macs_per_layer"] == report["closed_form_dot_macs_per_layer"]
    return report
