from __future__ import annotations

import numpy as np
import pytest

from chunkstream.bench import BenchConfig, closed_form_dot_macs, run_bench
from chunkstream.errors import UsageError
from chunkstream.masking import MaskSpec


@pytest.mark.parametrize("t,tau,d", [(32, 4, 8), (64, 8, 16), (128, 16, 32)])
def test_closed_form_matches_half_square(t, tau, d):
    assert closed_form_dot_macs(t, MaskSpec(tau, tau), d) == t * t * d // 2 + t * tau * d // 2


def test_worked_count_and_cache_bytes():
    rep = run_bench(BenchConfig(frames=32, d=8, tau=4, tau0=4, timing=False))
    cached = rep["strategies"]["cached"]
    assert cached["dot_macs_per_layer"] == 4608 == rep["closed_form_dot_macs_per_layer"]
    # one K row and one V row of d float32 per frame
    assert cached["cache_bytes"] == 2 * 32 * 8 * 4
    assert rep["closed_form_match"]
    assert rep["cached_vs_recompute_max_abs"] <= 1e-5


def test_initial_chunk_correction():
    spec = MaskSpec(4, 8)
    rep = run_bench(BenchConfig(frames=32, d=8, tau=4, tau0=8, layers=2, timing=False))
    assert rep["strategies"]["cached"]["dot_macs_per_layer"] == closed_form_dot_macs(32, spec, 8)
    assert rep["closed_form_match"]


@pytest.mark.parametrize("tau", [2, 4, 8, 16])
def test_cached_beats_padded(tau):
    rep = run_bench(BenchConfig(frames=32, d=8, tau=tau, tau0=tau, timing=False))
    s = rep["strategies"]
    assert s["cached"]["macs"]["total"] < s["recompute"]["macs"]["total"] < s["padded"]["macs"]["total"]


def test_counts_are_deterministic_and_timing_optional():
    a = run_bench(BenchConfig(frames=16, d=4, tau=4, tau0=4, timing=False))
    b = run_bench(BenchConfig(frames=16, d=4, tau=4, tau0=4, timing=False))
    assert a == b
    t = run_bench(BenchConfig(frames=16, d=4, tau=4, tau0=4, trials=3))
    assert all(v["median_s"] >= 0 for v in t["strategies"].values())


def test_divisibility_is_a_usage_error():
    with pytest.raises(UsageError):
        BenchConfig(frames=30, d=4, tau=4, tau0=4)
    with pytest.raises(UsageError):
        BenchConfig(frames=32, d=4, tau=4, tau0=4, strategies=("fast",))
