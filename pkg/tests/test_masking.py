from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chunkstream.errors import DomainError, InsufficientInputError, UsageError
from chunkstream.masking import MaskSpec, block_index, build_mask, is_attendable, mask_for_frames, sample_grid, sample_points

specs = st.integers(1, 6).flatmap(lambda t: st.integers(1, 4).map(lambda m: MaskSpec(t, t * m)))


def test_block_index_worked_example():
    s = MaskSpec(15, 30)
    assert [block_index(t, s) for t in (35, 23, 50)] == [3, 2, 4]
    with pytest.raises(DomainError):
        block_index(0, s)


def test_is_attendable_worked_example():
    s = MaskSpec(15, 30)
    assert is_attendable(35, 23, s)
    assert not is_attendable(35, 50, s)
    # the initial block overrides the chunk staircase
    assert is_attendable(5, 29, s)
    assert not is_attendable(5, 31, s)


def test_spec_validation():
    with pytest.raises(UsageError):
        MaskSpec(4, 2)
    with pytest.raises(UsageError):
        MaskSpec(4, 6)
    with pytest.raises(UsageError):
        MaskSpec(0, 0)
    assert MaskSpec.from_ms(100, 600) == MaskSpec(5, 30)
    with pytest.raises(UsageError):
        MaskSpec.from_ms(90, 600)


def test_single_chunk_is_dense():
    assert build_mask(1, MaskSpec(4, 4)).allowed.all()


def test_staircase_shape():
    s = MaskSpec(15, 30)
    a = build_mask(10, s).allowed
    assert a.shape == (150, 150)
    assert a[:30, :30].all()
    for b in range(2, 10):
        rows = slice(b * 15, (b + 1) * 15)
        assert a[rows, : (b + 1) * 15].all()
        assert not a[rows, (b + 1) * 15 :].any()


@given(specs, st.integers(1, 8))
def test_mask_matches_predicate(spec, k):
    a = build_mask(k, spec).allowed
    n = k * spec.tau
    want = np.array([[is_attendable(i, j, spec) for j in range(1, n + 1)] for i in range(1, n + 1)])
    assert np.array_equal(a, want)


@given(specs, st.integers(2, 8))
def test_mask_properties(spec, k):
    a = build_mask(k, spec).allowed
    n = a.shape[0]
    assert a[np.tril_indices(n)].all()
    for i in range(n):
        first = (i // spec.tau) * spec.tau
        assert np.array_equal(a[i], a[first])
    prev = build_mask(k - 1, spec).allowed
    m = prev.shape[0]
    assert np.array_equal(a[:m, :m], prev)


def test_mask_for_frames_is_cached():
    s = MaskSpec(3, 6)
    assert mask_for_frames(12, s) is mask_for_frames(12, s)


def test_sample_grid_and_points():
    s = MaskSpec(5, 5)
    assert sample_grid(s, 20) == [5, 10, 15, 20]
    assert sample_points(s, 20, 1.0, 0).points == (5, 10, 15, 20)
    with pytest.raises(InsufficientInputError):
        sample_grid(MaskSpec(5, 10), 9)
    with pytest.raises(DomainError):
        sample_points(s, 20, 0.0, 0)


def test_half_fraction_subset():
    s = MaskSpec(2, 2)
    grid = sample_grid(s, 20)
    assert len(grid) == 10
    a = sample_points(s, 20, 0.5, 42)
    assert len(a.points) == 5 and set(a.points) <= set(grid)
    assert a == sample_points(s, 20, 0.5, 42)


@given(specs, st.integers(0, 60), st.floats(0.01, 1.0), st.integers(0, 1000))
def test_sample_points_properties(spec, extra, f, seed):
    total = spec.tau0 + extra
    grid = sample_grid(spec, total)
    pts = sample_points(spec, total, f, seed).points
    assert len(pts) == max(1, math.floor(f * len(grid) + 0.5))
    assert list(pts) == sorted(set(pts))
    assert all(spec.is_boundary(p) for p in pts)
