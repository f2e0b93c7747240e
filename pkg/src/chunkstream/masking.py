"""Blocked causal mask geometry and the training sample-point grid.

Frame indices in this module are 1-based, matching the mask definition; the
0-based ``AttentionMask`` produced by :func:`build_mask` is the adapter used
by the storage layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import AttentionMask
from .errors import DomainError, InsufficientInputError, UsageError

FRAME_MS = 20


@dataclass(frozen=True)
class MaskSpec:
    """Chunking geometry: ``tau`` frames per chunk, ``tau0`` in the first chunk."""

    tau: int
    tau0: int

    def __post_init__(self):
        if self.tau < 1:
            raise UsageError(f"tau must be >= 1, got {self.tau}")
        if self.tau0 < self.tau:
            raise UsageError(f"tau0 ({self.tau0}) must be >= tau ({self.tau})")
        if self.tau0 % self.tau:
            raise UsageError(f"tau0 ({self.tau0}) must be a multiple of tau ({self.tau})")

    @classmethod
    def from_ms(cls, tau_ms: int, tau0_ms: int) -> MaskSpec:
        for name, ms in (("chunk", tau_ms), ("initial chunk", tau0_ms)):
            if ms <= 0 or ms % FRAME_MS:
                raise UsageError(f"{name} size {ms} ms is not a positive multiple of {FRAME_MS} ms")
        return cls(tau_ms // FRAME_MS, tau0_ms // FRAME_MS)

    @property
    def tau_ms(self) -> int:
        return self.tau * FRAME_MS

    def boundary(self, k: int) -> int:
        """Frames available after ``k`` streaming chunks (k >= 1)."""
        if k < 1:
            raise DomainError("chunk count starts at 1")
        return self.tau0 + (k - 1) * self.tau

    def is_boundary(self, frames: int) -> bool:
        return frames >= self.tau0 and (frames - self.tau0) % self.tau == 0

    def chunk_sizes(self, total_frames: int) -> list[int]:
        """Sizes of successive chunks covering ``total_frames`` (must be a boundary)."""
        if not self.is_boundary(total_frames):
            raise InsufficientInputError(
                f"{total_frames} frames is not tau0 + m*tau for tau0={self.tau0}, tau={self.tau}"
            )
        return [self.tau0] + [self.tau] * ((total_frames - self.tau0) // self.tau)


def block_index(t: int, spec: MaskSpec) -> int:
    """Ceiling of ``t / tau`` for a 1-based frame index."""
    if t < 1:
        raise DomainError(f"frame index is 1-based, got {t}")
    return -(-t // spec.tau)


def is_attendable(i: int, j: int, spec: MaskSpec) -> bool:
    """Whether query frame ``i`` may attend key frame ``j`` (both 1-based)."""
    if block_index(i, spec) >= block_index(j, spec):
        return True
    return i <= spec.tau0 and j <= spec.tau0


def build_mask(k: int, spec: MaskSpec) -> AttentionMask:
    """Mask over the first ``k * tau`` frames."""
    if k < 1:
        raise DomainError(f"chunk count must be >= 1, got {k}")
    return mask_for_frames(k * spec.tau, spec)


@lru_cache(maxsize=256)
def mask_for_frames(n: int, spec: MaskSpec) -> AttentionMask:
    """Vectorised mask over ``n`` frames; pointwise equal to :func:`is_attendable`."""
    if n < 1:
        raise DomainError("mask needs at least one frame")
    t = np.arange(1, n + 1)
    blk = -(-t // spec.tau)
    allowed = blk[:, None] >= blk[None, :]
    head = t <= spec.tau0
    allowed |= head[:, None] & head[None, :]
    return AttentionMask(allowed)


@dataclass(frozen=True)
class SamplePointSet:
    points: tuple[int, ...]
    fraction: float


def sample_grid(spec: MaskSpec, total_frames: int) -> list[int]:
    """Every chunk boundary ``tau0, tau0 + tau, ...`` not exceeding ``total_frames``."""
    if total_frames < spec.tau0:
        raise InsufficientInputError(f"{total_frames} frames cannot fill tau0={spec.tau0}")
    return list(range(spec.tau0, total_frames + 1, spec.tau))


def sample_points(spec: MaskSpec, total_frames: int, f_hat: float, rng_seed: int) -> SamplePointSet:
    """Uniform random subset of the boundary grid, sorted ascending.

    Size is ``max(1, round_half_up(f_hat * |grid|))``.
    """
    if not 0.0 < f_hat <= 1.0:
        raise DomainError(f"f_hat must lie in (0, 1], got {f_hat}")
    grid = sample_grid(spec, total_frames)
    size = max(1, min(len(grid), int(np.floor(f_hat * len(grid) + 0.5))))
    rng = np.random.default_rng(rng_seed)
    chosen = np.sort(rng.choice(len(grid), size=size, replace=False))
    return SamplePointSet(tuple(grid[i] for i in chosen), f_hat)
