"""Multiply-accumulate bookkeeping for the attention stages."""

from __future__ import annotations

from dataclasses import dataclass, field

STAGES = ("projection", "dot_product", "value_weighting")


@dataclass
class OpCounter:
    """Counts MACs per stage plus bytes held by key/value caches.

    Counts follow the term-exclusion semantics of masked attention: a masked
    (query, key) pair costs nothing, so the totals are exact functions of the
    mask geometry and never depend on how the arrays were tiled.
    """

    macs: dict[str, int] = field(default_factory=lambda: {s: 0 for s in STAGES})
    cache_bytes: int = 0

    def add(self, stage: str, count: int) -> None:
        if stage not in self.macs:
            raise KeyError(f"unknown stage {stage!r}")
        if count < 0:
            raise ValueError("MAC counts only grow")
        self.macs[stage] += int(count)

    def add_cache(self, nbytes: int) -> None:
        self.cache_bytes += int(nbytes)

    @property
    def total(self) -> int:
        return sum(self.macs.values())

    def as_dict(self) -> dict[str, int]:
        return {**self.macs, "total": self.total, "cache_bytes": self.cache_bytes}
