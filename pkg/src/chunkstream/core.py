"""Dense float32 numerics: products, stable softmax, masked attention.

Matrices are plain ``numpy.ndarray`` objects with dtype float32. Functions
operate on the last two axes, so leading batch axes broadcast; the
fine-tuning code relies on this to evaluate many perturbed weight sets in
one pass.
"""

from __future__ import annotations

from collections.abc import Callable
from functools import cached_property

import numpy as np

from .errors import ContractError, ShapeError
from .opcount import OpCounter

DTYPE = np.float32


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce ``data`` to a 2-D float32 array, checking shape and finiteness."""
    m = np.asarray(data, dtype=DTYPE)
    if m.ndim == 1 and rows is None:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    if rows is not None and m.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ShapeError(f"expected {cols} cols, got {m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise ContractError("matrix contains non-finite entries")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return np.matmul(a, b, dtype=DTYPE)


def row_softmax(m: np.ndarray) -> np.ndarray:
    """Softmax along the last axis with per-row max subtraction.

    Exponentials stay in float32; the denominator is reduced in float64.
    """
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted, dtype=DTYPE)
    denom = e.sum(axis=-1, keepdims=True, dtype=np.float64)
    return (e / denom).astype(DTYPE)


def log_softmax(m: np.ndarray) -> np.ndarray:
    """Log-softmax along the last axis (float64 output for stable scoring)."""
    m = np.asarray(m, dtype=np.float64)
    shifted = m - m.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


class AttentionMask:
    """Boolean attendability matrix; ``allowed[i, j]`` is 0-based.

    Every row must admit at least one column, otherwise the softmax has no
    support.
    """

    def __init__(self, allowed: np.ndarray):
        allowed = np.asarray(allowed, dtype=bool)
        if allowed.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {allowed.shape}")
        empty = np.flatnonzero(~allowed.any(axis=1))
        if empty.size:
            raise ContractError(f"mask row {int(empty[0])} has no attendable column")
        self.allowed = allowed
        self.allowed.flags.writeable = False

    @classmethod
    def from_predicate(cls, rows: int, cols: int, pred: Callable[[int, int], bool]) -> AttentionMask:
        allowed = np.array([[bool(pred(i, j)) for j in range(cols)] for i in range(rows)], dtype=bool)
        return cls(allowed.reshape(rows, cols))

    @classmethod
    def full(cls, rows: int, cols: int) -> AttentionMask:
        return cls(np.ones((rows, cols), dtype=bool))

    @classmethod
    def causal(cls, n: int) -> AttentionMask:
        return cls(np.tri(n, dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.allowed.shape

    def attendable(self, i: int, j: int) -> bool:
        return bool(self.allowed[i, j])

    def __eq__(self, other) -> bool:
        return isinstance(other, AttentionMask) and np.array_equal(self.allowed, other.allowed)

    def __hash__(self):
        return hash(self.allowed.tobytes())

    @cached_property
    def groups(self) -> list[tuple[slice, slice | np.ndarray]]:
        """Runs of consecutive identical rows with their attendable columns.

        Columns come back as a slice when they form a prefix (the common case
        for causal masks) and as an index array otherwise.
        """
        out: list[tuple[slice, slice | np.ndarray]] = []
        n = self.allowed.shape[0]
        start = 0
        for i in range(1, n + 1):
            if i < n and np.array_equal(self.allowed[i], self.allowed[start]):
                continue
            row = self.allowed[start]
            cols = np.flatnonzero(row)
            if cols[-1] + 1 == cols.size:
                sel: slice | np.ndarray = slice(0, cols.size)
            else:
                sel = cols
            out.append((slice(start, i), sel))
            start = i
        return out


def _count_pairs(mask: AttentionMask | None, rows: int, cols: int) -> int:
    if mask is None:
        return rows * cols
    return int(mask.allowed.sum())


def masked_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    mask: AttentionMask | None = None,
    *,
    counter: OpCounter | None = None,
) -> np.ndarray:
    """Scaled dot-product attention with masking by term exclusion.

    Masked (query, key) pairs are never computed: each run of identical mask
    rows attends only to its own column set. This is exactly equivalent to
    adding -inf before the softmax, without the NaN hazard, and guarantees
    that masked keys/values cannot influence the output in any bit.
    ``mask=None`` means every pair is attendable.
    """
    d = q.shape[-1]
    if k.shape[-1] != d:
        raise ShapeError(f"query dim {d} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    n_q, n_k = q.shape[-2], k.shape[-2]
    if mask is not None and mask.shape != (n_q, n_k):
        raise ShapeError(f"mask shape {mask.shape} != ({n_q}, {n_k})")

    scale = DTYPE(1.0 / np.sqrt(d))
    batch = np.broadcast_shapes(q.shape[:-2], k.shape[:-2], v.shape[:-2])
    out = np.empty(batch + (n_q, v.shape[-1]), dtype=DTYPE)
    groups = [(slice(0, n_q), slice(0, n_k))] if mask is None else mask.groups
    for rows, cols in groups:
        qs = q[..., rows, :]
        ks = k[..., cols, :]
        vs = v[..., cols, :]
        scores = np.matmul(qs, np.swapaxes(ks, -1, -2), dtype=DTYPE) * scale
        out[..., rows, :] = np.matmul(row_softmax(scores), vs, dtype=DTYPE)

    if counter is not None:
        pairs = _count_pairs(mask, n_q, n_k) * int(np.prod(batch, dtype=np.int64))
        counter.add("dot_product", pairs * d)
        counter.add("value_weighting", pairs * v.shape[-1])
    return out


def attention_weights(q: np.ndarray, k: np.ndarray, mask: AttentionMask | None = None) -> np.ndarray:
    """Dense attention-weight matrix (zeros at masked pairs); for inspection and tests."""
    n_q, n_k = q.shape[-2], k.shape[-2]
    w = np.zeros(q.shape[:-2] + (n_q, n_k), dtype=DTYPE)
    groups = [(slice(0, n_q), slice(0, n_k))] if mask is None else mask.groups
    scale = DTYPE(1.0 / np.sqrt(q.shape[-1]))
    for rows, cols in groups:
        scores = np.matmul(q[..., rows, :], np.swapaxes(k[..., cols, :], -1, -2), dtype=DTYPE) * scale
        block = row_softmax(scores)
        if isinstance(cols, slice):
            w[..., rows, cols] = block
        else:
            sub = w[..., rows, :]
            sub[..., cols] = block
            w[..., rows, :] = sub
    return w


def layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Parameter-free layer normalisation over the last axis."""
    mu = x.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return ((x - mu) / np.sqrt(var + eps)).astype(DTYPE)


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh approximation of GELU, as used by the Whisper family."""
    x = np.asarray(x, dtype=DTYPE)
    t = x * x
    t *= DTYPE(0.044715)
    t += DTYPE(1.0)
    t *= x
    t *= DTYPE(np.sqrt(2.0 / np.pi))
    np.tanh(t, out=t)
    t += DTYPE(1.0)
    t *= x
    t *= DTYPE(0.5)
    return t
