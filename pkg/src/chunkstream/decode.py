"""Streaming greedy and beam decoding with token regression.

A decoder consumes one chunk of encoder rows at a time. On each chunk it
re-checks the newest ``n`` tokens of its hypothesis, truncates at the first
unstable one, then keeps decoding until EOT. EOT only pauses decoding: it
stays in the hypothesis (and in the check window) and is re-evaluated when
the next chunk arrives. Stream end strips it.

Tokens that leave the check window are committed. The committed length is a
high-water mark, so later regressions can never reach below it.

Decoders talk to a :class:`Scorer`, which is either the real model
(:class:`ModelScorer`) or a scripted table of distributions
(:class:`ScriptedOracle`) used to exercise the control flow exhaustively.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .errors import DomainError, StateError
from .masking import FRAME_MS
from .model import EOT, SOT, DecoderSession, ModelWeights, decoder_step, extend_cross_cache
from .opcount import OpCounter


def topk(p: Sequence[float] | np.ndarray, k: int) -> list[int]:
    """Indices of the ``k`` largest scores, ties toward the lower index."""
    p = np.asarray(p)
    if not 1 <= k <= p.size:
        raise DomainError(f"k={k} outside [1, {p.size}]")
    return sorted(np.argsort(-p, kind="stable")[:k].tolist())


def argmax(p: Sequence[float] | np.ndarray) -> int:
    return int(np.argmax(np.asarray(p)))  # numpy returns the first maximum


def is_stable_greedy(prev_prob: float, cur_dist: np.ndarray, token: int) -> bool:
    """Probability did not drop since the last check, or the token is the argmax."""
    return bool(cur_dist[token] >= prev_prob) or token == argmax(cur_dist)


def is_stable_beam(cur_dist: np.ndarray, token: int, b: int) -> bool:
    """Token is still among the top ``b`` candidates."""
    return token in topk(cur_dist, min(b, len(cur_dist)))


# ---------------------------------------------------------------------------
# scorers


class Scorer(Protocol):
    frames_seen: int
    vocab: int

    def advance(self, new_rows) -> None: ...

    def logprobs(self, prefix: tuple[int, ...]) -> np.ndarray: ...


class ModelScorer:
    """Next-token log-probabilities from the model, memoised within a chunk."""

    def __init__(self, weights: ModelWeights, *, self_cache: bool = False, counter: OpCounter | None = None):
        self.weights = weights
        self.session = DecoderSession.empty(weights.config, self_cache)
        self.counter = counter
        self.vocab = weights.config.vocab
        self.max_len = weights.config.max_tokens - 1
        self._memo: dict[tuple[int, ...], np.ndarray] = {}

    @property
    def frames_seen(self) -> int:
        return self.session.encoder_frames_seen

    def advance(self, new_rows: np.ndarray) -> None:
        extend_cross_cache(self.session, self.weights, new_rows, counter=self.counter)
        self._memo.clear()

    def logprobs(self, prefix: tuple[int, ...]) -> np.ndarray:
        if prefix not in self._memo:
            self._memo[prefix] = decoder_step(self.session, self.weights, (SOT,) + prefix)
        return self._memo[prefix]


class ScriptedOracle:
    """Distributions given by a function of (chunk index, prefix).

    ``table(k, prefix)`` returns a probability vector for the chunk ``k``
    (1-based) and the token prefix (without SOT). ``advance`` accepts either
    an array of rows or an integer frame count.
    """

    def __init__(self, table: Callable[[int, tuple[int, ...]], np.ndarray], vocab: int, chunk_frames: int = 1):
        self.table = table
        self.vocab = vocab
        self.chunk_frames = chunk_frames
        self.chunk = 0
        self.frames_seen = 0
        self.max_len = 32

    def advance(self, new_rows=None) -> None:
        if new_rows is None:
            n = self.chunk_frames
        elif isinstance(new_rows, (int, np.integer)):
            n = int(new_rows)
        else:
            n = len(new_rows)
        self.chunk += 1
        self.frames_seen += n

    def logprobs(self, prefix: tuple[int, ...]) -> np.ndarray:
        if self.chunk == 0:
            raise StateError("oracle has not seen a chunk")
        p = np.asarray(self.table(self.chunk, prefix), dtype=np.float64)
        with np.errstate(divide="ignore"):
            return np.log(p / p.sum())


def random_oracle(seed: int, vocab: int = 4, concentration: float = 0.7) -> ScriptedOracle:
    """Incoherent oracle: an independent Dirichlet draw per (chunk, prefix).

    Successive chunks share nothing, so this family stresses the control
    flow rather than modelling accumulating evidence.
    """
    if vocab < 3:
        raise DomainError("oracle needs EOT, SOT and at least one word")

    def table(k: int, prefix: tuple[int, ...]) -> np.ndarray:
        rng = np.random.default_rng([seed, k, len(prefix), *prefix])
        p = rng.dirichlet(np.full(vocab, concentration))
        p[SOT] = 0.0
        # make EOT likelier on long prefixes so decoding pauses
        p[EOT] += 0.25 * len(prefix)
        return p / p.sum()

    return ScriptedOracle(table, vocab)


def posterior_oracle(
    seed: int,
    vocab: int = 5,
    chunks: int = 4,
    max_words: int = 3,
    beta: float = 1.0,
    sigma: float = 1.0,
) -> ScriptedOracle:
    """Exact Bayesian posteriors over a hidden transcript that becomes audible over time.

    A hidden word sequence S and a nondecreasing audibility schedule a_k are
    drawn from ``seed``. Each chunk adds one Gaussian observation
    ``beta * onehot(S_i) + sigma * noise`` for every audible position i; the
    decoder sees the posterior marginal of S_i (uniform prior) at position
    i < a_k and EOT with certainty at position a_k.
    """
    if vocab < 3:
        raise DomainError("oracle needs EOT, SOT and at least one word")
    rng = np.random.default_rng(seed)
    n_words = vocab - 2
    hidden = rng.integers(0, n_words, size=max_words)
    schedule = np.sort(rng.integers(0, max_words + 1, size=chunks))
    eye = np.eye(n_words)
    loglik = np.zeros((chunks, max_words, n_words))
    acc = np.zeros((max_words, n_words))
    for k in range(chunks):
        for i in range(schedule[k]):
            obs = beta * eye[hidden[i]] + sigma * rng.standard_normal(n_words)
            acc[i] -= ((obs[None, :] - beta * eye) ** 2).sum(axis=1) / (2 * sigma**2)
        loglik[k] = acc

    def table(k: int, prefix: tuple[int, ...]) -> np.ndarray:
        p = np.zeros(vocab)
        pos = len(prefix)
        if k > chunks:
            raise StateError(f"oracle scripted for {chunks} chunks")
        if pos >= schedule[k - 1]:
            p[EOT] = 1.0
            return p
        w = np.exp(loglik[k - 1, pos] - loglik[k - 1, pos].max())
        p[2:] = w / w.sum()
        return p

    oracle = ScriptedOracle(table, vocab)
    oracle.hidden = tuple(int(h) + 2 for h in hidden)
    oracle.schedule = tuple(int(a) for a in schedule)
    return oracle


# ---------------------------------------------------------------------------
# hypotheses and events


@dataclass
class TokenRecord:
    token: int
    logprob: float  # under the chunk of the last acceptance or check
    emit_chunk: int
    stamp_ms: int | None = None

    @property
    def prob(self) -> float:
        return math.exp(self.logprob)


@dataclass
class Hypothesis:
    records: list[TokenRecord] = field(default_factory=list)
    committed: int = 0

    @property
    def tokens(self) -> tuple[int, ...]:
        return tuple(r.token for r in self.records)

    @property
    def logprob_path(self) -> float:
        return float(sum(r.logprob for r in self.records))

    @property
    def finished(self) -> bool:
        return bool(self.records) and self.records[-1].token == EOT

    def words(self) -> tuple[int, ...]:
        """Tokens with the pausing EOT removed."""
        return self.tokens[:-1] if self.finished else self.tokens

    def committed_tokens(self) -> tuple[int, ...]:
        return self.tokens[: self.committed]

    def window_start(self, n: int) -> int:
        return max(self.committed, len(self.records) - n)

    def seal(self, n: int) -> None:
        """Advance the high-water mark past everything outside the next window."""
        self.committed = min(max(self.committed, len(self.records) - n), len(self.words()))

    def copy(self) -> Hypothesis:
        return Hypothesis([TokenRecord(r.token, r.logprob, r.emit_chunk, r.stamp_ms) for r in self.records], self.committed)


@dataclass
class ChunkEvent:
    """One processed chunk: stream position, current and committed tokens."""

    k: int
    time_ms: int
    tokens: tuple[int, ...]
    committed: tuple[int, ...]
    regressed_at: int | None = None
    latency_ms: float = 0.0


@dataclass(frozen=True)
class WordTimestamp:
    index: int
    token: int
    start_ms: int
    end_ms: int


def word_timestamps(hyp: Hypothesis, stream_end_ms: int) -> list[WordTimestamp]:
    """Chain stamped tokens: each word ends where the next stamped word starts.

    Tokens accepted during a regressed chunk carry no stamp and are skipped.
    """
    stamped = [(i, r) for i, r in enumerate(hyp.records) if r.token != EOT and r.stamp_ms is not None]
    out = []
    for j, (i, r) in enumerate(stamped):
        end = stamped[j + 1][1].stamp_ms if j + 1 < len(stamped) else stream_end_ms
        out.append(WordTimestamp(i, r.token, r.stamp_ms, max(end, r.stamp_ms)))
    return out


# ---------------------------------------------------------------------------
# decoders


class _StreamDecoder:
    def __init__(self, scorer: Scorer, n: int, max_len: int | None):
        if n < 0:
            raise DomainError("stability window n must be >= 0")
        self.scorer = scorer
        self.n = n
        self.max_len = max_len if max_len is not None else getattr(scorer, "max_len", 32)
        self.k = 0
        self.ended = False
        self.events: list[ChunkEvent] = []

    def _begin_chunk(self, new_rows) -> int:
        if self.ended:
            raise StateError("stream already ended")
        self.scorer.advance(new_rows)
        self.k += 1
        return self.scorer.frames_seen * FRAME_MS

    def _dist(self, prefix: tuple[int, ...]) -> np.ndarray:
        return self.scorer.logprobs(prefix)


class GreedyStreamDecoder(_StreamDecoder):
    """Greedy decoding with per-chunk stability checks over the last ``n`` tokens.

    ``n = 0`` disables the checks: the paused EOT is dropped on each new chunk
    and decoding simply continues, i.e. plain greedy without regression.
    Non-EOT tokens accepted in a chunk without regression (or whose
    regression hit only the newest token) are stamped with the stream time.
    """

    def __init__(self, scorer: Scorer, n: int = 2, *, max_len: int | None = None):
        super().__init__(scorer, n, max_len)
        self.hyp = Hypothesis()

    def step(self, new_rows) -> ChunkEvent:
        time_ms = self._begin_chunk(new_rows)
        hyp = self.hyp
        recs = hyp.records
        m = 0
        regressed_at = None
        if self.n == 0:
            if hyp.finished:
                recs.pop()
        else:
            for i in range(hyp.window_start(self.n), len(recs)):
                lp = self._dist(hyp.tokens[:i])
                rec = recs[i]
                if is_stable_greedy(rec.prob, np.exp(lp), rec.token):
                    rec.logprob = float(lp[rec.token])
                else:
                    m = len(recs) - 1 - i
                    regressed_at = i
                    del recs[i:]
                    break
        while not hyp.finished and len(recs) < self.max_len:
            lp = self._dist(hyp.tokens)
            tok = argmax(lp)
            stamp = time_ms if tok != EOT and m == 0 else None
            recs.append(TokenRecord(tok, float(lp[tok]), self.k, stamp))
        hyp.seal(self.n)
        ev = ChunkEvent(self.k, time_ms, hyp.words(), hyp.committed_tokens(), regressed_at)
        self.events.append(ev)
        return ev

    def finish(self) -> tuple[int, ...]:
        self.ended = True
        return self.hyp.words()

    def timestamps(self) -> list[WordTimestamp]:
        return word_timestamps(self.hyp, self.scorer.frames_seen * FRAME_MS)


class BeamStreamDecoder(_StreamDecoder):
    """Beam search with per-hypothesis stability checks and EOT pausing.

    A windowed token survives the check when it is still in the top ``b`` of
    its position's distribution, or (with ``keep_rising``) when its
    probability did not drop; the second clause makes ``b = 1`` coincide
    with the greedy decoder. After the checks, duplicate hypotheses are
    merged and expansion rounds run until some kept hypothesis ends in EOT.
    Ranking is by unnormalised cumulative log-probability.
    """

    def __init__(self, scorer: Scorer, b: int = 5, n: int = 2, *, keep_rising: bool = True, max_len: int | None = None):
        super().__init__(scorer, n, max_len)
        if b < 1:
            raise DomainError("beam size must be >= 1")
        self.b = min(b, scorer.vocab)
        self.keep_rising = keep_rising
        self.beam: list[Hypothesis] = [Hypothesis()]

    def _check(self, hyp: Hypothesis) -> int | None:
        recs = hyp.records
        if self.n == 0:
            if hyp.finished:
                recs.pop()
            return None
        for i in range(hyp.window_start(self.n), len(recs)):
            lp = self._dist(hyp.tokens[:i])
            rec = recs[i]
            dist = np.exp(lp)
            ok = is_stable_beam(dist, rec.token, self.b)
            if not ok and self.keep_rising:
                ok = bool(dist[rec.token] >= rec.prob)
            if ok:
                rec.logprob = float(lp[rec.token])
            else:
                del recs[i:]
                return i
        return None

    def _rank(self, hyps: list[Hypothesis]) -> list[Hypothesis]:
        best: dict[tuple[int, ...], Hypothesis] = {}
        for h in hyps:
            cur = best.get(h.tokens)
            if cur is None or h.logprob_path > cur.logprob_path:
                if cur is not None:
                    h.committed = max(h.committed, cur.committed)
                best[h.tokens] = h
            else:
                cur.committed = max(h.committed, cur.committed)
        # stable sort keeps insertion order among equal scores
        return sorted(best.values(), key=lambda h: -h.logprob_path)[: self.b]

    def _blocked(self, h: Hypothesis) -> bool:
        return h.finished or len(h.records) >= self.max_len

    def step(self, new_rows) -> ChunkEvent:
        self._begin_chunk(new_rows)
        time_ms = self.scorer.frames_seen * FRAME_MS
        cuts = [self._check(h) for h in self.beam]
        best_cut = cuts[0]
        self.beam = self._rank(self.beam)
        while any(not self._blocked(h) for h in self.beam):
            candidates: list[Hypothesis] = []
            for h in self.beam:
                if self._blocked(h):
                    candidates.append(h)
                    continue
                lp = self._dist(h.tokens)
                for t in topk(lp, self.b):
                    child = h.copy()
                    child.records.append(TokenRecord(t, float(lp[t]), self.k))
                    candidates.append(child)
            self.beam = self._rank(candidates)
            if any(h.finished for h in self.beam):
                break
        for h in self.beam:
            h.seal(self.n)
        best = self.beam[0]
        ev = ChunkEvent(self.k, time_ms, best.words(), self.committed_prefix(), best_cut)
        self.events.append(ev)
        return ev

    def committed_prefix(self) -> tuple[int, ...]:
        parts = [h.committed_tokens() for h in self.beam]
        out = []
        for column in zip(*parts):
            if len(set(column)) != 1:
                break
            out.append(column[0])
        return tuple(out)

    def finish(self) -> tuple[int, ...]:
        self.ended = True
        return max(self.beam, key=lambda h: h.logprob_path).words()


def run_stream(decoder: GreedyStreamDecoder | BeamStreamDecoder, chunks: Sequence) -> tuple[int, ...]:
    for c in chunks:
        decoder.step(c)
    return decoder.finish()


def rescored_path(scorer: Scorer, tokens: Sequence[int]) -> float:
    """Cumulative log-probability of ``tokens`` under the scorer's current chunk."""
    total = 0.0
    for i, t in enumerate(tokens):
        total += float(scorer.logprobs(tuple(tokens[:i]))[t])
    return total
