"""Adapter-only fine-tuning on weakly aligned utterances.

Each utterance contributes a random subset of its chunk boundaries. At a
boundary the encoder sees only the frames so far (masked), and the decoder
is trained to emit exactly the tokens that have already ended, then EOT.
Gradients come from central finite differences over the adapter
parameters; the base weights are never written.
"""

from __future__ import annotations

from collections.abc import Callable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .core import log_softmax
from .errors import DomainError, NumericError, TrainingError
from .masking import FRAME_MS, MaskSpec, sample_grid, sample_points
from .model import (
    DTYPE,
    EOT,
    SOT,
    LoraAdapter,
    ModelWeights,
    apply_lora,
    cross_projections,
    decoder_logits,
    encode_full_masked,
    lora_from_vector,
    lora_to_vector,
)


@dataclass(frozen=True)
class TimedToken:
    id: int
    end_ms: int


@dataclass
class AlignedUtterance:
    uid: str
    features: np.ndarray
    tokens: tuple[TimedToken, ...]
    words: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        ends = [t.end_ms for t in self.tokens]
        if any(b < a for a, b in zip(ends, ends[1:])):
            raise DomainError(f"{self.uid}: token end times must be nondecreasing")
        if ends and ends[-1] > self.duration_ms:
            raise DomainError(f"{self.uid}: token ends after the audio ({ends[-1]} > {self.duration_ms} ms)")

    @property
    def frames(self) -> int:
        return self.features.shape[0]

    @property
    def duration_ms(self) -> int:
        return self.frames * FRAME_MS

    @property
    def token_ids(self) -> list[int]:
        return [t.id for t in self.tokens]


@dataclass
class TrainConfig:
    spec: MaskSpec
    f_hat: float = 1.0
    lr: float = 0.5
    clip_norm: float | None = 1.0  # rescale a larger gradient to this norm; None disables
    epochs: int = 1
    max_steps: int | None = None
    fd_epsilon: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.fd_epsilon <= 0:
            raise DomainError("fd_epsilon must be positive")
        if not 0 < self.f_hat <= 1:
            raise DomainError("f_hat must lie in (0, 1]")
        if self.epochs < 0 or (self.max_steps is not None and self.max_steps < 0):
            raise DomainError("epochs and max_steps are nonnegative")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise DomainError("clip_norm must be positive")


def prefix_targets(utt: AlignedUtterance, point_frame: int) -> list[int]:
    """Tokens that have ended by ``point_frame`` (in stream time), then EOT."""
    t = point_frame * FRAME_MS
    return [tok.id for tok in utt.tokens if tok.end_ms <= t] + [EOT]


def _check_point(utt: AlignedUtterance, point_frame: int) -> None:
    if not 1 <= point_frame <= utt.frames:
        raise DomainError(f"point {point_frame} outside 1..{utt.frames}")


def _nll(weights: ModelWeights, utt: AlignedUtterance, point_frame: int, spec: MaskSpec) -> np.ndarray:
    """Mean target NLL; batched over any leading axes of the weight tensors."""
    targets = prefix_targets(utt, point_frame)
    inputs = [SOT] + targets[:-1]
    z = encode_full_masked(weights, utt.features[:point_frame], spec)
    ks, vs = cross_projections(weights, z)
    lp = log_softmax(decoder_logits(weights, inputs, ks, vs))
    picked = lp[..., np.arange(len(targets)), targets]
    return -picked.mean(axis=-1)


def ce_loss(
    weights: ModelWeights,
    adapters: Mapping[str, LoraAdapter] | None,
    utt: AlignedUtterance,
    point_frame: int,
    spec: MaskSpec,
) -> float:
    _check_point(utt, point_frame)
    w = apply_lora(weights, adapters) if adapters else weights
    return float(_nll(w, utt, point_frame, spec))


def fd_gradient(loss_fn: Callable[[np.ndarray], float], params: np.ndarray, epsilon: float) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    if epsilon <= 0:
        raise DomainError("epsilon must be positive")
    params = np.asarray(params, dtype=np.float64)
    grad = np.zeros_like(params)
    for i in range(params.size):
        e = np.zeros_like(params)
        e[i] = epsilon
        hi, lo = loss_fn(params + e), loss_fn(params - e)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"non-finite loss while differentiating coordinate {i}")
        grad[i] = (hi - lo) / (2 * epsilon)
    return grad


def fd_gradient_lora(
    weights: ModelWeights,
    adapters: Mapping[str, LoraAdapter],
    utt: AlignedUtterance,
    point_frame: int,
    spec: MaskSpec,
    epsilon: float,
) -> np.ndarray:
    """Same central differences as :func:`fd_gradient`, evaluated in batches.

    Perturbations are grouped by adapted tensor; within a group only that
    tensor carries a batch axis, so everything upstream of it is computed
    once and shared.
    """
    _check_point(utt, point_frame)
    base = apply_lora(weights, adapters)
    params = lora_to_vector(adapters)
    grad = np.zeros_like(params)
    pos = 0
    for name in sorted(adapters):
        ad = adapters[name]
        a64 = ad.a.astype(np.float64)
        b64 = ad.b.astype(np.float64)
        size = a64.size + b64.size
        # every +/- perturbation of this adapter's A and B entries
        eye = np.eye(size) * epsilon
        flat = np.concatenate([a64.ravel(), b64.ravel()])
        batch = np.concatenate([flat + eye, flat - eye])
        a_b = batch[:, : a64.size].reshape(-1, *a64.shape).astype(DTYPE)
        b_b = batch[:, a64.size :].reshape(-1, *b64.shape).astype(DTYPE)
        w_b = (weights.tensors[name] + LoraAdapter(a_b, b_b, ad.scale).delta()).astype(DTYPE)
        losses = _nll(base.replace(**{name: w_b}), utt, point_frame, spec)
        if not np.all(np.isfinite(losses)):
            raise NumericError(f"non-finite loss while differentiating {name}")
        grad[pos : pos + size] = (losses[:size] - losses[size:]) / (2 * epsilon)
        pos += size
    return grad


def clip_gradient(grad: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return grad
    norm = float(np.linalg.norm(grad))
    return grad * (max_norm / norm) if norm > max_norm else grad


@dataclass
class StepRecord:
    step: int
    uid: str
    point_frame: int
    loss: float


@dataclass
class TrainResult:
    adapters: dict[str, LoraAdapter]
    trace: list[StepRecord] = field(default_factory=list)


def training_schedule(dataset: Sequence[AlignedUtterance], cfg: TrainConfig) -> Iterator[tuple[int, AlignedUtterance, int]]:
    """(epoch, utterance, point) in visiting order; points ascend within an utterance."""
    for epoch in range(cfg.epochs):
        for u_idx, utt in enumerate(dataset):
            pts = sample_points(cfg.spec, utt.frames, cfg.f_hat, cfg.seed * 1_000_003 + epoch * 7919 + u_idx)
            for p in pts.points:
                yield epoch, utt, p


def finetune_run(
    weights: ModelWeights,
    adapters: Mapping[str, LoraAdapter],
    dataset: Sequence[AlignedUtterance],
    cfg: TrainConfig,
    *,
    on_step: Callable[[StepRecord], None] | None = None,
) -> TrainResult:
    """One plain gradient step per sampled point; returns trained adapters and the loss trace.

    The loss recorded for a step is the loss before that step's update.
    """
    for utt in dataset:
        if utt.frames > weights.config.t_max:
            raise DomainError(f"{utt.uid} has {utt.frames} frames, t_max is {weights.config.t_max}")
        sample_grid(cfg.spec, utt.frames)
    current = {n: LoraAdapter(a.a.copy(), a.b.copy(), a.scale) for n, a in adapters.items()}
    result = TrainResult(current)
    step = 0
    # overflow is caught by the finiteness checks below, with the step index
    with np.errstate(over="ignore", invalid="ignore"):
        for _, utt, point in training_schedule(dataset, cfg):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            loss = ce_loss(weights, current, utt, point, cfg.spec)
            if not np.isfinite(loss):
                raise TrainingError("loss is not finite", step)
            if current and cfg.lr != 0:
                grad = clip_gradient(fd_gradient_lora(weights, current, utt, point, cfg.spec, cfg.fd_epsilon), cfg.clip_norm)
                params = lora_to_vector(current) - cfg.lr * grad
                if not np.all(np.isfinite(params)):
                    raise TrainingError("parameters diverged", step)
                current = lora_from_vector(current, params)
                result.adapters = current
            rec = StepRecord(step, utt.uid, point, loss)
            result.trace.append(rec)
            if on_step is not None:
                on_step(rec)
            step += 1
    return result
