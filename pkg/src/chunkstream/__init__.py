"""Chunked streaming encoder-decoder toolkit: blocked causal masking, cached
streaming encoding, stability-checked greedy/beam decoding, streaming
metrics and adapter fine-tuning at toy scale."""

from __future__ import annotations

from .masking import FRAME_MS, MaskSpec
from .model import EOT, SOT, ModelConfig, ModelWeights, init_weights

__version__ = "0.1.0"
