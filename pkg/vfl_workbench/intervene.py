"""Layer-wise vision-token interventions on the KV cache.

Swapping: after both images are prefilled, the target cache's vision K/V rows
at one layer k are replaced by the source cache's rows at that layer (or by
zeros for a NULL source). Prompt-text K/V are not recomputed; only tokens fed
afterwards (the held-back query token and generated tokens) read the mix.

Dropping: vision positions leave the residual stream at the input of layer
k, so layers >= k (prompt text and decoding alike) never see them. Text rows
keep their original position ids.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, LayerRangeError
from .model import (
    KvCache,
    ModelLike,
    MultimodalSequence,
    generate_from_cache,
    prefill_context,
    resume_prefill,
    run_prefill,
    sum_logprobs,
    teacher_forced_logprobs,
)
from .tokenizer import EOS_ID

logger = logging.getLogger(__name__)


def _check_swap_layer(layer: int, n_layers: int) -> None:
    if not 0 <= layer < n_layers:
        raise LayerRangeError(f"swap layer {layer} outside [0, {n_layers})")


def _check_drop_layer(layer: int, n_layers: int) -> None:
    if not 0 <= layer <= n_layers:
        raise LayerRangeError(f"drop layer {layer} outside [0, {n_layers}]")


# ---------------------------------------------------------------------------
# Swapping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SwapSpec:
    """Replace layer ``layer`` vision rows with ``source``'s; ``source=None`` means NULL rows."""

    layer: int
    source: KvCache | None = None

    @classmethod
    def null(cls, layer: int) -> SwapSpec:
        return cls(layer, None)

    @property
    def is_null(self) -> bool:
        return self.source is None


def source_cache(model: ModelLike, seq: MultimodalSequence) -> KvCache:
    """Fully prefilled cache of a source sequence, ready to serve as ``SwapSpec.source``."""
    cache, _ = run_prefill(model, seq)
    return cache


def splice_swap(target_cache: KvCache, spec: SwapSpec) -> KvCache:
    """Copy of ``target_cache`` whose layer-k vision K/V rows come from ``spec.source``."""
    k = spec.layer
    _check_swap_layer(k, target_cache.n_layers)
    rows = target_cache.vision_rows(k)
    if len(rows) == 0:
        raise ContractError(f"target cache holds no vision rows at layer {k}")

    if spec.source is None:
        new_keys = np.zeros_like(target_cache.keys[k][rows])
        new_values = np.zeros_like(target_cache.values[k][rows])
    else:
        source = spec.source
        if source.config != target_cache.config:
            raise ContractError("source and target caches come from different model configs")
        if source.vision_span != target_cache.vision_span:
            raise ContractError(
                f"vision spans differ: target {target_cache.vision_span}, source {source.vision_span}"
            )
        source_rows = source.vision_rows(k)
        if not np.array_equal(source.positions[k][source_rows], target_cache.positions[k][rows]):
            raise ContractError(f"source and target vision rows at layer {k} sit at different positions")
        new_keys = source.keys[k][source_rows]
        new_values = source.values[k][source_rows]

    spliced = target_cache.copy()
    spliced.keys[k][rows] = new_keys
    spliced.values[k][rows] = new_values
    return spliced


def generate_swapped(
    model: ModelLike,
    target_seq: MultimodalSequence,
    spec: SwapSpec,
    max_new: int,
    eos_id: int = EOS_ID,
) -> list[int]:
    """Greedy generation from the target prompt with layer-k vision rows spliced in."""
    cache, query = prefill_context(model, target_seq)
    return generate_from_cache(model, splice_swap(cache, spec), query, max_new, eos_id)


# ---------------------------------------------------------------------------
# Dropping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DropSpec:
    """Vision tokens are visible to layers ``0..from_layer-1`` only."""

    from_layer: int


def prefill_with_drop(model: ModelLike, seq: MultimodalSequence, spec: DropSpec) -> tuple[KvCache, np.ndarray]:
    _check_drop_layer(spec.from_layer, model.config.n_layers)
    return run_prefill(model, seq, drop_from=spec.from_layer)


def logprob_dropped(model: ModelLike, seq: MultimodalSequence, spec: DropSpec) -> float:
    """Teacher-forced log P(answer | vision up to layer k, prompt)."""
    if not seq.answer:
        raise ContractError("teacher forcing needs a non-empty answer")
    cache, logits = prefill_with_drop(model, seq, spec)
    return sum_logprobs(teacher_forced_logprobs(model, cache, logits, seq.answer))


def generate_dropped(
    model: ModelLike,
    seq: MultimodalSequence,
    spec: DropSpec,
    max_new: int,
    eos_id: int = EOS_ID,
) -> list[int]:
    _check_drop_layer(spec.from_layer, model.config.n_layers)
    cache, query = prefill_context(model, seq, drop_from=spec.from_layer)
    return generate_from_cache(model, cache, query, max_new, eos_id)


class VisionTrunk:
    """One recorded full prefill; drops at any k rerun only layers >= k.

    The residual stream entering every layer is kept, so the text and vision
    rows below the drop point are computed once per sample.
    """

    def __init__(self, model: ModelLike, seq: MultimodalSequence):
        self.model = model
        self.seq = seq
        self.layer_inputs: list[np.ndarray] = []
        self.cache, self.logits = run_prefill(model, seq, record=self.layer_inputs)

    def prefill_with_drop(self, spec: DropSpec) -> tuple[KvCache, np.ndarray]:
        n_layers = self.model.config.n_layers
        _check_drop_layer(spec.from_layer, n_layers)
        if spec.from_layer == n_layers:
            return self.cache.copy(), self.logits.copy()
        return resume_prefill(self.model, self.seq, self.layer_inputs, self.cache, spec.from_layer)

    def logprob_dropped(self, spec: DropSpec) -> float:
        if not self.seq.answer:
            raise ContractError("teacher forcing needs a non-empty answer")
        cache, logits = self.prefill_with_drop(spec)
        return sum_logprobs(teacher_forced_logprobs(self.model, cache, logits, self.seq.answer))


__all__ = [
    "DropSpec",
    "SwapSpec",
    "VisionTrunk",
    "generate_dropped",
    "generate_swapped",
    "logprob_dropped",
    "prefill_with_drop",
    "source_cache",
    "splice_swap",
]
