"""Low-rank adapters restricted to a layer mask.

For every masked layer and adapted projection ``W`` the forward pass uses
``x @ W + (alpha / r) * (x @ A) @ B`` with ``A`` (d x r) small random and
``B`` (r x d) zero, so an adapter fresh from ``LoraAdapter.create`` leaves
the model's outputs exactly unchanged. The base ``Params`` are never
modified; ``AdaptedModel`` only overlays the adapter tensors.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Iterable, Mapping

import numpy as np

from .errors import ContractError, LayerRangeError, ShapeError
from .model import ModelConfig, Params

if TYPE_CHECKING:
    from .reports import ChangeRateReport

logger = logging.getLogger(__name__)

ADAPTABLE = ("wq", "wk", "wv", "wo")
DEFAULT_TARGETS = ("wq", "wv")
MASK_MODES = ("vfl", "full", "reversed")


def lora_names(layer: int, target: str) -> tuple[str, str]:
    return f"lora.{layer}.{target}.a", f"lora.{layer}.{target}.b"


@dataclass
class LoraAdapter:
    config: ModelConfig
    layer_mask: tuple[int, ...]
    rank: int = 8
    alpha: float = 16.0
    targets: tuple[str, ...] = DEFAULT_TARGETS
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        mask = tuple(sorted({int(layer) for layer in self.layer_mask}))
        bad = [layer for layer in mask if not 0 <= layer < self.config.n_layers]
        if bad:
            raise LayerRangeError(f"layer mask {bad} outside [0, {self.config.n_layers})")
        if self.rank < 1:
            raise ContractError(f"LoRA rank must be >= 1, got {self.rank}")
        unknown = [t for t in self.targets if t not in ADAPTABLE]
        if unknown or not self.targets:
            raise ContractError(f"cannot adapt {unknown or 'nothing'}; choose from {list(ADAPTABLE)}")
        self.layer_mask = mask
        self.targets = tuple(sorted(set(self.targets)))
        self.alpha = float(self.alpha)

        expected = self.tensor_shapes()
        if set(self.tensors) != set(expected):
            raise ContractError(
                f"adapter tensors do not match mask (expected {sorted(expected)}, got {sorted(self.tensors)})"
            )
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ShapeError(f"{name}: expected {list(shape)}, got {list(self.tensors[name].shape)}")

    @classmethod
    def create(
        cls,
        config: ModelConfig,
        layer_mask: Iterable[int],
        rank: int = 8,
        alpha: float = 16.0,
        targets: Iterable[str] = DEFAULT_TARGETS,
        seed: int = 0,
    ) -> LoraAdapter:
        """Fresh adapter: A uniform in +-1/sqrt(d_model), B zero."""
        d = config.d_model
        mask = sorted({int(layer) for layer in layer_mask})
        targets = tuple(sorted(set(targets)))
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(d)
        tensors = {}
        for layer in mask:
            for target in targets:
                a_name, b_name = lora_names(layer, target)
                tensors[a_name] = rng.uniform(-bound, bound, size=(d, rank)).astype(np.float32)
                tensors[b_name] = np.zeros((rank, d), dtype=np.float32)
        return cls(config, tuple(mask), rank, alpha, targets, tensors)

    @classmethod
    def from_header(cls, config: ModelConfig, header: Mapping[str, Any], tensors: Mapping[str, np.ndarray]) -> LoraAdapter:
        try:
            return cls(
                config=config,
                layer_mask=tuple(header["layer_mask"]),
                rank=int(header["rank"]),
                alpha=float(header["alpha"]),
                targets=tuple(header["targets"]),
                tensors=dict(tensors),
            )
        except KeyError as exc:
            raise ContractError(f"adapter header lacks {exc}") from exc

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def tensor_shapes(self) -> dict[str, tuple[int, int]]:
        d, r = self.config.d_model, self.rank
        shapes = {}
        for layer in self.layer_mask:
            for target in self.targets:
                a_name, b_name = lora_names(layer, target)
                shapes[a_name] = (d, r)
                shapes[b_name] = (r, d)
        return shapes

    def adapter_header(self) -> dict[str, Any]:
        return {
            "alpha": self.alpha,
            "layer_mask": list(self.layer_mask),
            "rank": self.rank,
            "targets": list(self.targets),
        }

    def named_arrays(self) -> dict[str, np.ndarray]:
        return dict(self.tensors)

    def replace(self, updates: Mapping[str, np.ndarray]) -> LoraAdapter:
        merged = dict(self.tensors)
        merged.update(updates)
        return LoraAdapter(self.config, self.layer_mask, self.rank, self.alpha, self.targets, merged)

    def parameter_count(self) -> int:
        return int(sum(a.size for a in self.tensors.values()))


class AdaptedModel:
    """Base params plus an adapter overlay; runs anywhere a ``Params`` does."""

    def __init__(self, base: Params, adapter: LoraAdapter):
        if base.config != adapter.config:
            raise ContractError("adapter was built for a different model config")
        self.base = base
        self.adapter = adapter
        self.config = base.config

    def named_arrays(self) -> dict[str, np.ndarray]:
        arrays = self.base.named_arrays()
        clash = set(self.adapter.tensors) & set(arrays)
        if clash:
            raise ContractError(f"adapter tensors shadow base parameters: {sorted(clash)}")
        arrays.update(self.adapter.tensors)
        return arrays

    def lora_pair(self, layer: int, target: str) -> tuple[str, str, float] | None:
        if layer in self.adapter.layer_mask and target in self.adapter.targets:
            a_name, b_name = lora_names(layer, target)
            return a_name, b_name, self.adapter.scaling
        return None

    def trainable_names(self) -> list[str]:
        return sorted(self.adapter.tensors)

    def with_adapter(self, adapter: LoraAdapter) -> AdaptedModel:
        return AdaptedModel(self.base, adapter)


def attach_lora(params: Params, adapter: LoraAdapter) -> AdaptedModel:
    """Overlay ``adapter`` on ``params`` without touching the base tensors."""
    return AdaptedModel(params, adapter)


def layer_mask_from_rates(
    rates: Mapping[int, float],
    n_layers: int,
    threshold: float,
    mode: str = "vfl",
) -> tuple[int, ...]:
    """Layers whose change rate exceeds ``threshold`` percent, or the full / complementary set."""
    if mode not in MASK_MODES:
        raise ContractError(f"unknown mask mode {mode!r}; expected one of {list(MASK_MODES)}")
    if mode == "full":
        return tuple(range(n_layers))
    vfl = {layer for layer, rate in rates.items() if rate > threshold}
    if mode == "reversed":
        return tuple(layer for layer in range(n_layers) if layer not in vfl)
    if not vfl:
        logger.warning("No layer exceeds the %.1f%% change-rate threshold; the adapter mask is empty", threshold)
    return tuple(sorted(vfl))


def layer_mask_from_report(report: ChangeRateReport, threshold: float, mode: str = "vfl") -> tuple[int, ...]:
    rates = {row.layer: row.rate for row in report.rows}
    return layer_mask_from_rates(rates, report.n_layers, threshold, mode)


__all__ = [
    "ADAPTABLE",
    "AdaptedModel",
    "DEFAULT_TARGETS",
    "LoraAdapter",
    "MASK_MODES",
    "attach_lora",
    "layer_mask_from_rates",
    "layer_mask_from_report",
    "lora_names",
]
