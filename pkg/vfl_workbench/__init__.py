"""VFL workbench: layer-wise vision-token probing on a toy multimodal transformer."""

from __future__ import annotations

import logging

__version__ = "0.1.0"

from .config import LOG_LEVEL  # noqa: E402

# Configure basic logging so callers see sweep and training progress by default
logging.basicConfig(
    level=LOG_LEVEL,
    format="%(asctime)s [%(name)s] %(levelname)s: %(message)s",
)

from .harness import change_rate_sweep, drop_sweep, evaluate  # noqa: E402
from .intervene import DropSpec, SwapSpec, VisionTrunk, splice_swap  # noqa: E402
from .lora import LoraAdapter, attach_lora  # noqa: E402
from .model import ModelConfig, MultimodalSequence, Params  # noqa: E402
from .selection import partition_and_sample, profile_dataset  # noqa: E402
from .train import TrainConfig, finetune_lora, train_base  # noqa: E402

__all__ = [
    "DropSpec",
    "LoraAdapter",
    "ModelConfig",
    "MultimodalSequence",
    "Params",
    "SwapSpec",
    "TrainConfig",
    "VisionTrunk",
    "__version__",
    "attach_lora",
    "change_rate_sweep",
    "drop_sweep",
    "evaluate",
    "finetune_lora",
    "partition_and_sample",
    "profile_dataset",
    "splice_swap",
    "train_base",
]
