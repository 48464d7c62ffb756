from __future__ import annotations

import os

import numpy as np
import pytest

from vfl_workbench.model import ModelConfig, MultimodalSequence, Params
from vfl_workbench.taskgen import CanvasSpec, answer_samples, paired_samples
from vfl_workbench.tokenizer import EOS_ID, IMG_ID

RUN_SLOW = os.environ.get("VFL_RUN_SLOW") == "1"

# 32px canvas so every task (OCR included) renders; 16 vision tokens
TINY = ModelConfig(n_layers=3, d_model=16, n_heads=2, d_ff=32, image_size=32, patch_size=8, max_seq=48)

# 16px canvas, 4 vision tokens; small enough for finite differences
MICRO = ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16, image_size=16, patch_size=8, max_seq=40)


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW:
        return
    skip = pytest.mark.skip(reason="set VFL_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return TINY


@pytest.fixture
def micro_config() -> ModelConfig:
    return MICRO


@pytest.fixture
def tiny_model() -> Params:
    return Params.initialize(TINY, seed=0)


@pytest.fixture
def micro_model() -> Params:
    return Params.initialize(MICRO, seed=0)


@pytest.fixture
def tiny_canvas() -> CanvasSpec:
    return CanvasSpec.from_config(TINY)


def random_image(config: ModelConfig, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=config.image_shape).astype(np.float32)


def random_sequence(
    config: ModelConfig,
    rng: np.random.Generator,
    n_text: int = 5,
    n_answer: int = 0,
) -> MultimodalSequence:
    """BOS, the vision span, then random character tokens; optional random answer ending in EOS."""
    text = [int(t) for t in rng.integers(IMG_ID + 1, config.vocab_size, size=n_text)]
    answer = [int(t) for t in rng.integers(IMG_ID + 1, config.vocab_size, size=n_answer)]
    return MultimodalSequence(
        tokens=[1] + [IMG_ID] * config.n_vision + text,
        vision_span=(1, 1 + config.n_vision),
        image=random_image(config, rng),
        answer=answer + [EOS_ID] if n_answer else [],
    )


@pytest.fixture
def count_pairs(tiny_canvas):
    return paired_samples("count", 3, seed=7, canvas=tiny_canvas)


@pytest.fixture
def count_answers(tiny_canvas):
    return answer_samples("count", 4, seed=7, canvas=tiny_canvas)


@pytest.fixture
def count_sequence(tiny_config, count_answers):
    return count_answers[0].sequence(tiny_config, with_answer=True)

