"""Base-model training on the mixed synthetic tasks, and layer-masked LoRA fine-tuning.

Both loops share one step: bind the trainable tensors on a fresh tape, take
the answer-only cross-entropy of a batch, clip the global gradient norm and
apply Adam. Data comes from the task generators with training seeds (below
the held-out base); evaluation uses held-out seeds only.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import numkit as nk
from .checkpoint import load_checkpoint, save_checkpoint
from .config import DEFAULT_SEED, EVAL_SAMPLES, HELD_OUT_SEED_BASE, MAX_NEW_TOKENS
from .errors import ContractError, TrainingDivergedError
from .harness import evaluate
from .lora import AdaptedModel, LoraAdapter
from .model import ModelConfig, ModelLike, MultimodalSequence, Params, batch_loss, bind, count_parameters
from .taskgen import TASKS, AnswerSample, CanvasSpec, answer_samples, answer_view, parse_task, render_pair

logger = logging.getLogger(__name__)


def _uniform_mix() -> dict[str, float]:
    return {task.value: 1.0 / len(TASKS) for task in TASKS}


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch: int = 32
    lr: float = 3e-4
    warmup: int = 200
    task_mix: Mapping[str, float] = field(default_factory=_uniform_mix)
    seed: int = DEFAULT_SEED
    eval_every: int = 500
    eval_samples: int = EVAL_SAMPLES
    grad_clip: float = 1.0
    max_new: int = MAX_NEW_TOKENS

    def __post_init__(self) -> None:
        if self.steps < 1 or self.batch < 1:
            raise ContractError("steps and batch must be >= 1")
        if self.lr < 0 or self.warmup < 0 or self.eval_every < 1 or self.eval_samples < 0:
            raise ContractError("lr and warmup must be >= 0, eval_every >= 1, eval_samples >= 0")
        if not self.task_mix:
            raise ContractError("task mix is empty")
        for task, weight in self.task_mix.items():
            parse_task(task)
            if weight < 0:
                raise ContractError(f"task mix weight for {task} is negative")
        if abs(sum(self.task_mix.values()) - 1.0) > 1e-6:
            raise ContractError(f"task mix weights sum to {sum(self.task_mix.values())}, expected 1")

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["task_mix"] = dict(sorted(self.task_mix.items()))
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TrainConfig:
        return cls(**dict(data))


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup over the first ``warmup`` steps, then constant."""
    if config.warmup == 0:
        return config.lr
    return config.lr * min(1.0, (step + 1) / config.warmup)


@dataclass
class MetricsRow:
    step: int
    loss: float
    accuracy: dict[str, float]


@dataclass
class TrainResult:
    params: Params
    metrics: list[MetricsRow]


@dataclass
class FinetuneResult:
    adapter: LoraAdapter
    metrics: list[MetricsRow]
    trainable_parameters: int
    base_parameters: int

    @property
    def trainable_fraction(self) -> float:
        return self.trainable_parameters / self.base_parameters if self.base_parameters else 0.0


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

def training_batch(
    config: TrainConfig,
    model_config: ModelConfig,
    rng: np.random.Generator,
) -> list[MultimodalSequence]:
    """Fresh pairs from training seeds; each contributes its target or source image on a coin flip."""
    canvas = CanvasSpec.from_config(model_config)
    tasks = sorted(config.task_mix)
    probs = np.array([config.task_mix[t] for t in tasks], dtype=np.float64)
    probs /= probs.sum()
    batch = []
    for _ in range(config.batch):
        task = tasks[int(rng.choice(len(tasks), p=probs))]
        pair = render_pair(task, int(rng.integers(HELD_OUT_SEED_BASE)), canvas)
        sample = answer_view(pair, use_source=bool(rng.integers(2)))
        batch.append(sample.sequence(model_config))
    return batch


def pool_batch(pool: Sequence[AnswerSample], size: int, model_config: ModelConfig, rng: np.random.Generator) -> list[MultimodalSequence]:
    picks = rng.choice(len(pool), size=size, replace=len(pool) < size)
    return [pool[int(i)].sequence(model_config) for i in picks]


def held_out_set(config: TrainConfig, model_config: ModelConfig) -> list[AnswerSample]:
    canvas = CanvasSpec.from_config(model_config)
    samples: list[AnswerSample] = []
    for task in sorted(config.task_mix):
        samples.extend(answer_samples(task, config.eval_samples, config.seed, canvas, held_out=True))
    return samples


def _all_task_config(config: TrainConfig) -> TrainConfig:
    return TrainConfig(**{**config.to_dict(), "task_mix": _uniform_mix()})


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------

def train_step(
    model: ModelLike,
    trainable: Sequence[str],
    batch: Sequence[MultimodalSequence],
    state: nk.AdamState,
    hyper: nk.AdamHyper,
    grad_clip: float,
) -> tuple[dict[str, np.ndarray], nk.AdamState, float]:
    """One Adam step on ``trainable``; returns their new arrays, the optimizer state and the loss."""
    tape = nk.Tape()
    w = bind(model, tape, trainable)
    loss = batch_loss(model, w, batch)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDivergedError(f"loss became {value} at optimizer step {state.step + 1}")
    grads = nk.backward(tape, loss)
    grads, norm = nk.clip_grad_norm(grads, grad_clip)
    logger.debug("step %d loss %.4f grad norm %.3f", state.step + 1, value, norm)
    arrays = model.named_arrays()
    current = {name: arrays[name] for name in trainable}
    updated, state = nk.adam_step(current, grads, state, hyper)
    return updated, state, value


def _run_loop(
    model: ModelLike,
    trainable: list[str],
    config: TrainConfig,
    next_batch: Callable[[np.random.Generator], list[MultimodalSequence]],
    rebuild: Callable[[dict[str, np.ndarray]], ModelLike],
    eval_set: Sequence[AnswerSample],
    on_progress: Callable[[int, int], None] | None,
) -> tuple[ModelLike, list[MetricsRow]]:
    rng = np.random.default_rng(config.seed)
    arrays = model.named_arrays()
    state = nk.AdamState.zeros({name: arrays[name] for name in trainable})
    metrics: list[MetricsRow] = []
    window: list[float] = []

    for step in range(config.steps):
        batch = next_batch(rng)
        updated, state, loss = train_step(
            model, trainable, batch, state, nk.AdamHyper(lr=lr_at(step, config)), config.grad_clip
        )
        model = rebuild(updated)
        window.append(loss)

        done = step + 1
        if done % config.eval_every == 0 or done == config.steps:
            accuracy = evaluate(model, eval_set, config.max_new) if eval_set else {}
            row = MetricsRow(done, float(np.mean(window)), accuracy)
            metrics.append(row)
            window = []
            logger.info(
                "step %d/%d loss %.4f accuracy %s",
                done, config.steps, row.loss,
                ", ".join(f"{t}={a:.1f}%" for t, a in accuracy.items()) or "-",
            )
        if on_progress:
            on_progress(done, config.steps)
    return model, metrics


def train_base(
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    params: Params | None = None,
    on_progress: Callable[[int, int], None] | None = None,
) -> TrainResult:
    """Train every base parameter on the task mix with answer-only loss.

    Parameters
    ----------
    config : TrainConfig
        Optimisation settings; ``config.seed`` drives init, data and evaluation.
    model_config : ModelConfig, optional
        Architecture for a fresh model (defaults to ``ModelConfig()``).
    params : Params, optional
        Start from these weights instead of a fresh seeded init.
    on_progress : callable, optional
        Called as ``on_progress(step, steps)`` after every step.

    Returns
    -------
    TrainResult
        Final parameters and the per-evaluation metrics rows.
    """
    if params is None:
        params = Params.initialize(model_config or ModelConfig(), config.seed)
    elif model_config is not None and model_config != params.config:
        raise ContractError("params and model_config disagree")
    model_config = params.config
    logger.info(
        "Training base model: %d parameters, %d steps, batch %d, seed %d",
        count_parameters(params.tensors), config.steps, config.batch, config.seed,
    )
    trained, metrics = _run_loop(
        params,
        sorted(params.tensors),
        config,
        lambda rng: training_batch(config, model_config, rng),
        params.replace,
        held_out_set(config, model_config),
        on_progress,
    )
    return TrainResult(trained, metrics)


def finetune_lora(
    adapted: AdaptedModel,
    config: TrainConfig,
    data: Sequence[AnswerSample] | None = None,
    on_progress: Callable[[int, int], None] | None = None,
) -> FinetuneResult:
    """Train only the adapter's A/B tensors; the base parameters are never touched.

    Batches come from ``data`` when given, otherwise from fresh pairs of the
    tasks in ``config.task_mix``. Evaluation covers every task so retention
    outside the target tasks is visible too.
    """
    model_config = adapted.config
    base_count = count_parameters(adapted.base.tensors)
    trainable = adapted.trainable_names()
    count = adapted.adapter.parameter_count()
    logger.info(
        "Fine-tuning LoRA on layers %s: %d trainable parameters (%.3f%% of %d)",
        list(adapted.adapter.layer_mask), count, 100.0 * count / base_count, base_count,
    )
    if not trainable:
        logger.warning("Adapter has an empty layer mask; nothing to fine-tune")
        return FinetuneResult(adapted.adapter, [], 0, base_count)
    if data is not None and not data:
        raise ContractError("fine-tune data is empty")

    if data is None:
        def next_batch(rng: np.random.Generator) -> list[MultimodalSequence]:
            return training_batch(config, model_config, rng)
    else:
        def next_batch(rng: np.random.Generator) -> list[MultimodalSequence]:
            return pool_batch(data, config.batch, model_config, rng)

    trained, metrics = _run_loop(
        adapted,
        trainable,
        config,
        next_batch,
        lambda updates: adapted.with_adapter(adapted.adapter.replace(updates)),
        held_out_set(_all_task_config(config), model_config),
        on_progress,
    )
    return FinetuneResult(trained.adapter, metrics, count, base_count)


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------

def write_metrics_csv(metrics: Sequence[MetricsRow], path: str | Path) -> Path:
    """CSV with columns step, loss, then one accuracy column per task."""
    path = Path(path)
    tasks = sorted({task for row in metrics for task in row.accuracy})
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss"] + [f"acc_{t}" for t in tasks])
        for row in metrics:
            writer.writerow(
                [row.step, f"{row.loss:.6f}"] + [f"{row.accuracy[t]:.2f}" if t in row.accuracy else "" for t in tasks]
            )
    logger.info("Wrote metrics %s", path)
    return path


__all__ = [
    "FinetuneResult",
    "MetricsRow",
    "TrainConfig",
    "TrainResult",
    "finetune_lora",
    "held_out_set",
    "load_checkpoint",
    "lr_at",
    "save_checkpoint",
    "train_base",
    "train_step",
    "training_batch",
    "write_metrics_csv",
]
