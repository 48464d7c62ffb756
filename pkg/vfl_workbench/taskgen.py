"""Deterministic synthetic generators for the four paired-image probing tasks.

Every pair isolates one visual attribute:

- OCR: two distinct words at the same position
- grounding: one patch-sized square at two distinct grid cells
- count: n vs m squares sharing one cell order, so the images differ only
  in the extra squares
- recognition: an object shape vs a blank canvas

Generators are pure functions of their seed. The target is the
"interesting" image; ``flip_roles=True`` swaps target and source on a seeded
coin flip instead.
"""

from __future__ import annotations

import base64
import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Sequence

import numpy as np

from .config import HELD_OUT_SEED_BASE
from .errors import ContractError, GenerationError
from .glyphs import FONT, GLYPH_HEIGHT, GLYPH_WIDTH, SHAPE_KINDS, SHAPES, WORDS
from .model import ModelConfig, MultimodalSequence, VISION_START
from .tokenizer import BOS_ID, EOS_ID, IMG_ID, encode

logger = logging.getLogger(__name__)

OCR_X0 = 1
GLYPH_PITCH = GLYPH_WIDTH + 1
MAX_COUNT = 6


class Task(str, enum.Enum):
    OCR = "ocr"
    GROUNDING = "grounding"
    COUNT = "count"
    RECOGNITION = "recognition"


TASKS: tuple[Task, ...] = tuple(Task)

PROMPTS = {
    Task.OCR: "what is written",
    Task.GROUNDING: "where is the square",
    Task.COUNT: "how many squares",
    Task.RECOGNITION: "is there a {kind}",
}


def parse_task(value: str | Task) -> Task:
    try:
        return Task(value)
    except ValueError:
        raise ContractError(f"unknown task {value!r}; expected one of {[t.value for t in Task]}") from None


@dataclass(frozen=True)
class CanvasSpec:
    image_size: int = 32
    channels: int = 1
    patch_size: int = 8

    @classmethod
    def from_config(cls, config: ModelConfig) -> CanvasSpec:
        return cls(config.image_size, config.channels, config.patch_size)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_cells(self) -> int:
        return self.grid ** 2

    def blank(self) -> np.ndarray:
        return np.zeros((self.image_size, self.image_size, self.channels), dtype=np.float32)

    def cell_origin(self, cell: int) -> tuple[int, int]:
        """Pixel (x, y) of the top-left corner of grid cell ``cell`` (row-major)."""
        return (cell % self.grid) * self.patch_size, (cell // self.grid) * self.patch_size


DEFAULT_CANVAS = CanvasSpec()


@dataclass
class PairedSample:
    sample_id: str
    task: Task
    target: np.ndarray
    source: np.ndarray
    prompt_text: str
    target_truth: str
    source_truth: str
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def prompt_tokens(self) -> list[int]:
        return encode(self.prompt_text)

    def target_sequence(self, config: ModelConfig, with_answer: bool = False) -> MultimodalSequence:
        return build_sequence(config, self.prompt_text, self.target, self.target_truth if with_answer else None)

    def source_sequence(self, config: ModelConfig, with_answer: bool = False) -> MultimodalSequence:
        return build_sequence(config, self.prompt_text, self.source, self.source_truth if with_answer else None)


@dataclass
class AnswerSample:
    """One image with its prompt and ground-truth answer."""

    sample_id: str
    task: Task
    image: np.ndarray
    prompt_text: str
    answer_text: str
    metadata: dict[str, Any] = field(default_factory=dict)

    def sequence(self, config: ModelConfig, with_answer: bool = True) -> MultimodalSequence:
        return build_sequence(config, self.prompt_text, self.image, self.answer_text if with_answer else None)


def build_sequence(
    config: ModelConfig,
    prompt_text: str,
    image: np.ndarray,
    answer_text: str | None = None,
) -> MultimodalSequence:
    """``[BOS] + N_v x [IMG] + prompt``, with ``answer + [EOS]`` when an answer is given."""
    n_vision = config.n_vision
    tokens = [BOS_ID] + [IMG_ID] * n_vision + encode(prompt_text)
    answer = [] if answer_text is None else encode(answer_text) + [EOS_ID]
    return MultimodalSequence(
        tokens=tokens,
        vision_span=(VISION_START, VISION_START + n_vision),
        image=image,
        answer=answer,
    )


# ---------------------------------------------------------------------------
# Drawing
# ---------------------------------------------------------------------------

def _stamp(canvas: np.ndarray, bitmap: np.ndarray, x: int, y: int) -> None:
    h, w = bitmap.shape
    region = canvas[y:y + h, x:x + w, :]
    np.maximum(region, bitmap[:, :, None], out=region)


def ocr_origin(canvas: CanvasSpec) -> tuple[int, int]:
    return OCR_X0, (canvas.image_size - GLYPH_HEIGHT) // 2


def ocr_capacity(canvas: CanvasSpec) -> int:
    """Largest word length that fits at the fixed OCR position."""
    return max(0, (canvas.image_size - OCR_X0 - GLYPH_WIDTH) // GLYPH_PITCH + 1)


def draw_word(word: str, canvas: CanvasSpec = DEFAULT_CANVAS) -> np.ndarray:
    if len(word) > ocr_capacity(canvas):
        raise GenerationError(
            f"word {word!r} has {len(word)} letters, canvas of {canvas.image_size}px fits {ocr_capacity(canvas)}"
        )
    image = canvas.blank()
    x0, y0 = ocr_origin(canvas)
    for i, ch in enumerate(word):
        if ch not in FONT:
            raise GenerationError(f"no glyph for {ch!r}")
        _stamp(image, FONT[ch], x0 + i * GLYPH_PITCH, y0)
    return image


def _square_cells(image: np.ndarray, cells: Iterable[int], canvas: CanvasSpec, size: int, offset: int) -> None:
    for cell in cells:
        x, y = canvas.cell_origin(int(cell))
        image[y + offset:y + offset + size, x + offset:x + offset + size, :] = 1.0


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def _maybe_flip(sample: PairedSample, rng: np.random.Generator, flip_roles: bool) -> PairedSample:
    if not flip_roles or rng.integers(2) == 0:
        sample.metadata["flipped"] = False
        return sample
    meta = dict(sample.metadata)
    for key in list(meta):
        if key.startswith("target_"):
            meta[key], meta["source_" + key[len("target_"):]] = meta["source_" + key[len("target_"):]], meta[key]
    meta["flipped"] = True
    return PairedSample(
        sample_id=sample.sample_id,
        task=sample.task,
        target=sample.source,
        source=sample.target,
        prompt_text=sample.prompt_text,
        target_truth=sample.source_truth,
        source_truth=sample.target_truth,
        metadata=meta,
    )


# ---------------------------------------------------------------------------
# Pair renderers
# ---------------------------------------------------------------------------

def render_ocr_pair(
    rng_seed: int,
    canvas: CanvasSpec = DEFAULT_CANVAS,
    flip_roles: bool = False,
    words: Sequence[str] = WORDS,
) -> PairedSample:
    if len(set(words)) < 2:
        raise GenerationError("OCR pairs need at least two distinct words")
    rng = _rng(rng_seed)
    vocabulary = sorted(set(words))
    first, second = rng.choice(len(vocabulary), size=2, replace=False)
    target_word, source_word = vocabulary[first], vocabulary[second]
    x0, y0 = ocr_origin(canvas)
    longest = max(len(target_word), len(source_word))
    sample = PairedSample(
        sample_id=f"ocr-{rng_seed}",
        task=Task.OCR,
        target=draw_word(target_word, canvas),
        source=draw_word(source_word, canvas),
        prompt_text=PROMPTS[Task.OCR],
        target_truth=target_word,
        source_truth=source_word,
        metadata={
            "target_word": target_word,
            "source_word": source_word,
            "region": [x0, y0, x0 + (longest - 1) * GLYPH_PITCH + GLYPH_WIDTH - 1, y0 + GLYPH_HEIGHT - 1],
        },
    )
    return _maybe_flip(sample, rng, flip_roles)


def render_grounding_pair(
    rng_seed: int,
    canvas: CanvasSpec = DEFAULT_CANVAS,
    flip_roles: bool = False,
) -> PairedSample:
    if canvas.n_cells < 2:
        raise GenerationError("grounding pairs need at least two grid cells")
    rng = _rng(rng_seed)
    target_cell, source_cell = (int(c) for c in rng.choice(canvas.n_cells, size=2, replace=False))
    images = []
    boxes = []
    for cell in (target_cell, source_cell):
        image = canvas.blank()
        _square_cells(image, [cell], canvas, canvas.patch_size, 0)
        images.append(image)
        cx, cy = cell % canvas.grid, cell // canvas.grid
        boxes.append((cx, cy, cx, cy))
    sample = PairedSample(
        sample_id=f"grounding-{rng_seed}",
        task=Task.GROUNDING,
        target=images[0],
        source=images[1],
        prompt_text=PROMPTS[Task.GROUNDING],
        target_truth=format_box(boxes[0]),
        source_truth=format_box(boxes[1]),
        metadata={"target_box": list(boxes[0]), "source_box": list(boxes[1])},
    )
    return _maybe_flip(sample, rng, flip_roles)


def render_count_pair(
    rng_seed: int,
    canvas: CanvasSpec = DEFAULT_CANVAS,
    flip_roles: bool = False,
    max_count: int = MAX_COUNT,
) -> PairedSample:
    if max_count < 2:
        raise GenerationError("count pairs need max_count >= 2")
    if max_count > canvas.n_cells:
        raise GenerationError(f"count up to {max_count} exceeds the {canvas.n_cells} free cells")
    rng = _rng(rng_seed)
    n, m = (int(c) + 1 for c in rng.choice(max_count, size=2, replace=False))
    order = [int(c) for c in rng.permutation(canvas.n_cells)]
    size = max(1, canvas.patch_size // 2)
    offset = (canvas.patch_size - size) // 2
    images = []
    for count in (n, m):
        image = canvas.blank()
        _square_cells(image, order[:count], canvas, size, offset)
        images.append(image)
    sample = PairedSample(
        sample_id=f"count-{rng_seed}",
        task=Task.COUNT,
        target=images[0],
        source=images[1],
        prompt_text=PROMPTS[Task.COUNT],
        target_truth=str(n),
        source_truth=str(m),
        metadata={"target_count": n, "source_count": m, "target_cells": order[:n], "source_cells": order[:m]},
    )
    return _maybe_flip(sample, rng, flip_roles)


def render_recognition_pair(
    rng_seed: int,
    canvas: CanvasSpec = DEFAULT_CANVAS,
    flip_roles: bool = False,
) -> PairedSample:
    rng = _rng(rng_seed)
    kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
    shape = SHAPES[kind]
    if shape.shape[0] > canvas.patch_size:
        raise GenerationError(f"shape {kind!r} does not fit a {canvas.patch_size}px cell")
    cell = int(rng.integers(canvas.n_cells))
    x, y = canvas.cell_origin(cell)
    target = canvas.blank()
    _stamp(target, shape, x, y)
    sample = PairedSample(
        sample_id=f"recognition-{rng_seed}",
        task=Task.RECOGNITION,
        target=target,
        source=canvas.blank(),
        prompt_text=PROMPTS[Task.RECOGNITION].format(kind=kind),
        target_truth="yes",
        source_truth="no",
        metadata={"kind": kind, "cell": cell, "region": [x, y, x + shape.shape[1] - 1, y + shape.shape[0] - 1]},
    )
    return _maybe_flip(sample, rng, flip_roles)


RENDERERS: dict[Task, Callable[..., PairedSample]] = {
    Task.OCR: render_ocr_pair,
    Task.GROUNDING: render_grounding_pair,
    Task.COUNT: render_count_pair,
    Task.RECOGNITION: render_recognition_pair,
}


def render_pair(task: Task | str, rng_seed: int, canvas: CanvasSpec = DEFAULT_CANVAS, flip_roles: bool = False) -> PairedSample:
    return RENDERERS[parse_task(task)](rng_seed, canvas, flip_roles)


# ---------------------------------------------------------------------------
# Sample sets
# ---------------------------------------------------------------------------

def sample_seeds(seed: int, n: int, held_out: bool = False) -> list[int]:
    """``n`` distinct per-sample seeds; held-out seeds never collide with training ones."""
    if n < 0:
        raise ContractError("sample count must be non-negative")
    if n == 0:
        return []
    draws = np.random.default_rng(seed).choice(HELD_OUT_SEED_BASE, size=n, replace=False)
    base = HELD_OUT_SEED_BASE if held_out else 0
    return [base + int(s) for s in draws]


def paired_samples(
    task: Task | str,
    n: int,
    seed: int,
    canvas: CanvasSpec = DEFAULT_CANVAS,
    flip_roles: bool = False,
    held_out: bool = True,
) -> list[PairedSample]:
    task = parse_task(task)
    return [render_pair(task, s, canvas, flip_roles) for s in sample_seeds(seed, n, held_out)]


def answer_view(pair: PairedSample, use_source: bool) -> AnswerSample:
    image, truth = (pair.source, pair.source_truth) if use_source else (pair.target, pair.target_truth)
    metadata = {k: v for k, v in pair.metadata.items() if not k.startswith(("target_", "source_"))}
    if pair.task is Task.GROUNDING:
        metadata["box"] = list(parse_box(truth))
    return AnswerSample(
        sample_id=f"{pair.sample_id}-{'s' if use_source else 't'}",
        task=pair.task,
        image=image,
        prompt_text=pair.prompt_text,
        answer_text=truth,
        metadata=metadata,
    )


def answer_samples(
    task: Task | str,
    n: int,
    seed: int,
    canvas: CanvasSpec = DEFAULT_CANVAS,
    held_out: bool = True,
) -> list[AnswerSample]:
    """Evaluation set alternating target and source images of successive pairs."""
    task = parse_task(task)
    seeds = sample_seeds(seed, n, held_out)
    return [answer_view(render_pair(task, s, canvas), use_source=bool(i % 2)) for i, s in enumerate(seeds)]


def mixed_answer_samples(
    n: int,
    seed: int,
    tasks: Sequence[Task | str] = TASKS,
    canvas: CanvasSpec = DEFAULT_CANVAS,
    held_out: bool = True,
) -> list[AnswerSample]:
    """Pool cycling through ``tasks``; sample i uses task ``tasks[i % len(tasks)]``."""
    tasks = [parse_task(t) for t in tasks]
    if not tasks:
        raise ContractError("mixed pool needs at least one task")
    seeds = sample_seeds(seed, n, held_out)
    out = []
    for i, s in enumerate(seeds):
        task = tasks[i % len(tasks)]
        out.append(answer_view(render_pair(task, s, canvas), use_source=bool((i // len(tasks)) % 2)))
    return out


# ---------------------------------------------------------------------------
# Box text
# ---------------------------------------------------------------------------

def format_box(box: Sequence[int]) -> str:
    return ",".join(str(int(v)) for v in box)


def parse_box(text: str) -> tuple[int, int, int, int] | None:
    """``"x1,y1,x2,y2"`` to a tuple, or ``None`` when the text is not four integers."""
    parts = text.strip().split(",")
    if len(parts) != 4 or not all(p.strip().isdigit() for p in parts):
        return None
    x1, y1, x2, y2 = (int(p) for p in parts)
    return (x1, y1, x2, y2)


# ---------------------------------------------------------------------------
# Scanning oracles
# ---------------------------------------------------------------------------

def is_blank(image: np.ndarray) -> bool:
    return not bool(np.any(image > 0))


def scan_box(image: np.ndarray, patch_size: int) -> tuple[int, int, int, int] | None:
    """Inclusive grid box covering every lit pixel, or ``None`` for a blank canvas."""
    lit = np.any(image > 0, axis=-1)
    ys, xs = np.nonzero(lit)
    if len(xs) == 0:
        return None
    return (int(xs.min()) // patch_size, int(ys.min()) // patch_size,
            int(xs.max()) // patch_size, int(ys.max()) // patch_size)


def count_components(image: np.ndarray) -> int:
    """Number of 4-connected groups of lit pixels."""
    lit = np.any(image > 0, axis=-1)
    seen = np.zeros_like(lit)
    h, w = lit.shape
    components = 0
    for y0, x0 in zip(*np.nonzero(lit)):
        if seen[y0, x0]:
            continue
        components += 1
        stack = [(y0, x0)]
        seen[y0, x0] = True
        while stack:
            y, x = stack.pop()
            for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if 0 <= ny < h and 0 <= nx < w and lit[ny, nx] and not seen[ny, nx]:
                    seen[ny, nx] = True
                    stack.append((ny, nx))
    return components


def read_word(image: np.ndarray, canvas: CanvasSpec = DEFAULT_CANVAS) -> str:
    """Match each glyph slot at the OCR position against the font; blank slots end the word."""
    lit = np.any(image > 0, axis=-1).astype(np.float32)
    x0, y0 = ocr_origin(canvas)
    letters = []
    for slot in range(ocr_capacity(canvas)):
        x = x0 + slot * GLYPH_PITCH
        cell = lit[y0:y0 + GLYPH_HEIGHT, x:x + GLYPH_WIDTH]
        if not cell.any():
            break
        match = next((ch for ch, bitmap in FONT.items() if np.array_equal(bitmap, cell)), None)
        if match is None:
            raise GenerationError(f"glyph slot {slot} matches no font letter")
        letters.append(match)
    return "".join(letters)


# ---------------------------------------------------------------------------
# JSON-lines export
# ---------------------------------------------------------------------------

def _encode_pixels(image: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(image, dtype="<f4").tobytes()).decode("ascii")


def _decode_pixels(text: str, shape: Sequence[int]) -> np.ndarray:
    raw = base64.b64decode(text.encode("ascii"))
    return np.frombuffer(raw, dtype="<f4").reshape(tuple(shape)).astype(np.float32)


def pair_to_record(sample: PairedSample) -> dict[str, Any]:
    return {
        "id": sample.sample_id,
        "task": sample.task.value,
        "prompt": sample.prompt_text,
        "target_truth": sample.target_truth,
        "source_truth": sample.source_truth,
        "shape": list(sample.target.shape),
        "target_pixels": _encode_pixels(sample.target),
        "source_pixels": _encode_pixels(sample.source),
        "metadata": sample.metadata,
    }


def pair_from_record(record: dict[str, Any]) -> PairedSample:
    try:
        shape = record["shape"]
        return PairedSample(
            sample_id=record["id"],
            task=parse_task(record["task"]),
            target=_decode_pixels(record["target_pixels"], shape),
            source=_decode_pixels(record["source_pixels"], shape),
            prompt_text=record["prompt"],
            target_truth=record["target_truth"],
            source_truth=record["source_truth"],
            metadata=dict(record.get("metadata", {})),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ContractError(f"malformed sample record: {exc}") from exc


def export_jsonl(samples: Iterable[PairedSample], path: str | Path) -> int:
    """Write one sample per line; returns the number written."""
    path = Path(path)
    count = 0
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for sample in samples:
            fh.write(json.dumps(pair_to_record(sample), sort_keys=True, separators=(",", ":")))
            fh.write("\n")
            count += 1
    logger.info("Wrote %d samples to %s", count, path)
    return count


def iter_jsonl(path: str | Path) -> Iterator[PairedSample]:
    with Path(path).open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ContractError(f"{path}:{line_no}: invalid JSON ({exc})") from exc
            yield pair_from_record(record)


def load_jsonl(path: str | Path) -> list[PairedSample]:
    return list(iter_jsonl(path))


__all__ = [
    "AnswerSample",
    "CanvasSpec",
    "DEFAULT_CANVAS",
    "PairedSample",
    "RENDERERS",
    "TASKS",
    "Task",
    "answer_samples",
    "answer_view",
    "build_sequence",
    "count_components",
    "draw_word",
    "export_jsonl",
    "format_box",
    "is_blank",
    "load_jsonl",
    "mixed_answer_samples",
    "paired_samples",
    "parse_box",
    "parse_task",
    "read_word",
    "render_count_pair",
    "render_grounding_pair",
    "render_ocr_pair",
    "render_pair",
    "render_recognition_pair",
    "sample_seeds",
    "scan_box",
]
